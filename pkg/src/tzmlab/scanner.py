"""Static firmware scanner.

Linear-sweep census over raw flash bytes, return-oriented gadget
discovery, gateway entry spotting, and a hunter for stack-register
branches. Everything here works on plain byte strings; no machine is
involved.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from . import isa
from .isa import Blx, Bx, DecodeError, Pop, Sg
from .memory import Attr

DEFAULT_MAX_GADGET_LEN = 4
CENSUS_DEMO_SEED = 0x7A51


def sweep(data, base: int = 0):
    """Linear sweep: yields (addr, instruction_or_None, size).

    Decodable instructions advance by their size; anything else is
    reported as a single unknown halfword. A trailing odd byte is
    ignored.
    """
    data = bytes(data)
    pos = 0
    n = len(data)
    while pos + 2 <= n:
        try:
            ins, size = isa.decode(data, pos)
        except DecodeError:
            yield base + pos, None, 2
            pos += 2
            continue
        yield base + pos, ins, size
        pos += size


def iter_instructions(data, base: int = 0):
    """Like sweep, but yields only (addr, instruction) pairs."""
    for addr, ins, _ in sweep(data, base):
        if ins is not None:
            yield addr, ins


def census(data, base: int = 0) -> dict:
    """Instruction census of one flash bank.

    density is the fraction of decoded instructions that end a function
    the way a code-reuse chain wants: pop-into-pc or bx lr.
    """
    total = pop_pc = bx_lr = unknown = 0
    for _, ins, _ in sweep(data, base):
        if ins is None:
            unknown += 1
            continue
        total += 1
        if isinstance(ins, Pop) and ins.pc:
            pop_pc += 1
        elif isinstance(ins, Bx) and ins.rm == 14:
            bx_lr += 1
    return {
        "total": total,
        "pop_pc": pop_pc,
        "bx_lr": bx_lr,
        "unknown": unknown,
        "density": (pop_pc + bx_lr) / total if total else 0.0,
    }


@dataclass(frozen=True)
class Gadget:
    entry: int
    length: int  # instructions, terminator included
    terminator: str  # "pop_pc" | "pop_bx_lr"
    pop_effect: tuple  # register names the terminator pops, stack order
    text: tuple

    def as_dict(self) -> dict:
        return {
            "entry": self.entry,
            "length": self.length,
            "terminator": self.terminator,
            "pop_effect": list(self.pop_effect),
            "text": list(self.text),
        }


def _decode_at(data, pos):
    try:
        return isa.decode(data, pos)
    except DecodeError:
        return None, 0


def _terminator_at(data, pos):
    """(kind, byte size, instruction count, pop, tail) or None."""
    ins, size = _decode_at(data, pos)
    if not isinstance(ins, Pop):
        return None
    if ins.pc:
        return "pop_pc", size, 1, ins, (ins,)
    nxt, nsize = _decode_at(data, pos + size)
    if isinstance(nxt, Bx) and nxt.rm == 14:
        return "pop_bx_lr", size + nsize, 2, ins, (ins, nxt)
    return None


def find_gadgets(data, base: int = 0,
                 max_len: int = DEFAULT_MAX_GADGET_LEN) -> list:
    """Gadget windows: instruction runs ending in pop-pc or pop-then-
    bx-lr, at most max_len instructions long, decoded contiguously with
    no earlier terminator inside. Candidate entries are every halfword
    offset, so windows the original code never laid out count too.
    """
    data = bytes(data)
    found = {}
    for pos in range(0, len(data) - 1, 2):
        term = _terminator_at(data, pos)
        if term is None:
            continue
        kind, t_bytes, t_count, pop, tail = term
        effect = tuple(f"r{r}" for r in pop.regs)
        if kind == "pop_pc":
            effect += ("pc",)
        tail_text = tuple(t.text() for t in tail)
        if t_count <= max_len:
            found.setdefault(base + pos, Gadget(
                entry=base + pos, length=t_count, terminator=kind,
                pop_effect=effect, text=tail_text))
        # grow the window backwards one candidate start at a time
        lead_budget = 4 * (max_len - t_count)
        for start in range(pos - 2, pos - lead_budget - 1, -2):
            if start < 0:
                break
            lead = _chain(data, start, pos, max_len - t_count)
            if lead is None:
                continue
            entry = base + start
            if entry in found:
                continue
            found[entry] = Gadget(
                entry=entry, length=len(lead) + t_count, terminator=kind,
                pop_effect=effect,
                text=tuple(i.text() for i in lead) + tail_text)
    return [found[k] for k in sorted(found)]


def _chain(data, start, stop, limit):
    """Instructions decoding contiguously from start to exactly stop,
    none of them a terminator; None if the bytes do not chain."""
    out = []
    pos = start
    while pos < stop:
        if len(out) == limit:
            return None
        if _terminator_at(data, pos) is not None:
            return None
        ins, size = _decode_at(data, pos)
        if ins is None:
            return None
        out.append(ins)
        pos += size
    return out if pos == stop else None


def find_nsc_entries(data, base: int = 0, memmap=None) -> list:
    """Addresses of gateway markers. With a memory map, only markers
    inside gateway-attributed regions count."""
    data = bytes(data)
    out = []
    for pos in range(0, len(data) - 3, 2):
        ins, _ = _decode_at(data, pos)
        if not isinstance(ins, Sg):
            continue
        addr = base + pos
        if memmap is not None:
            region = memmap.region_at(addr)
            if region is None or region.attr is not Attr.NSC:
                continue
        out.append(addr)
    return out


def find_jmp_sp(data, base: int = 0) -> list:
    """Addresses of branches through the stack pointer (bx sp, blx sp):
    with those, a pivoted stack is one instruction from being code."""
    data = bytes(data)
    out = []
    for pos in range(0, len(data) - 1, 2):
        ins, _ = _decode_at(data, pos)
        if isinstance(ins, (Bx, Blx)) and ins.rm == 13:
            out.append(base + pos)
    return out


def scan_report(data, base: int = 0, memmap=None,
                max_len: int = DEFAULT_MAX_GADGET_LEN) -> dict:
    rep = census(data, base)
    rep["gadgets"] = [g.as_dict() for g in find_gadgets(data, base, max_len)]
    rep["nsc_entries"] = find_nsc_entries(data, base, memmap)
    rep["jmp_sp"] = find_jmp_sp(data, base)
    return rep


def format_density(density: float) -> str:
    return f"{density * 100:.2f}%"


# --- deterministic demo image -------------------------------------------

def census_demo(seed: int = CENSUS_DEMO_SEED) -> bytes:
    """Fixed demo bank: 1908 instructions of which 49 pop into pc and 16
    return via bx lr, giving a 3.41% terminator density over 4240 bytes.

    Branch-and-link padding mimics call-heavy firmware; fillers are
    harmless ALU and load/store forms. The stream is shuffled with a
    seeded generator so the layout looks organic but never changes.
    """
    rng = random.Random(seed)
    instrs = []
    for _ in range(49):
        regs = tuple(sorted(rng.sample(range(4, 8), rng.randint(0, 3))))
        instrs.append(isa.Pop(regs, pc=True))
    instrs += [isa.Bx(14)] * 16
    instrs += [isa.Bl(0)] * 212
    fillers = 1908 - len(instrs)
    for _ in range(fillers):
        pick = rng.randrange(5)
        if pick == 0:
            instrs.append(isa.MovImm(rng.randrange(8), rng.randrange(256)))
        elif pick == 1:
            instrs.append(isa.CmpImm(rng.randrange(8), rng.randrange(256)))
        elif pick == 2:
            instrs.append(isa.AddImm(rng.randrange(8), None,
                                     rng.randrange(1, 256)))
        elif pick == 3:
            instrs.append(isa.LdrImm(rng.randrange(8), rng.randrange(8),
                                     4 * rng.randrange(32)))
        else:
            instrs.append(isa.Nop())
    rng.shuffle(instrs)
    blob = b"".join(i.encode() for i in instrs)
    assert len(blob) == 4240
    return blob
