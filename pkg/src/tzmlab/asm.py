"""Tiny two-pass assembler for the Thumb subset.

Accepts the usual flat syntax: one statement per line, `label:` prefixes,
`;` or `@` comments, data directives (.word .byte .ascii .asciz .space
.align .pool) and `ldr rX, =expr` literal-pool loads. Symbols are raw
addresses; callers add the Thumb bit where they need one. `externs` lets
separately assembled programs call into each other.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import COND_NAMES


class AsmError(Exception):
    pass


@dataclass
class AsmProgram:
    base: int
    data: bytes
    symbols: dict = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.base + len(self.data)


_REGS = {f"r{i}": i for i in range(16)}
_REGS.update({"sp": 13, "lr": 14, "pc": 15})

_BCC = {f"b{name}": i for i, name in enumerate(COND_NAMES)}

_TOKEN = re.compile(r"([A-Za-z_.$][\w.$]*|0[xX][0-9a-fA-F_]+|\d+|[|+-])")

_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$")


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch in ";@" and not in_str:
            break
        out.append(ch)
        i += 1
    return "".join(out).strip()


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "n":
                out.append(0x0A)
            elif nxt == "t":
                out.append(0x09)
            elif nxt == "0":
                out.append(0x00)
            elif nxt == "\\":
                out.append(0x5C)
            elif nxt == '"':
                out.append(0x22)
            elif nxt == "x" and i + 3 < len(text):
                out.append(int(text[i + 2:i + 4], 16))
                i += 4
                continue
            else:
                raise AsmError(f"bad escape \\{nxt}")
            i += 2
            continue
        out.append(ord(ch))
        i += 1
    return bytes(out)


def _split_operands(text: str) -> list:
    """Split on commas that are not inside [] or {}."""
    parts = []
    depth = 0
    cur = []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        parts.append(tail)
    return parts


def _parse_int(tok: str) -> int:
    return int(tok.replace("_", ""), 0)


class _Assembler:
    def __init__(self, source, base, externs):
        if base % 2:
            raise AsmError(f"base 0x{base:x} is not halfword aligned")
        self.source = source
        self.base = base
        self.externs = dict(externs or {})
        self.symbols = {}
        self.items = []        # (line_no, kind, payload)
        self.pool_addr = {}    # (segment, expr) -> literal address
        self.segment = 0
        self.pending = []      # exprs queued for the next pool flush

    # --- expression evaluation (pass 2) --------------------------------

    def _lookup(self, name, line_no):
        if name in self.symbols:
            return self.symbols[name]
        if name in self.externs:
            return self.externs[name]
        raise AsmError(f"line {line_no}: unknown symbol '{name}'")

    def _eval(self, expr, line_no):
        toks = _TOKEN.findall(expr)
        if not toks or "".join(toks) != expr.replace(" ", ""):
            raise AsmError(f"line {line_no}: bad expression '{expr}'")
        def atom(tok):
            if tok[0].isdigit():
                return _parse_int(tok)
            return self._lookup(tok, line_no)
        value = atom(toks[0])
        i = 1
        while i < len(toks):
            op, tok = toks[i], toks[i + 1] if i + 1 < len(toks) else None
            if tok is None or op not in "|+-":
                raise AsmError(f"line {line_no}: bad expression '{expr}'")
            rhs = atom(tok)
            if op == "+":
                value += rhs
            elif op == "-":
                value -= rhs
            else:
                value |= rhs
            i += 2
        return value

    # --- pass 1: layout -------------------------------------------------

    def _flush_pool(self, line_no):
        if not self.pending:
            self.segment += 1
            return
        pad = -self.addr % 4
        if pad:
            self.items.append((line_no, "fill", pad))
            self.addr += pad
        for expr in self.pending:
            self.pool_addr[(self.segment, expr)] = self.addr
            self.items.append((line_no, "word", [expr]))
            self.addr += 4
        self.pending = []
        self.segment += 1

    def layout(self):
        self.addr = self.base
        for line_no, raw in enumerate(self.source.splitlines(), 1):
            line = _strip_comment(raw)
            while True:
                m = _LABEL.match(line)
                if not m:
                    break
                name = m.group(1)
                if name in self.symbols:
                    raise AsmError(f"line {line_no}: duplicate label '{name}'")
                self.symbols[name] = self.addr
                line = m.group(2).strip()
            if not line:
                continue
            if line.startswith("."):
                self._layout_directive(line_no, line)
            else:
                self._layout_instr(line_no, line)
        self._flush_pool(len(self.source.splitlines()) + 1)
        return self

    def _layout_directive(self, line_no, line):
        parts = line.split(None, 1)
        name = parts[0]
        rest = parts[1] if len(parts) > 1 else ""
        if name == ".word":
            pad = -self.addr % 4
            if pad:
                self.items.append((line_no, "fill", pad))
                self.addr += pad
            exprs = _split_operands(rest)
            if not exprs:
                raise AsmError(f"line {line_no}: .word needs a value")
            self.items.append((line_no, "word", exprs))
            self.addr += 4 * len(exprs)
        elif name == ".byte":
            exprs = _split_operands(rest)
            if not exprs:
                raise AsmError(f"line {line_no}: .byte needs a value")
            self.items.append((line_no, "byte", exprs))
            self.addr += len(exprs)
        elif name in (".ascii", ".asciz"):
            m = re.match(r'^"(.*)"$', rest.strip())
            if not m:
                raise AsmError(f"line {line_no}: {name} needs a quoted string")
            blob = _unescape(m.group(1))
            if name == ".asciz":
                blob += b"\x00"
            self.items.append((line_no, "bytes", blob))
            self.addr += len(blob)
        elif name == ".space":
            ops = _split_operands(rest)
            if not ops:
                raise AsmError(f"line {line_no}: .space needs a size")
            count = _parse_int(ops[0])
            fill = _parse_int(ops[1]) if len(ops) > 1 else 0
            self.items.append((line_no, "bytes", bytes([fill & 0xFF]) * count))
            self.addr += count
        elif name == ".align":
            pad = -self.addr % 4
            if pad:
                self.items.append((line_no, "fill", pad))
                self.addr += pad
        elif name == ".pool":
            self._flush_pool(line_no)
        else:
            raise AsmError(f"line {line_no}: unknown directive {name}")

    def _layout_instr(self, line_no, line):
        parts = line.split(None, 1)
        mnem = parts[0].lower()
        ops = parts[1] if len(parts) > 1 else ""
        size = 4 if mnem in ("bl", "sg") else 2
        key = None
        if mnem == "ldr" and "=" in ops:
            expr = ops.split("=", 1)[1].strip().replace(" ", "")
            if expr not in self.pending:
                self.pending.append(expr)
            key = (self.segment, expr)
        self.items.append((line_no, "instr", (mnem, ops, self.addr, key)))
        self.addr += size

    # --- pass 2: encode -------------------------------------------------

    def emit(self) -> bytes:
        out = bytearray()
        for line_no, kind, payload in self.items:
            if kind == "fill":
                out += bytes(payload)
            elif kind == "bytes":
                out += payload
            elif kind == "byte":
                out += bytes(self._eval(e, line_no) & 0xFF for e in payload)
            elif kind == "word":
                for e in payload:
                    out += struct.pack("<I", self._eval(e, line_no) & 0xFFFFFFFF)
            else:
                try:
                    out += self._encode(line_no, *payload)
                except ValueError as exc:
                    raise AsmError(f"line {line_no}: {exc}") from exc
        return bytes(out)

    def _reg(self, tok, line_no, low=False):
        r = _REGS.get(tok.strip().lower())
        if r is None:
            raise AsmError(f"line {line_no}: expected register, got '{tok}'")
        if low and r > 7:
            raise AsmError(f"line {line_no}: '{tok}' not usable here (r0-r7 only)")
        return r

    def _imm(self, tok, line_no):
        tok = tok.strip()
        if not tok.startswith("#"):
            raise AsmError(f"line {line_no}: expected immediate, got '{tok}'")
        return _parse_int(tok[1:])

    def _mem(self, tok, line_no):
        m = re.match(r"^\[\s*(\w+)\s*(?:,\s*#([^\]]+))?\]$", tok.strip())
        if not m:
            raise AsmError(f"line {line_no}: bad memory operand '{tok}'")
        rn = self._reg(m.group(1), line_no)
        imm = _parse_int(m.group(2)) if m.group(2) else 0
        return rn, imm

    def _reglist(self, tok, line_no):
        tok = tok.strip()
        if not (tok.startswith("{") and tok.endswith("}")):
            raise AsmError(f"line {line_no}: bad register list '{tok}'")
        regs, special = [], []
        for part in _split_operands(tok[1:-1]):
            if "-" in part:
                lo, hi = part.split("-", 1)
                a, b = self._reg(lo, line_no), self._reg(hi, line_no)
                regs.extend(range(a, b + 1))
            else:
                r = self._reg(part, line_no)
                (regs if r <= 7 else special).append(r)
        return regs, special

    def _branch_target(self, expr, addr, line_no):
        return self._eval(expr, line_no) - (addr + 4)

    def _encode(self, line_no, mnem, ops, addr, pool_key):
        I = isa
        parts = _split_operands(ops)
        if mnem == "nop":
            return I.Nop().encode()
        if mnem == "sg":
            return I.Sg().encode()
        if mnem == "bkpt":
            return I.Bkpt(self._imm(parts[0], line_no) if parts else 0).encode()
        if mnem == "udf":
            return I.Udf(self._imm(parts[0], line_no) if parts else 0).encode()
        if mnem == "movs":
            return I.MovImm(self._reg(parts[0], line_no, low=True),
                            self._imm(parts[1], line_no)).encode()
        if mnem == "mov":
            return I.MovReg(self._reg(parts[0], line_no),
                            self._reg(parts[1], line_no)).encode()
        if mnem == "cmp":
            return I.CmpImm(self._reg(parts[0], line_no, low=True),
                            self._imm(parts[1], line_no)).encode()
        if mnem in ("adds", "subs"):
            cls = I.AddImm if mnem == "adds" else I.SubImm
            if len(parts) == 2:
                return cls(self._reg(parts[0], line_no, low=True), None,
                           self._imm(parts[1], line_no)).encode()
            if len(parts) == 3 and parts[2].lstrip().startswith("#"):
                return cls(self._reg(parts[0], line_no, low=True),
                           self._reg(parts[1], line_no, low=True),
                           self._imm(parts[2], line_no)).encode()
            if len(parts) == 3 and mnem == "adds":
                return I.AddReg(self._reg(parts[0], line_no, low=True),
                                self._reg(parts[1], line_no, low=True),
                                self._reg(parts[2], line_no, low=True)).encode()
            raise AsmError(f"line {line_no}: bad {mnem} operands")
        if mnem in ("ldr", "str", "ldrb", "strb"):
            rt = self._reg(parts[0], line_no, low=True)
            if mnem == "ldr" and pool_key is not None:
                lit = self.pool_addr[pool_key]
                imm = lit - ((addr + 4) & ~3)
                if not 0 <= imm <= 1020:
                    raise AsmError(
                        f"line {line_no}: literal pool out of range ({imm})")
                return I.LdrLit(rt, imm).encode()
            rn, imm = self._mem(parts[1], line_no)
            if rn == 15:
                if mnem != "ldr":
                    raise AsmError(f"line {line_no}: pc base only valid for ldr")
                return I.LdrLit(rt, imm).encode()
            if rn > 7:
                raise AsmError(
                    f"line {line_no}: base register must be r0-r7")
            cls = {"ldr": I.LdrImm, "str": I.StrImm,
                   "ldrb": I.LdrbImm, "strb": I.StrbImm}[mnem]
            return cls(rt, rn, imm).encode()
        if mnem == "push":
            regs, special = self._reglist(parts[0], line_no)
            if any(r not in (14,) for r in special):
                raise AsmError(f"line {line_no}: push takes r0-r7 and lr only")
            return I.Push(tuple(regs), lr=14 in special).encode()
        if mnem == "pop":
            regs, special = self._reglist(parts[0], line_no)
            if any(r not in (15,) for r in special):
                raise AsmError(f"line {line_no}: pop takes r0-r7 and pc only")
            return I.Pop(tuple(regs), pc=15 in special).encode()
        if mnem == "bx":
            return I.Bx(self._reg(parts[0], line_no)).encode()
        if mnem == "blx":
            return I.Blx(self._reg(parts[0], line_no)).encode()
        if mnem == "bxns":
            return I.Bxns(self._reg(parts[0], line_no)).encode()
        if mnem == "bl":
            return I.Bl(self._branch_target(parts[0], addr, line_no)).encode()
        if mnem == "b":
            return I.B(self._branch_target(parts[0], addr, line_no)).encode()
        if mnem in _BCC:
            return I.BCond(_BCC[mnem],
                           self._branch_target(parts[0], addr, line_no)).encode()
        raise AsmError(f"line {line_no}: unknown mnemonic '{mnem}'")


def assemble(source: str, base: int, externs: dict | None = None) -> AsmProgram:
    a = _Assembler(source, base, externs).layout()
    return AsmProgram(base=base, data=a.emit(), symbols=a.symbols)
