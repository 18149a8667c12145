"""Instruction model for the Thumb subset the simulator executes.

16-bit core instructions plus three 32-bit forms (BL and the secure
gateway marker). Decode is total over byte strings: anything outside the
subset raises DecodeError, which linear-sweep callers treat as a 2-byte
step. Encodings are little-endian halfwords, as stored in flash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

SP = 13
LR = 14
PC = 15

_REG_NAMES = tuple(f"r{i}" for i in range(13)) + ("sp", "lr", "pc")

COND_NAMES = (
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
    "hi", "ls", "ge", "lt", "gt", "le",
)


class DecodeError(ValueError):
    """Bytes do not encode an instruction in the supported subset."""


def _hw(value: int) -> bytes:
    return struct.pack("<H", value)


def _chk(ok: bool, msg: str) -> None:
    if not ok:
        raise ValueError(msg)


def condition_passes(cond: int, n: bool, z: bool, c: bool, v: bool) -> bool:
    if cond == 0:
        return z
    if cond == 1:
        return not z
    if cond == 2:
        return c
    if cond == 3:
        return not c
    if cond == 4:
        return n
    if cond == 5:
        return not n
    if cond == 6:
        return v
    if cond == 7:
        return not v
    if cond == 8:
        return c and not z
    if cond == 9:
        return (not c) or z
    if cond == 10:
        return n == v
    if cond == 11:
        return n != v
    if cond == 12:
        return (not z) and n == v
    if cond == 13:
        return z or n != v
    raise ValueError(f"condition {cond} out of range")


@dataclass(frozen=True)
class Instruction:
    def encode(self) -> bytes:
        raise NotImplementedError

    def text(self) -> str:
        raise NotImplementedError

    @property
    def size(self) -> int:
        return len(self.encode())


@dataclass(frozen=True)
class MovImm(Instruction):
    """MOVS rd, #imm8. Sets N and Z."""

    rd: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rd <= 7, "movs: rd must be r0-r7")
        _chk(0 <= self.imm <= 255, "movs: imm out of range")

    def encode(self):
        return _hw(0x2000 | self.rd << 8 | self.imm)

    def text(self):
        return f"movs r{self.rd}, #{self.imm}"


@dataclass(frozen=True)
class CmpImm(Instruction):
    rn: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rn <= 7, "cmp: rn must be r0-r7")
        _chk(0 <= self.imm <= 255, "cmp: imm out of range")

    def encode(self):
        return _hw(0x2800 | self.rn << 8 | self.imm)

    def text(self):
        return f"cmp r{self.rn}, #{self.imm}"


@dataclass(frozen=True)
class AddImm(Instruction):
    """ADDS. rn None selects the 8-bit accumulate form (rd += imm)."""

    rd: int
    rn: int | None
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rd <= 7, "adds: rd must be r0-r7")
        if self.rn is None:
            _chk(0 <= self.imm <= 255, "adds: imm8 out of range")
        else:
            _chk(0 <= self.rn <= 7, "adds: rn must be r0-r7")
            _chk(0 <= self.imm <= 7, "adds: imm3 out of range")

    def encode(self):
        if self.rn is None:
            return _hw(0x3000 | self.rd << 8 | self.imm)
        return _hw(0x1C00 | self.imm << 6 | self.rn << 3 | self.rd)

    def text(self):
        if self.rn is None:
            return f"adds r{self.rd}, #{self.imm}"
        return f"adds r{self.rd}, r{self.rn}, #{self.imm}"


@dataclass(frozen=True)
class SubImm(Instruction):
    """SUBS. rn None selects the 8-bit form (rd -= imm)."""

    rd: int
    rn: int | None
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rd <= 7, "subs: rd must be r0-r7")
        if self.rn is None:
            _chk(0 <= self.imm <= 255, "subs: imm8 out of range")
        else:
            _chk(0 <= self.rn <= 7, "subs: rn must be r0-r7")
            _chk(0 <= self.imm <= 7, "subs: imm3 out of range")

    def encode(self):
        if self.rn is None:
            return _hw(0x3800 | self.rd << 8 | self.imm)
        return _hw(0x1E00 | self.imm << 6 | self.rn << 3 | self.rd)

    def text(self):
        if self.rn is None:
            return f"subs r{self.rd}, #{self.imm}"
        return f"subs r{self.rd}, r{self.rn}, #{self.imm}"


@dataclass(frozen=True)
class AddReg(Instruction):
    rd: int
    rn: int
    rm: int

    def __post_init__(self):
        _chk(all(0 <= r <= 7 for r in (self.rd, self.rn, self.rm)),
             "adds: registers must be r0-r7")

    def encode(self):
        return _hw(0x1800 | self.rm << 6 | self.rn << 3 | self.rd)

    def text(self):
        return f"adds r{self.rd}, r{self.rn}, r{self.rm}"


@dataclass(frozen=True)
class MovReg(Instruction):
    """Hi-register MOV: any of r0-r12, sp, lr, pc on either side. No flags."""

    rd: int
    rm: int

    def __post_init__(self):
        _chk(0 <= self.rd <= 15, "mov: rd out of range")
        _chk(0 <= self.rm <= 15, "mov: rm out of range")

    def encode(self):
        return _hw(0x4600 | (self.rd & 8) << 4 | self.rm << 3 | (self.rd & 7))

    def text(self):
        return f"mov {_REG_NAMES[self.rd]}, {_REG_NAMES[self.rm]}"


def _check_word_off(imm, limit, what):
    _chk(imm % 4 == 0, f"{what}: offset must be a multiple of 4")
    _chk(0 <= imm <= limit, f"{what}: offset out of range")


@dataclass(frozen=True)
class LdrImm(Instruction):
    rt: int
    rn: int
    imm: int  # byte offset, word aligned

    def __post_init__(self):
        _chk(0 <= self.rt <= 7 and 0 <= self.rn <= 7, "ldr: registers must be r0-r7")
        _check_word_off(self.imm, 124, "ldr")

    def encode(self):
        return _hw(0x6800 | (self.imm >> 2) << 6 | self.rn << 3 | self.rt)

    def text(self):
        if self.imm:
            return f"ldr r{self.rt}, [r{self.rn}, #{self.imm}]"
        return f"ldr r{self.rt}, [r{self.rn}]"


@dataclass(frozen=True)
class StrImm(Instruction):
    rt: int
    rn: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rt <= 7 and 0 <= self.rn <= 7, "str: registers must be r0-r7")
        _check_word_off(self.imm, 124, "str")

    def encode(self):
        return _hw(0x6000 | (self.imm >> 2) << 6 | self.rn << 3 | self.rt)

    def text(self):
        if self.imm:
            return f"str r{self.rt}, [r{self.rn}, #{self.imm}]"
        return f"str r{self.rt}, [r{self.rn}]"


@dataclass(frozen=True)
class LdrbImm(Instruction):
    rt: int
    rn: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rt <= 7 and 0 <= self.rn <= 7, "ldrb: registers must be r0-r7")
        _chk(0 <= self.imm <= 31, "ldrb: offset out of range")

    def encode(self):
        return _hw(0x7800 | self.imm << 6 | self.rn << 3 | self.rt)

    def text(self):
        if self.imm:
            return f"ldrb r{self.rt}, [r{self.rn}, #{self.imm}]"
        return f"ldrb r{self.rt}, [r{self.rn}]"


@dataclass(frozen=True)
class StrbImm(Instruction):
    rt: int
    rn: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rt <= 7 and 0 <= self.rn <= 7, "strb: registers must be r0-r7")
        _chk(0 <= self.imm <= 31, "strb: offset out of range")

    def encode(self):
        return _hw(0x7000 | self.imm << 6 | self.rn << 3 | self.rt)

    def text(self):
        if self.imm:
            return f"strb r{self.rt}, [r{self.rn}, #{self.imm}]"
        return f"strb r{self.rt}, [r{self.rn}]"


@dataclass(frozen=True)
class LdrLit(Instruction):
    """PC-relative word load. Address = align4(pc) + imm, imm in 0..1020."""

    rt: int
    imm: int

    def __post_init__(self):
        _chk(0 <= self.rt <= 7, "ldr: rt must be r0-r7")
        _check_word_off(self.imm, 1020, "ldr literal")

    def encode(self):
        return _hw(0x4800 | self.rt << 8 | self.imm >> 2)

    def text(self):
        return f"ldr r{self.rt}, [pc, #{self.imm}]"


def _norm_regs(regs):
    out = tuple(sorted(set(regs)))
    _chk(all(isinstance(r, int) and 0 <= r <= 7 for r in out),
         "register list entries must be r0-r7")
    return out


@dataclass(frozen=True)
class Push(Instruction):
    """PUSH of low registers, optionally LR. PC can never be pushed."""

    regs: tuple
    lr: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regs", _norm_regs(self.regs))
        object.__setattr__(self, "lr", bool(self.lr))
        _chk(self.regs or self.lr, "push: empty register list")

    def encode(self):
        bits = sum(1 << r for r in self.regs)
        return _hw(0xB400 | (0x100 if self.lr else 0) | bits)

    def text(self):
        names = [f"r{r}" for r in self.regs] + (["lr"] if self.lr else [])
        return "push {" + ", ".join(names) + "}"


@dataclass(frozen=True)
class Pop(Instruction):
    """POP of low registers, optionally PC. LR can never be popped."""

    regs: tuple
    pc: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regs", _norm_regs(self.regs))
        object.__setattr__(self, "pc", bool(self.pc))
        _chk(self.regs or self.pc, "pop: empty register list")

    def encode(self):
        bits = sum(1 << r for r in self.regs)
        return _hw(0xBC00 | (0x100 if self.pc else 0) | bits)

    def text(self):
        names = [f"r{r}" for r in self.regs] + (["pc"] if self.pc else [])
        return "pop {" + ", ".join(names) + "}"


def _check_branch_off(off, lo, hi, what):
    _chk(off % 2 == 0, f"{what}: offset must be even")
    _chk(lo <= off <= hi, f"{what}: offset out of range")


@dataclass(frozen=True)
class BCond(Instruction):
    """Conditional branch; offset is relative to pc+4."""

    cond: int
    offset: int

    def __post_init__(self):
        _chk(0 <= self.cond <= 13, "b<cond>: condition out of range")
        _check_branch_off(self.offset, -256, 254, "b<cond>")

    def encode(self):
        return _hw(0xD000 | self.cond << 8 | (self.offset >> 1) & 0xFF)

    def text(self):
        return f"b{COND_NAMES[self.cond]} {self.offset:+#x}"


@dataclass(frozen=True)
class B(Instruction):
    offset: int

    def __post_init__(self):
        _check_branch_off(self.offset, -2048, 2046, "b")

    def encode(self):
        return _hw(0xE000 | (self.offset >> 1) & 0x7FF)

    def text(self):
        return f"b {self.offset:+#x}"


@dataclass(frozen=True)
class Bl(Instruction):
    """32-bit branch with link; offset relative to pc+4."""

    offset: int

    def __post_init__(self):
        _check_branch_off(self.offset, -(1 << 24), (1 << 24) - 2, "bl")

    def encode(self):
        off = self.offset & 0x1FF_FFFF
        s = off >> 24
        j1 = ((off >> 23) & 1) ^ s ^ 1
        j2 = ((off >> 22) & 1) ^ s ^ 1
        hw1 = 0xF000 | s << 10 | (off >> 12) & 0x3FF
        hw2 = 0xD000 | j1 << 13 | j2 << 11 | (off >> 1) & 0x7FF
        return _hw(hw1) + _hw(hw2)

    def text(self):
        return f"bl {self.offset:+#x}"


def _reg_operand(rm, what):
    _chk(0 <= rm <= 14, f"{what}: rm must be r0-r12, sp or lr")


@dataclass(frozen=True)
class Bx(Instruction):
    rm: int

    def __post_init__(self):
        _reg_operand(self.rm, "bx")

    def encode(self):
        return _hw(0x4700 | self.rm << 3)

    def text(self):
        return f"bx {_REG_NAMES[self.rm]}"


@dataclass(frozen=True)
class Blx(Instruction):
    rm: int

    def __post_init__(self):
        _reg_operand(self.rm, "blx")

    def encode(self):
        return _hw(0x4780 | self.rm << 3)

    def text(self):
        return f"blx {_REG_NAMES[self.rm]}"


@dataclass(frozen=True)
class Bxns(Instruction):
    """Gateway return branch: drops to the non-secure world when the
    target is non-secure."""

    rm: int

    def __post_init__(self):
        _reg_operand(self.rm, "bxns")

    def encode(self):
        return _hw(0x4704 | self.rm << 3)

    def text(self):
        return f"bxns {_REG_NAMES[self.rm]}"


@dataclass(frozen=True)
class Sg(Instruction):
    """Secure gateway marker: the only legal non-secure entry into
    callable secure code."""

    def encode(self):
        return _hw(0xE97F) * 2

    def text(self):
        return "sg"


@dataclass(frozen=True)
class Nop(Instruction):
    def encode(self):
        return _hw(0xBF00)

    def text(self):
        return "nop"


@dataclass(frozen=True)
class Bkpt(Instruction):
    """Deterministic halt; retires like a normal instruction."""

    imm: int = 0

    def __post_init__(self):
        _chk(0 <= self.imm <= 255, "bkpt: imm out of range")

    def encode(self):
        return _hw(0xBE00 | self.imm)

    def text(self):
        return f"bkpt #{self.imm}"


@dataclass(frozen=True)
class Udf(Instruction):
    """Permanently undefined: raises a usage fault when executed."""

    imm: int = 0

    def __post_init__(self):
        _chk(0 <= self.imm <= 255, "udf: imm out of range")

    def encode(self):
        return _hw(0xDE00 | self.imm)

    def text(self):
        return f"udf #{self.imm}"


def encode(instr: Instruction) -> bytes:
    return instr.encode()


def decode(data, offset: int = 0) -> tuple[Instruction, int]:
    """Decode one instruction at offset. Returns (instruction, size)."""
    if offset + 2 > len(data):
        raise DecodeError("truncated instruction")
    hw = data[offset] | data[offset + 1] << 8
    if hw >= 0xE800:
        if offset + 4 > len(data):
            raise DecodeError(f"truncated 32-bit encoding 0x{hw:04x}")
        hw2 = data[offset + 2] | data[offset + 3] << 8
        return _decode32(hw, hw2), 4
    return _decode16(hw), 2


def _decode16(hw: int) -> Instruction:
    if hw < 0x1800:
        raise DecodeError(f"shift encodings unsupported: 0x{hw:04x}")
    if hw < 0x1A00:
        return AddReg(hw & 7, (hw >> 3) & 7, (hw >> 6) & 7)
    if hw < 0x1C00:
        raise DecodeError(f"subs register unsupported: 0x{hw:04x}")
    if hw < 0x1E00:
        return AddImm(hw & 7, (hw >> 3) & 7, (hw >> 6) & 7)
    if hw < 0x2000:
        return SubImm(hw & 7, (hw >> 3) & 7, (hw >> 6) & 7)
    if hw < 0x2800:
        return MovImm((hw >> 8) & 7, hw & 0xFF)
    if hw < 0x3000:
        return CmpImm((hw >> 8) & 7, hw & 0xFF)
    if hw < 0x3800:
        return AddImm((hw >> 8) & 7, None, hw & 0xFF)
    if hw < 0x4000:
        return SubImm((hw >> 8) & 7, None, hw & 0xFF)
    if hw < 0x4600:
        raise DecodeError(f"ALU/hi-register group unsupported: 0x{hw:04x}")
    if hw < 0x4700:
        return MovReg((hw >> 4) & 8 | hw & 7, (hw >> 3) & 0xF)
    if hw < 0x4800:
        rm = (hw >> 3) & 0xF
        if rm == 15:
            raise DecodeError("pc is not a valid register-branch operand")
        link, low = hw & 0x80, hw & 7
        if not link and low == 0:
            return Bx(rm)
        if not link and low == 4:
            return Bxns(rm)
        if link and low == 0:
            return Blx(rm)
        if link and low == 4:
            raise DecodeError("blxns unsupported")
        raise DecodeError(f"malformed register branch: 0x{hw:04x}")
    if hw < 0x5000:
        return LdrLit((hw >> 8) & 7, (hw & 0xFF) * 4)
    if hw < 0x6000:
        raise DecodeError(f"register-offset load/store unsupported: 0x{hw:04x}")
    if hw < 0x6800:
        return StrImm(hw & 7, (hw >> 3) & 7, ((hw >> 6) & 0x1F) * 4)
    if hw < 0x7000:
        return LdrImm(hw & 7, (hw >> 3) & 7, ((hw >> 6) & 0x1F) * 4)
    if hw < 0x7800:
        return StrbImm(hw & 7, (hw >> 3) & 7, (hw >> 6) & 0x1F)
    if hw < 0x8000:
        return LdrbImm(hw & 7, (hw >> 3) & 7, (hw >> 6) & 0x1F)
    if hw < 0xB400:
        raise DecodeError(f"unsupported encoding: 0x{hw:04x}")
    if hw < 0xB600:
        if not hw & 0x1FF:
            raise DecodeError("push with empty register list")
        return Push(tuple(r for r in range(8) if hw & 1 << r), bool(hw & 0x100))
    if hw < 0xBC00:
        raise DecodeError(f"unsupported encoding: 0x{hw:04x}")
    if hw < 0xBE00:
        if not hw & 0x1FF:
            raise DecodeError("pop with empty register list")
        return Pop(tuple(r for r in range(8) if hw & 1 << r), bool(hw & 0x100))
    if hw < 0xBF00:
        return Bkpt(hw & 0xFF)
    if hw < 0xC000:
        if hw == 0xBF00:
            return Nop()
        raise DecodeError(f"hint encodings unsupported: 0x{hw:04x}")
    if hw < 0xD000:
        raise DecodeError(f"multiple load/store unsupported: 0x{hw:04x}")
    if hw < 0xE000:
        cond = (hw >> 8) & 0xF
        if cond == 15:
            raise DecodeError("svc unsupported")
        imm8 = hw & 0xFF
        if cond == 14:
            return Udf(imm8)
        off = imm8 - 256 if imm8 >= 128 else imm8
        return BCond(cond, off * 2)
    # 0xE000..0xE7FF
    imm11 = hw & 0x7FF
    off = imm11 - 2048 if imm11 >= 1024 else imm11
    return B(off * 2)


def _decode32(hw1: int, hw2: int) -> Instruction:
    if hw1 == 0xE97F and hw2 == 0xE97F:
        return Sg()
    if 0xF000 <= hw1 <= 0xF7FF and (hw2 & 0xD000) == 0xD000:
        s = (hw1 >> 10) & 1
        j1 = (hw2 >> 13) & 1
        j2 = (hw2 >> 11) & 1
        i1 = (j1 ^ s) ^ 1
        i2 = (j2 ^ s) ^ 1
        val = s << 24 | i1 << 23 | i2 << 22 | (hw1 & 0x3FF) << 12 | (hw2 & 0x7FF) << 1
        if s:
            val -= 1 << 25
        return Bl(val)
    raise DecodeError(f"unsupported 32-bit encoding 0x{hw1:04x} 0x{hw2:04x}")


def null_byte_positions(data) -> list:
    """Offsets of every 0x00 byte, ascending.

    A zero byte is the strcpy terminator, so string-delivered payloads
    must scan clean with this before they can cross a copy sink intact.
    """
    return [i for i, b in enumerate(bytes(data)) if b == 0]


@dataclass(frozen=True)
class Substitution:
    """Null-free replacement for one instruction.

    Usually a single instruction; a two-op sequence where no single
    encoding works. clobbers_flags marks sequences whose C/V results
    differ from the original (N and Z are always preserved).
    """

    instructions: tuple
    clobbers_flags: bool


def substitute_null_free(instr: Instruction) -> Substitution | None:
    """Map an instruction to an equivalent with no 0x00 bytes.

    Identity for encodings that are already clean; None when the
    encoding contains a null and no equivalent exists in the subset
    (loads, stores, branches with zero offset bytes, and so on).
    """
    enc = instr.encode()
    if 0 not in enc:
        return Substitution((instr,), False)
    if isinstance(instr, Nop):
        # the classic trick: an add of zero is architecturally a move
        # onto itself, encoded 12 1c with no nulls; it does set flags
        return Substitution((AddImm(2, 2, 0),), True)
    if isinstance(instr, MovImm) and instr.imm == 0:
        return Substitution(
            (MovImm(instr.rd, 1), SubImm(instr.rd, None, 1)), True
        )
    if isinstance(instr, AddImm) and instr.rn is None and instr.imm == 0 \
            and instr.rd != 0:
        return Substitution((AddImm(instr.rd, instr.rd, 0),), False)
    if isinstance(instr, SubImm) and instr.rn is None and instr.imm == 0 \
            and instr.rd != 0:
        return Substitution((SubImm(instr.rd, instr.rd, 0),), False)
    if isinstance(instr, Bkpt) and instr.imm == 0:
        return Substitution((Bkpt(1),), False)
    if isinstance(instr, Udf) and instr.imm == 0:
        return Substitution((Udf(1),), False)
    return None
