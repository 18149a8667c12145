"""Deterministic execution core with a two-world security model.

One instruction per cycle, no pipeline, no interrupts. The security
attribution of the fetch address is checked before anything else: the
non-secure world can only enter secure code through an sg instruction at
the start of a gateway (nsc) region, and the secure world can only drop
back through bxns. Faults freeze the machine mid-instruction: whatever
side effects already landed stay visible, the faulting instruction never
retires, and there are no guest-visible fault handlers.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

from . import isa
from .isa import DecodeError, Sg, condition_passes
from .memory import Attr, Kind, MemoryMap

M32 = 0xFFFF_FFFF


class World(enum.Enum):
    SECURE = "secure"
    NONSECURE = "nonsecure"


class FaultKind(enum.Enum):
    USAGE = "usage_fault"
    MEM = "mem_fault"
    SECURE = "secure_fault"
    HARD = "hard_fault"


class RunOutcome(enum.Enum):
    HALT = "halt"
    FAULT = "fault"
    BUDGET = "budget"


class Fault(Exception):
    """Raised inside the core (and by devices) to abort an instruction."""

    def __init__(self, kind: FaultKind, detail: str):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class FaultRecord:
    kind: FaultKind
    detail: str
    pc: int
    world: World
    cycle: int


@dataclass(frozen=True)
class TransitionRecord:
    cycle: int
    src: World
    dst: World
    pc: int
    via: str  # "sg" or "bxns"


@dataclass(frozen=True)
class AccessRecord:
    cycle: int
    world: World
    op: str  # "read" | "write" | "exec"
    addr: int
    size: int
    attr: Attr


@dataclass(frozen=True)
class RunResult:
    outcome: RunOutcome
    cycles: int
    fault: FaultRecord | None = None
    halt_imm: int | None = None


class Uart:
    """Byte-oriented console device: DATA at +0, STATUS at +4 (bit 0 set
    while receive data is pending). Reads of an empty DATA register
    return the idle byte."""

    IDLE = 0x00

    def __init__(self):
        self.rx = deque()
        self.tx = bytearray()

    def feed(self, data: bytes) -> None:
        self.rx.extend(data)

    def take_tx(self) -> bytes:
        out = bytes(self.tx)
        del self.tx[:]
        return out

    def read(self, off: int, size: int) -> int:
        if off == 0:
            return self.rx.popleft() if self.rx else self.IDLE
        if off == 4:
            return 1 if self.rx else 0
        return 0

    def write(self, off: int, size: int, value: int) -> None:
        if off == 0:
            self.tx.append(value & 0xFF)


class Machine:
    def __init__(self, mem: MemoryMap, *, audit: bool = False):
        self.mem = mem
        self.regs = [0] * 13
        self.msp_s = 0
        self.msp_ns = 0
        self.lr = 0
        self.pc = 0
        self.world = World.NONSECURE
        self.flag_n = self.flag_z = self.flag_c = self.flag_v = False
        self.cycle = 0
        self.halted = False
        self.halt_imm = None
        self.fault = None
        self.trace = None
        self.transitions = []
        self.audit = [] if audit else None
        self.cfi_violation = None
        self._dcache = {}
        self._last_region = None
        self._fetch_pc = 0
        self.uart_s = self._attach_uart("uart_s")
        self.uart_ns = self._attach_uart("uart_ns")

    def _attach_uart(self, name):
        try:
            region = self.mem.region(name)
        except KeyError:
            return None
        dev = Uart()
        region.device = dev
        return dev

    # --- register file --------------------------------------------------

    @property
    def sp(self) -> int:
        return self.msp_s if self.world is World.SECURE else self.msp_ns

    @sp.setter
    def sp(self, value: int) -> None:
        if self.world is World.SECURE:
            self.msp_s = value & M32
        else:
            self.msp_ns = value & M32

    def get_reg(self, r: int) -> int:
        if r < 13:
            return self.regs[r]
        if r == 13:
            return self.sp
        if r == 14:
            return self.lr
        raise ValueError("pc is not readable through get_reg")

    def set_reg(self, r: int, value: int) -> None:
        value &= M32
        if r < 13:
            self.regs[r] = value
        elif r == 13:
            self.sp = value
        elif r == 14:
            self.lr = value
        else:
            raise ValueError("pc is not writable through set_reg")

    # --- control --------------------------------------------------------

    def reset(self, entry: int, world: World,
              sp_s: int | None = None, sp_ns: int | None = None) -> None:
        """Warm restart: registers and flags cleared, memory and device
        queues preserved."""
        self.regs = [0] * 13
        self.lr = 0
        self.flag_n = self.flag_z = self.flag_c = self.flag_v = False
        self.world = world
        self.pc = entry & ~1 & M32
        if sp_s is not None:
            self.msp_s = sp_s
        if sp_ns is not None:
            self.msp_ns = sp_ns
        self.halted = False
        self.halt_imm = None
        self.fault = None
        self.cfi_violation = None
        for region in self.mem.regions:
            hook = getattr(region.device, "on_reset", None)
            if hook is not None:
                hook()

    def run(self, max_cycles: int) -> RunResult:
        executed = 0
        step = self._step
        while executed < max_cycles:
            try:
                step()
            except Fault as f:
                self.fault = FaultRecord(f.kind, f.detail, self._fetch_pc,
                                         self.world, self.cycle)
                return RunResult(RunOutcome.FAULT, executed, fault=self.fault)
            executed += 1
            if self.halted:
                return RunResult(RunOutcome.HALT, executed,
                                 halt_imm=self.halt_imm)
        return RunResult(RunOutcome.BUDGET, executed)

    def run_with_restart(self, entry: int, world: World, *, budget: int,
                         max_restarts: int, before_attempt=None,
                         sp_s: int | None = None,
                         sp_ns: int | None = None) -> list:
        """Run up to max_restarts total attempts (at least one), warm
        restarting after every fault or exhausted budget. A halt ends
        the sequence."""
        results = []
        for attempt in range(max(1, max_restarts)):
            self.reset(entry, world, sp_s=sp_s, sp_ns=sp_ns)
            if before_attempt is not None:
                before_attempt(self, attempt)
            res = self.run(max_cycles=budget)
            results.append(res)
            if res.outcome is RunOutcome.HALT:
                break
        return results

    # --- memory ---------------------------------------------------------

    def _region_at(self, addr):
        r = self._last_region
        if r is not None and r.base <= addr < r.end:
            return r
        r = self.mem.region_at(addr)
        if r is not None:
            self._last_region = r
        return r

    def _check_data_attr(self, region, addr):
        if self.world is World.NONSECURE and region.attr is not Attr.NS:
            raise Fault(FaultKind.SECURE,
                        f"secure memory at 0x{addr:08x} is not accessible "
                        f"from the non-secure world")

    def _load(self, addr, nbytes):
        if nbytes == 4 and addr & 3:
            raise Fault(FaultKind.USAGE, f"unaligned word access at 0x{addr:08x}")
        region = self._region_at(addr)
        if region is None or addr + nbytes > region.end:
            raise Fault(FaultKind.MEM, f"load from unmapped 0x{addr:08x}")
        self._check_data_attr(region, addr)
        if not region.r:
            raise Fault(FaultKind.MEM, f"read permission missing at 0x{addr:08x}")
        if region.kind is Kind.MMIO:
            if region.device is None:
                raise Fault(FaultKind.MEM, f"no device behind 0x{addr:08x}")
            value = region.device.read(addr - region.base, nbytes) & M32
        else:
            off = addr - region.base
            value = int.from_bytes(region.data[off:off + nbytes], "little")
        if self.audit is not None:
            self.audit.append(AccessRecord(self.cycle, self.world, "read",
                                           addr, nbytes, region.attr))
        return value

    def _store(self, addr, nbytes, value):
        if nbytes == 4 and addr & 3:
            raise Fault(FaultKind.USAGE, f"unaligned word access at 0x{addr:08x}")
        region = self._region_at(addr)
        if region is None or addr + nbytes > region.end:
            raise Fault(FaultKind.MEM, f"store to unmapped 0x{addr:08x}")
        self._check_data_attr(region, addr)
        if not region.w:
            raise Fault(FaultKind.MEM, f"write permission missing at 0x{addr:08x}")
        if region.kind is Kind.MMIO:
            if region.device is None:
                raise Fault(FaultKind.MEM, f"no device behind 0x{addr:08x}")
            region.device.write(addr - region.base, nbytes, value & M32)
        else:
            off = addr - region.base
            region.data[off:off + nbytes] = (value & M32).to_bytes(4, "little")[:nbytes]
        if self.audit is not None:
            self.audit.append(AccessRecord(self.cycle, self.world, "write",
                                           addr, nbytes, region.attr))

    def _decode_at(self, region, pc):
        data = region.data
        off = pc - region.base
        if data is None or off + 2 > len(data):
            raise DecodeError(f"fetch runs off region at 0x{pc:08x}")
        hw1 = data[off] | data[off + 1] << 8
        if hw1 >= 0xE800:
            if off + 4 > len(data):
                raise DecodeError(f"fetch runs off region at 0x{pc:08x}")
            key = hw1 << 16 | data[off + 2] | data[off + 3] << 8
        else:
            key = hw1
        cached = self._dcache.get(key)
        if cached is None:
            cached = isa.decode(data, off)
            self._dcache[key] = cached
        return cached

    # --- execution ------------------------------------------------------

    def _step(self):
        pc = self.pc
        self._fetch_pc = pc
        region = self._region_at(pc)
        if region is None:
            raise Fault(FaultKind.MEM, f"execute from unmapped 0x{pc:08x}")
        world = self.world
        attr = region.attr
        sg_entry = False
        if world is World.NONSECURE:
            if attr is not Attr.NS:
                if attr is Attr.NSC:
                    try:
                        instr, size = self._decode_at(region, pc)
                    except DecodeError:
                        instr = None
                    if type(instr) is not Sg:
                        raise Fault(
                            FaultKind.SECURE,
                            f"gateway region entered without sg at 0x{pc:08x}")
                    sg_entry = True
                else:
                    raise Fault(
                        FaultKind.SECURE,
                        f"secure code at 0x{pc:08x} is not reachable from "
                        f"the non-secure world")
        elif attr is Attr.NS:
            raise Fault(
                FaultKind.SECURE,
                f"secure world cannot execute non-secure code at 0x{pc:08x} "
                f"(gateway return required)")
        if not sg_entry:
            if not region.x:
                raise Fault(FaultKind.MEM, f"exec permission missing at 0x{pc:08x}")
            try:
                instr, size = self._decode_at(region, pc)
            except DecodeError as exc:
                raise Fault(FaultKind.USAGE, f"undefined instruction: {exc}") \
                    from None
        if self.audit is not None:
            self.audit.append(AccessRecord(self.cycle, world, "exec", pc,
                                           size, attr))
        if self.trace is not None:
            self.trace.append(
                f"{self.cycle},{pc:08x},{world.value},{instr.text()}")
        if sg_entry:
            self.world = World.SECURE
            self.transitions.append(TransitionRecord(
                self.cycle, world, World.SECURE, pc, "sg"))
            self.pc = pc + size
        else:
            self._DISPATCH[type(instr)](self, instr, pc)
        self.cycle += 1

    # flag helpers

    def _adds(self, a, b):
        total = a + b
        r = total & M32
        self.flag_n = r >= 0x8000_0000
        self.flag_z = r == 0
        self.flag_c = total > M32
        self.flag_v = bool((~(a ^ b) & (a ^ r)) & 0x8000_0000)
        return r

    def _subs(self, a, b):
        r = (a - b) & M32
        self.flag_n = r >= 0x8000_0000
        self.flag_z = r == 0
        self.flag_c = a >= b
        self.flag_v = bool(((a ^ b) & (a ^ r)) & 0x8000_0000)
        return r

    def _reg_read(self, r):
        if r < 13:
            return self.regs[r]
        if r == 13:
            return self.sp
        return self.lr

    def _reg_write(self, r, value):
        value &= M32
        if r < 13:
            self.regs[r] = value
        elif r == 13:
            self.sp = value
        else:
            self.lr = value

    # instruction handlers

    def _op_mov_imm(self, i, pc):
        v = i.imm
        self.regs[i.rd] = v
        self.flag_n = False
        self.flag_z = v == 0
        self.pc = pc + 2

    def _op_cmp_imm(self, i, pc):
        self._subs(self.regs[i.rn], i.imm)
        self.pc = pc + 2

    def _op_add_imm(self, i, pc):
        src = self.regs[i.rd if i.rn is None else i.rn]
        self.regs[i.rd] = self._adds(src, i.imm)
        self.pc = pc + 2

    def _op_sub_imm(self, i, pc):
        src = self.regs[i.rd if i.rn is None else i.rn]
        self.regs[i.rd] = self._subs(src, i.imm)
        self.pc = pc + 2

    def _op_add_reg(self, i, pc):
        self.regs[i.rd] = self._adds(self.regs[i.rn], self.regs[i.rm])
        self.pc = pc + 2

    def _op_mov_reg(self, i, pc):
        v = pc + 4 if i.rm == 15 else self._reg_read(i.rm)
        if i.rd == 15:
            self.pc = v & ~1 & M32
            return
        self._reg_write(i.rd, v)
        self.pc = pc + 2

    def _op_ldr(self, i, pc):
        self.regs[i.rt] = self._load((self.regs[i.rn] + i.imm) & M32, 4)
        self.pc = pc + 2

    def _op_str(self, i, pc):
        self._store((self.regs[i.rn] + i.imm) & M32, 4, self.regs[i.rt])
        self.pc = pc + 2

    def _op_ldrb(self, i, pc):
        self.regs[i.rt] = self._load((self.regs[i.rn] + i.imm) & M32, 1)
        self.pc = pc + 2

    def _op_strb(self, i, pc):
        self._store((self.regs[i.rn] + i.imm) & M32, 1, self.regs[i.rt] & 0xFF)
        self.pc = pc + 2

    def _op_ldr_lit(self, i, pc):
        self.regs[i.rt] = self._load(((pc + 4) & ~3) + i.imm, 4)
        self.pc = pc + 2

    def _op_push(self, i, pc):
        sp = self.sp
        if sp & 3:
            raise Fault(FaultKind.USAGE, f"sp misaligned for push (0x{sp:08x})")
        values = [self.regs[r] for r in i.regs]
        if i.lr:
            values.append(self.lr)
        base = (sp - 4 * len(values)) & M32
        addr = base
        for v in values:
            self._store(addr, 4, v)
            addr += 4
        self.sp = base
        self.pc = pc + 2

    def _op_pop(self, i, pc):
        sp = self.sp
        if sp & 3:
            raise Fault(FaultKind.USAGE, f"sp misaligned for pop (0x{sp:08x})")
        count = len(i.regs) + (1 if i.pc else 0)
        values = [self._load((sp + 4 * k) & M32, 4) for k in range(count)]
        if i.pc:
            target = values[-1]
            if not target & 1:
                raise Fault(FaultKind.USAGE,
                            f"interworking bit clear on pop target 0x{target:08x}")
        for r, v in zip(i.regs, values):
            self.regs[r] = v
        self.sp = sp + 4 * count
        self.pc = (target & ~1 & M32) if i.pc else pc + 2

    def _op_bcond(self, i, pc):
        if condition_passes(i.cond, self.flag_n, self.flag_z,
                            self.flag_c, self.flag_v):
            self.pc = (pc + 4 + i.offset) & M32
        else:
            self.pc = pc + 2

    def _op_b(self, i, pc):
        self.pc = (pc + 4 + i.offset) & M32

    def _op_bl(self, i, pc):
        self.lr = (pc + 4) | 1
        self.pc = (pc + 4 + i.offset) & M32

    def _op_bx(self, i, pc):
        v = self._reg_read(i.rm)
        if not v & 1:
            raise Fault(FaultKind.USAGE,
                        f"interworking bit clear on bx target 0x{v:08x}")
        self.pc = v & ~1 & M32

    def _op_blx(self, i, pc):
        v = self._reg_read(i.rm)
        if not v & 1:
            raise Fault(FaultKind.USAGE,
                        f"interworking bit clear on blx target 0x{v:08x}")
        self.lr = (pc + 2) | 1
        self.pc = v & ~1 & M32

    def _op_bxns(self, i, pc):
        if self.world is not World.SECURE:
            raise Fault(FaultKind.USAGE, "bxns outside the secure world")
        v = self._reg_read(i.rm)
        if not v & 1:
            raise Fault(FaultKind.USAGE,
                        f"interworking bit clear on bxns target 0x{v:08x}")
        target = v & ~1 & M32
        dest = self._region_at(target)
        if dest is not None and dest.attr is Attr.NS:
            self.world = World.NONSECURE
            self.transitions.append(TransitionRecord(
                self.cycle, World.SECURE, World.NONSECURE, pc, "bxns"))
        self.pc = target

    def _op_sg(self, i, pc):
        # reached with the world already matching the region (gateway
        # entry from the other world is handled at fetch): plain no-op
        self.pc = pc + 4

    def _op_nop(self, i, pc):
        self.pc = pc + 2

    def _op_bkpt(self, i, pc):
        self.halted = True
        self.halt_imm = i.imm
        self.pc = pc + 2

    def _op_udf(self, i, pc):
        raise Fault(FaultKind.USAGE, f"undefined instruction (udf #{i.imm})")

    _DISPATCH = {
        isa.MovImm: _op_mov_imm,
        isa.CmpImm: _op_cmp_imm,
        isa.AddImm: _op_add_imm,
        isa.SubImm: _op_sub_imm,
        isa.AddReg: _op_add_reg,
        isa.MovReg: _op_mov_reg,
        isa.LdrImm: _op_ldr,
        isa.StrImm: _op_str,
        isa.LdrbImm: _op_ldrb,
        isa.StrbImm: _op_strb,
        isa.LdrLit: _op_ldr_lit,
        isa.Push: _op_push,
        isa.Pop: _op_pop,
        isa.BCond: _op_bcond,
        isa.B: _op_b,
        isa.Bl: _op_bl,
        isa.Bx: _op_bx,
        isa.Blx: _op_blx,
        isa.Bxns: _op_bxns,
        isa.Sg: _op_sg,
        isa.Nop: _op_nop,
        isa.Bkpt: _op_bkpt,
        isa.Udf: _op_udf,
    }
