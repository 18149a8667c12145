"""Victim firmware images and the harness that drives them.

One shared application source carries every demo target; a profile picks
which entry point the secure boot stub hands control to. The flash-level
layout is fixed so exploit payloads can be written against stable
addresses:

=========  ===========  ================================================
program    base         contents
=========  ===========  ================================================
s_flash    0x0000_0000  boot stub, secure library, gateway service bodies
nsc        0x0000_7E00  gateway veneers, 32-byte slots
app        0x0000_8000  non-secure library (print_string first) + targets
blob       0x0000_9000  parked second stage used by the heap demo
gadgets    0x0000_A000  code-reuse island (three gadgets, 0x100 apart)
policy     0x0000_F000  reserved window for monitor configuration
dispatch   0x2000_2000  input pump (executable SRAM)
ns_data    0x2000_2800  non-secure statics, heap at 0x2000_3000
s_data     0x2000_0400  secure statics and the boot target pointer
=========  ===========  ================================================

The non-secure SRAM is split into a small executable window for the
dispatcher and a data window holding statics, heap and stack; turning
the data window's execute permission off is the "NX" defense.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import runtime
from .asm import AsmProgram, assemble
from .machine import Machine, RunResult, World
from .memory import MemoryMap, map_from_manifest

S_FLASH_BASE = 0x0
NSC_BASE = 0x7E00
APP_BASE = 0x8000
BLOB_BASE = 0x9000
GADGETS_BASE = 0xA000
POLICY_BASE = 0xF000
DISPATCH_BASE = 0x2000_2000
NS_DATA_BASE = 0x2000_2800
S_DATA_BASE = 0x2000_0400
HEAP_BASE = 0x2000_3000
HEAP_LIMIT = 0x2000_3800
SP_S_TOP = 0x2000_2000
SP_NS_TOP = 0x2000_4000
UART_S_BASE = 0x4000_0000
UART_NS_BASE = 0x4000_0400
CFI_MMIO_BASE = 0x4000_0800

DEFAULT_BUFFER_LEN = 256
MAX_BUFFER_LEN = 500
HOST_STOP_IMM = 127

# gateway bank layout is part of the ABI: callers and the control-flow
# instrumentation hold these addresses as constants
NSC_SLOTS = {
    "nsc_puts": 0x7E00,
    "nsc_func": 0x7E20,
    "nsc_secure_console_puts": 0x7E40,
    "__cfi_push_veneer": 0x7E60,
    "__cfi_ret_veneer": 0x7E80,
    "__cfi_site_veneer": 0x7EA0,
    "__cfi_ind_veneer": 0x7EC0,
}

FMT_FRAME = {  # printf entry stack pointer per format-leak flavour
    "nsw": 0x2000_3FEC,
    "swx": 0x2000_1FEC,
    "nsc": 0x2000_1FCC,
}

FMT_SECRETS = (0x1337C0DE, 0xCAFEBABE, 0x8BADF00D, 0xDEADC0DE)
CONSOLE_SECRETS = (0x5EC7E7A1, 0x5EC7E7A2, 0x5EC7E7A3, 0x5EC7E7A4)

_VALID_WORLDS = {
    "bof": ("nsw",),
    "rop": ("nsw",),
    "heap": ("nsw",),
    "fmt": ("nsw", "swx"),
    "nsc_func": ("nsc",),
    "nsc_puts": ("nsc",),
}


class ProfileError(Exception):
    pass


def victim_manifest(*, stack_executable: bool = True) -> dict:
    data_perms = "rwx" if stack_executable else "rw"
    return {
        "regions": [
            {"name": "s_flash", "base": "0x0", "size": "0x7E00",
             "attr": "secure", "perms": "rx", "kind": "flash"},
            {"name": "nsc_flash", "base": "0x7E00", "size": "0x200",
             "attr": "nsc", "perms": "rx", "kind": "flash"},
            {"name": "ns_flash", "base": "0x8000", "size": "0x8000",
             "attr": "nonsecure", "perms": "rx", "kind": "flash"},
            {"name": "s_sram", "base": "0x20000000", "size": "0x2000",
             "attr": "secure", "perms": "rw", "kind": "sram"},
            {"name": "ns_sram_code", "base": "0x20002000", "size": "0x800",
             "attr": "nonsecure", "perms": "rx", "kind": "sram"},
            {"name": "ns_sram_data", "base": "0x20002800", "size": "0x1800",
             "attr": "nonsecure", "perms": data_perms, "kind": "sram"},
            {"name": "uart_s", "base": "0x40000000", "size": "0x400",
             "attr": "secure", "perms": "rw", "kind": "mmio"},
            {"name": "uart_ns", "base": "0x40000400", "size": "0x400",
             "attr": "nonsecure", "perms": "rw", "kind": "mmio"},
        ]
    }


# --- program sources ----------------------------------------------------

def _chain(op: str, reg: str, amount: int) -> str:
    # immediate adds/subs carry at most 255 per instruction
    lines = []
    while amount > 255:
        lines.append(f"    {op} {reg}, #255")
        amount -= 255
    if amount:
        lines.append(f"    {op} {reg}, #{amount}")
    return "\n".join(lines) + "\n"


def _app_victims(buffer_len: int) -> str:
    head = """
; === demo targets =====================================================

; Copies the caller's line into a stack buffer with no length check.
; The buffer sits below five saved registers, so a long enough line
; reaches the saved return address.
vuln_inject: ;@fn
    push {r4, r5, r6, r7, lr}
    mov r4, r0
    mov r5, sp
"""
    mid = """    mov sp, r5
    mov r0, r5
    mov r1, r4
    bl strcpy
    mov r5, sp
"""
    tail = """    mov sp, r5
    pop {r4, r5, r6, r7, pc}
    .pool

; Reads a length-prefixed blob into a 56 byte stack buffer; the
; declared length is attacker controlled and never validated.
vuln_rop: ;@fn
    push {r4, r5, r6, r7, lr}
    mov r4, sp
    subs r4, #56
    mov sp, r4
    mov r0, r4
    bl read_blob
    mov r4, sp
    adds r4, #56
    mov sp, r4
    pop {r4, r5, r6, r7, pc}

rop_main:
    mov r4, sp
    subs r4, #32
    mov sp, r4
rop_again:
    bl vuln_rop
    b rop_again

benign_hello: ;@fn
    push {r4, lr}
    ldr r0, =msg_hello
    bl print_string
    pop {r4, pc}
    .pool

; Two 16 byte allocations; the first receives an unbounded string
; copy, the second holds a function pointer called right after.
heap_fnptr_main:
    movs r0, #16
    bl malloc
    mov r6, r0
    movs r0, #16
    bl malloc
    mov r7, r0
    ldr r4, =benign_hello|1
    str r4, [r7]
    ldr r0, =line_buf
    movs r1, #160
    adds r1, r1, r1
    bl read_line
    mov r0, r6
    ldr r1, =line_buf
    bl strcpy
    ldr r4, [r7]
    blx r4 ;@targets: benign_hello
    bkpt #3
    .pool

; Same two allocations; the blob overruns the first chunk into the
; second one's header and link words before that chunk is freed.
heap_unlink_main:
    movs r0, #16
    bl malloc
    mov r6, r0
    movs r0, #16
    bl malloc
    mov r7, r0
    mov r0, r6
    bl read_blob
    mov r0, r6
    bl free
    bkpt #8
    .pool

fmt_victim: ;@fn
    push {r4, r5, r6, r7, lr}
    bl printf
    pop {r4, r5, r6, r7, pc}

; r4-r7 hold session values a careless log call can spill
fmt_main:
    ldr r4, =0x1337c0de
    ldr r5, =0xcafebabe
    ldr r6, =0x8badf00d
    ldr r7, =0xdeadc0de
    ldr r0, =line_buf
    movs r1, #160
    adds r1, r1, r1
    bl read_line
    ldr r0, =line_buf
    bl fmt_victim
    bkpt #5
    .pool

host_stop:
    bkpt #127

    .align 2
msg_hello:
    .asciz "hi from the benign callee\\n"
rop_msg:
    .asciz "ROP-CHAIN-OK"
    .align 2
"""
    return (head + _chain("subs", "r5", buffer_len) + mid
            + _chain("adds", "r5", buffer_len) + tail)


def app_source(buffer_len: int = DEFAULT_BUFFER_LEN) -> str:
    """Full non-secure application: library first, then the targets."""
    lib = runtime.instantiate(runtime.library_source(include_heap=True), "")
    return lib + _app_victims(buffer_len)


_BLOB_SOURCE = """
; parked second stage: prints its banner on the console and stops
blob_entry:
    ldr r2, =0x40000400
    ldr r0, =blob_msg
blob_loop:
    ldrb r1, [r0]
    cmp r1, #0
    beq blob_done
    str r1, [r2]
    adds r0, #1
    b blob_loop
blob_done:
    bkpt #4
    .align 2
blob_msg:
    .asciz "HEAP-PWN"
    .pool
"""

_GADGETS_SOURCE = """
; hand built code-reuse island, never called by the application
_g_pop3:
    pop {r4, r5, pc}
    .space 254

_g_movr0:
    mov r0, r5
    pop {r4, pc}
    .space 252

_g_printer:
    ldr r2, =0x40000400
_g_ploop:
    ldrb r1, [r0]
    cmp r1, #0
    beq _g_pdone
    str r1, [r2]
    adds r0, #1
    b _g_ploop
_g_pdone:
    bkpt #2
_g_dead:
    pop {pc}
    .pool
"""

_DISPATCH_SOURCE = """
; input pump: forwards each console line to the installed handler.
; Lives in the executable SRAM window, so its return addresses carry a
; 0x20 top byte.
dispatch_loop:
    ldr r0, =line_buf
    movs r1, #160
    adds r1, r1, r1
    ldr r4, =read_line|1
    blx r4
    ldr r0, =line_buf
    ldr r4, =vuln_inject|1
    blx r4
    b dispatch_loop
    .pool
"""

_SFLASH_HEAD = """
; secure boot stub: jumps through the configured entry pointer
_boot:
    ldr r0, =boot_target
    ldr r0, [r0]
    bxns r0
    .pool

sec_host_stop:
    bkpt #127
"""

_SFLASH_TAIL = """
; --- secure-console format demo ---------------------------------------

sec_fmt_victim:
    push {r4, r5, r6, r7, lr}
    bl sec_printf
    pop {r4, r5, r6, r7, pc}

sec_fmt_main:
    ldr r4, =0x1337c0de
    ldr r5, =0xcafebabe
    ldr r6, =0x8badf00d
    ldr r7, =0xdeadc0de
    ldr r0, =sec_line_buf
    movs r1, #120
    bl sec_read_line
    ldr r0, =sec_line_buf
    bl sec_fmt_victim
    bkpt #6
    .pool

; --- gateway service bodies -------------------------------------------

; plain string relay onto the secure console
sec_nsc_puts_impl:
    push {r4, lr}
    bl sec_print_string
    pop {r4, pc}

; secure session constants end up in r4-r7 around the log call
sec_console_puts:
    push {r4, r5, r6, r7, lr}
    ldr r4, =0x5ec7e7a1
    ldr r5, =0x5ec7e7a2
    ldr r6, =0x5ec7e7a3
    ldr r7, =0x5ec7e7a4
    bl sec_cp_inner
    pop {r4, r5, r6, r7, pc}
    .pool

sec_cp_inner:
    push {r4, r5, r6, r7, lr}
    bl sec_printf
    pop {r4, r5, r6, r7, pc}

; trusting console: caller text goes straight to the format interpreter
sec_console_impl:
    push {r4, lr}
    bl sec_console_puts
    pop {r4, pc}

; hardened console: pointer must be non-secure and the text is echoed
; verbatim, never interpreted
sec_console_impl_hardened:
    push {r4, lr}
    mov r4, r0
    movs r1, #1
    bl sec_check_ns
    cmp r0, #0
    beq sch_bad
    mov r0, r4
    bl sec_print_string
    movs r0, #0
    pop {r4, pc}
sch_bad:
    movs r0, #0
    subs r0, #1
    pop {r4, pc}

; sums r1 words starting at r0, stores the sum through r2, returns it
sec_nsc_func_body:
    push {r4, r5}
    movs r3, #0
sfb_loop:
    cmp r1, #0
    beq sfb_done
    ldr r4, [r0]
    adds r3, r3, r4
    adds r0, #4
    subs r1, #1
    b sfb_loop
sfb_done:
    str r3, [r2]
    mov r0, r3
    pop {r4, r5}
    bx lr

sec_func_impl:
    push {r4, lr}
    bl sec_nsc_func_body
    pop {r4, pc}

; hardened variant: both pointers must lie entirely outside the secure
; address space or the call is refused untouched
sec_func_impl_hardened:
    push {r4, r5, r6, lr}
    mov r4, r0
    mov r5, r1
    mov r6, r2
    mov r1, r5
    adds r1, r1, r1
    adds r1, r1, r1
    bl sec_check_ns
    cmp r0, #0
    beq sfh_bad
    mov r0, r6
    movs r1, #4
    bl sec_check_ns
    cmp r0, #0
    beq sfh_bad
    mov r0, r4
    mov r1, r5
    mov r2, r6
    bl sec_nsc_func_body
    pop {r4, r5, r6, pc}
sfh_bad:
    movs r0, #0
    subs r0, #1
    pop {r4, r5, r6, pc}

; true when [r0, r0+r1) lies wholly inside non-secure SRAM or flash.
; Compares are add-with-carry against pre-negated window bounds; the
; length is capped first so the end computation cannot wrap.
sec_check_ns:
    push {r4, r5, r6, lr}
    mov r4, r0
    mov r5, r1
    ldr r0, =0xffffc000
    adds r3, r5, r0
    bcs scn_bad
    adds r6, r4, r5
    bcs scn_bad
    ldr r0, =0xdfffe000
    adds r3, r4, r0
    bcc scn_flash
    ldr r0, =0xdfffbfff
    adds r3, r6, r0
    bcs scn_bad
    b scn_ok
scn_flash:
    ldr r0, =0xffff8000
    adds r3, r4, r0
    bcc scn_bad
    ldr r0, =0xfffeffff
    adds r3, r6, r0
    bcs scn_bad
scn_ok:
    movs r0, #1
    pop {r4, r5, r6, pc}
scn_bad:
    movs r0, #0
    pop {r4, r5, r6, pc}
    .pool
"""


def s_flash_source() -> str:
    lib = runtime.instantiate(runtime.library_source(include_heap=False),
                              "sec_")
    return _SFLASH_HEAD + lib + _SFLASH_TAIL


_NSC_TEMPLATE = """
; gateway bank: fixed 32 byte slots, one service per slot
nsc_puts:
    sg
    push {lr}
    bl sec_nsc_puts_impl
    pop {r3}
    bxns r3
    .space 18

nsc_func:
    sg
    push {lr}
    bl FUNC_IMPL
    pop {r3}
    bxns r3
    .space 18

nsc_secure_console_puts:
    sg
    push {lr}
    bl CONSOLE_IMPL
    pop {r3}
    bxns r3
    .space 18

; control-flow monitor ports: preserve every argument register and
; bounce straight back to the non-secure caller
__cfi_push_veneer:
    sg
    mov r12, lr
    push {r4}
    ldr r4, =cfi_port
    str r0, [r4]
    pop {r4}
    bxns r12
    .pool
    .space 12

__cfi_ret_veneer:
    sg
    mov r12, lr
    push {r4}
    ldr r4, =cfi_port
    str r3, [r4, #4]
    pop {r4}
    bxns r12
    .pool
    .space 12

__cfi_site_veneer:
    sg
    mov r12, lr
    push {r4}
    ldr r4, =cfi_port
    str r3, [r4, #8]
    pop {r4}
    bxns r12
    .pool
    .space 12

__cfi_ind_veneer:
    sg
    mov r12, lr
    push {r4}
    ldr r4, =cfi_port
    str r3, [r4, #12]
    pop {r4}
    bxns r12
    .pool
"""


def nsc_source(*, hardened: bool = False) -> str:
    func = "sec_func_impl_hardened" if hardened else "sec_func_impl"
    console = ("sec_console_impl_hardened" if hardened
               else "sec_console_impl")
    return (_NSC_TEMPLATE.replace("FUNC_IMPL", func)
            .replace("CONSOLE_IMPL", console))


def ns_data_source() -> str:
    lib = runtime.instantiate(
        runtime.data_source(include_heap=True, heap_base=HEAP_BASE), "")
    return lib + """
line_buf:
    .space 320
val_cell:
    .word 0
out_cell:
    .word 0
boot_hook:
    .word 0
"""


def s_data_source() -> str:
    lib = runtime.instantiate(
        runtime.data_source(include_heap=False), "sec_")
    return lib + """
sec_line_buf:
    .space 128
sec_key:
    .word 0x41414141
    .word 0x5ec2e7b2
    .word 0x5ec2e7c3
    .word 0x5ec2e7d4
sec_scratch:
    .word 0
boot_target:
    .word 0
"""


# --- image construction -------------------------------------------------

_ASM_CACHE: dict = {}


def _assemble_cached(source: str, base: int, externs: dict) -> AsmProgram:
    key = (source, base, tuple(sorted(externs.items())))
    prog = _ASM_CACHE.get(key)
    if prog is None:
        prog = assemble(source, base, externs)
        _ASM_CACHE[key] = prog
    return prog


@dataclass
class VictimImage:
    machine: Machine
    mem: MemoryMap
    symbols: dict
    profile: dict
    meta: dict
    programs: dict = field(repr=False, default_factory=dict)

    def reset(self) -> None:
        self.machine.reset(self.symbols["_boot"] | 1, World.SECURE,
                           sp_s=SP_S_TOP, sp_ns=SP_NS_TOP)

    def run_from_boot(self, budget: int) -> RunResult:
        self.reset()
        return self.machine.run(budget)

    def peek_word(self, addr: int) -> int:
        return struct.unpack("<I", self.mem.peek(addr, 4))[0]

    def poke_word(self, addr: int, value: int) -> None:
        self.mem.poke(addr, struct.pack("<I", value & 0xFFFFFFFF))


def check_profile(profile: dict) -> tuple:
    """Validate a victim profile, returning (victim, world)."""
    victim = profile.get("victim")
    world = profile.get("world")
    if victim not in _VALID_WORLDS:
        raise ProfileError(f"unknown victim {victim!r}")
    if world not in _VALID_WORLDS[victim]:
        raise ProfileError(f"victim {victim!r} cannot run in world {world!r}")
    n = profile.get("buffer_len", DEFAULT_BUFFER_LEN)
    if not isinstance(n, int) or not 16 <= n <= MAX_BUFFER_LEN or n % 4:
        raise ProfileError(f"bad buffer_len {n!r}")
    mode = profile.get("heap", "fnptr")
    if mode not in ("fnptr", "unlink"):
        raise ProfileError(f"bad heap mode {mode!r}")
    return victim, world


def _entry_symbol(victim: str, world: str, heap_mode: str) -> str:
    if victim == "bof":
        return "dispatch_loop"
    if victim == "rop":
        return "rop_main"
    if victim == "heap":
        return ("heap_fnptr_main" if heap_mode == "fnptr"
                else "heap_unlink_main")
    if victim == "fmt":
        return "fmt_main" if world == "nsw" else "sec_fmt_main"
    return "host_stop"  # gateway victims are driven call by call


def build(profile: dict, *, stack_executable: bool | None = None,
          nsc_hardened: bool = False, instrument=None,
          audit: bool = False) -> VictimImage:
    """Assemble, load and wire up one victim machine.

    ``instrument`` is an optional source-to-source pass applied to the
    application program only; it must return ``(source, sites)`` where
    sites lists the indirect-call policies it annotated.
    """
    victim, world = check_profile(profile)
    buffer_len = profile.get("buffer_len", DEFAULT_BUFFER_LEN)
    heap_mode = profile.get("heap", "fnptr")
    if stack_executable is None:
        stack_executable = profile.get("stack_executable", True)

    ns_data = _assemble_cached(ns_data_source(), NS_DATA_BASE, {})
    s_data = _assemble_cached(s_data_source(), S_DATA_BASE, {})
    blob = _assemble_cached(_BLOB_SOURCE, BLOB_BASE, {})
    gadgets = _assemble_cached(_GADGETS_SOURCE, GADGETS_BASE, {})

    app_src = app_source(buffer_len)
    sites = None
    if instrument is not None:
        app_src, sites = instrument(app_src)
    app_ext = runtime.library_externs("", uart_base=UART_NS_BASE,
                                      heap_limit=HEAP_LIMIT)
    app_ext.update(ns_data.symbols)
    app_ext.update(NSC_SLOTS)
    app = _assemble_cached(app_src, APP_BASE, app_ext)
    if instrument is None and app.symbols["print_string"] != APP_BASE:
        raise AssertionError("print_string must sit at the app base")
    if app.end > POLICY_BASE:
        raise AssertionError("application overflows into the policy window")

    s_ext = runtime.library_externs("sec_", uart_base=UART_S_BASE)
    s_ext.update(s_data.symbols)
    s_flash = _assemble_cached(s_flash_source(), S_FLASH_BASE, s_ext)
    if s_flash.end > NSC_BASE:
        raise AssertionError("secure image overflows into the gateway bank")

    nsc_ext = dict(s_flash.symbols)
    nsc_ext["cfi_port"] = CFI_MMIO_BASE
    nsc = _assemble_cached(nsc_source(hardened=nsc_hardened), NSC_BASE,
                           nsc_ext)
    for name, addr in NSC_SLOTS.items():
        if nsc.symbols.get(name) != addr:
            raise AssertionError(f"gateway slot {name} moved to "
                                 f"0x{nsc.symbols.get(name, 0):x}")
    if nsc.end > APP_BASE:
        raise AssertionError("gateway bank overflows")

    disp_ext = dict(ns_data.symbols)
    disp_ext.update(app.symbols)
    dispatch = _assemble_cached(_DISPATCH_SOURCE, DISPATCH_BASE, disp_ext)
    if dispatch.end > NS_DATA_BASE:
        raise AssertionError("dispatcher overflows its SRAM window")

    programs = {"s_flash": s_flash, "nsc": nsc, "app": app, "blob": blob,
                "gadgets": gadgets, "dispatch": dispatch,
                "ns_data": ns_data, "s_data": s_data}
    symbols: dict = {}
    for prog in programs.values():
        symbols.update(prog.symbols)

    mem = map_from_manifest(victim_manifest(stack_executable=stack_executable))
    machine = Machine(mem, audit=audit)
    for prog in programs.values():
        mem.poke(prog.base, prog.data)

    entry = _entry_symbol(victim, world, heap_mode)
    mem.poke(symbols["boot_target"],
             struct.pack("<I", symbols[entry] | 1))

    meta = {
        "entry_symbol": entry,
        "victim": victim,
        "world": world,
        "buffer_len": buffer_len,
        "heap_mode": heap_mode,
        "stack_executable": stack_executable,
        "nsc_hardened": nsc_hardened,
        "cfi_sites": sites,
        "console": "ns" if world == "nsw" else "s",
        "inject_buf": SP_NS_TOP - 20 - buffer_len,
        "inject_ret": SP_NS_TOP - 4,
        "heap_chunks": (HEAP_BASE + 8, HEAP_BASE + 0x20),
        "fmt_frame": FMT_FRAME.get(world if victim == "fmt" else
                                   ("nsc" if victim == "nsc_puts" else "")),
        "fmt_secrets": (FMT_SECRETS if victim == "fmt"
                        else CONSOLE_SECRETS if victim == "nsc_puts"
                        else None),
    }
    image = VictimImage(machine=machine, mem=mem, symbols=symbols,
                        profile=dict(profile), meta=meta, programs=programs)
    image.reset()
    return image


def call_function(image: VictimImage, name: str, args=(), stack_args=(), *,
                  world: World = World.NONSECURE,
                  budget: int = 400_000) -> RunResult:
    """Host-driven call: run one guest function until it returns.

    The return path is a breakpoint stub whose immediate is
    HOST_STOP_IMM; a HALT with that immediate means the call completed.
    Memory and device queues are left as the previous call ended, so
    heap state accumulates across calls.
    """
    m = image.machine
    stop = "sec_host_stop" if world is World.SECURE else "host_stop"
    m.reset(image.symbols[name] | 1, world, sp_s=SP_S_TOP, sp_ns=SP_NS_TOP)
    if stack_args:
        sp = m.sp - 4 * len(stack_args)
        for i, value in enumerate(stack_args):
            image.poke_word(sp + 4 * i, value)
        m.sp = sp
    for i, value in enumerate(args):
        m.set_reg(i, value)
    m.lr = image.symbols[stop] | 1
    return m.run(budget)


def returned_ok(result: RunResult) -> bool:
    from .machine import RunOutcome
    return (result.outcome is RunOutcome.HALT
            and result.halt_imm == HOST_STOP_IMM)
