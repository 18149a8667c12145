"""Runtime mitigations and the attack-versus-defense matrix driver.

Three independent switches:

* ``nx``: the non-secure data SRAM loses its execute permission, so
  injected shellcode faults at the first fetch.
* ``cfi``: the application is rewritten at the source level to report
  every routine entry, return and annotated indirect call to a secure
  monitor holding a shadow stack and a per-site target policy.
* ``nsc_hardening``: the gateway veneers dispatch to implementations
  that range-check pointer arguments and sanitize format strings.

The monitor sits behind secure MMIO so non-secure code can neither read
nor forge its state; the veneers that feed it live in the gateway bank
and are the only way across. Instrumentation is callee-side: a rewritten
routine protects itself no matter who calls it, and the uninstrumented
dispatcher needs no cooperation.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

from . import attacks, victims
from .machine import Fault, FaultKind
from .memory import Attr, Kind, Region

SHADOW_MIRROR_BASE = 0x2000_0100
SHADOW_CAP = 62

DEFENSES = ("nx", "cfi", "nsc_hardening")
MATRIX_COLUMNS = ("none", "nx", "cfi", "nsc_hardening", "all")


class InstrumentError(ValueError):
    """The rewriter met code it cannot make safe."""


# --- source rewriting ---------------------------------------------------

_LABEL_FN = re.compile(r"^([A-Za-z_]\w*):\s*;@fn\s*$")
_POP_PC = re.compile(r"^(\s*)pop\s*\{([^}]*)\}\s*$")
_BX_LR = re.compile(r"^(\s*)bx\s+lr\s*$")
_BLX_REG = re.compile(r"^(\s*)blx\s+(r\d+)\s*(?:;@targets:\s*(.*))?$")

_PROLOGUE = """\
    push {r0}
    mov r0, lr
    bl __cfi_push_veneer
    mov lr, r0
    pop {r0}"""


@dataclass(frozen=True)
class CfiSite:
    id: int
    register: str
    targets: tuple


def instrument(source: str) -> tuple[str, list]:
    """Rewrite one program so the monitor sees its control flow.

    Routines tagged ``;@fn`` get an entry sequence that records the
    live return address, every return is split so the address travels
    through the monitor before ``bx``, and each ``;@targets:``
    annotated indirect call is checked against its policy entry first.
    A register-indirect call with no annotation is an error: silent
    gaps are how this kind of scheme rots.
    """
    out = []
    sites: list[CfiSite] = []
    for line in source.splitlines():
        m = _LABEL_FN.match(line)
        if m:
            out.append(line)
            out.append(_PROLOGUE)
            continue
        m = _POP_PC.match(line)
        if m:
            regs = [r.strip() for r in m.group(2).split(",") if r.strip()]
            if regs and regs[-1] == "pc":
                pad = m.group(1)
                if regs[:-1]:
                    out.append(f"{pad}pop {{{', '.join(regs[:-1])}}}")
                out.append(f"{pad}pop {{r3}}")
                out.append(f"{pad}bl __cfi_ret_veneer")
                out.append(f"{pad}bx r3")
                continue
            out.append(line)
            continue
        m = _BX_LR.match(line)
        if m:
            pad = m.group(1)
            out.append(f"{pad}mov r3, lr")
            out.append(f"{pad}bl __cfi_ret_veneer")
            out.append(f"{pad}bx r3")
            continue
        m = _BLX_REG.match(line)
        if m:
            pad, reg, targets = m.groups()
            if not targets or not targets.split():
                raise InstrumentError(
                    f"indirect call without target annotation: {line.strip()!r}")
            if reg == "r3":
                raise InstrumentError(
                    "indirect call through r3 collides with the check sequence")
            site = CfiSite(len(sites), reg, tuple(targets.split()))
            sites.append(site)
            out.append(f"{pad}ldr r3, ={site.id}")
            out.append(f"{pad}bl __cfi_site_veneer")
            out.append(f"{pad}mov r3, {reg}")
            out.append(f"{pad}bl __cfi_ind_veneer")
            out.append(f"{pad}blx {reg}")
            continue
        out.append(line)
    return "\n".join(out) + "\n", sites


# --- policy table -------------------------------------------------------

def pack_policy(sites, symbols: dict) -> bytes:
    """Serialize target policies: count, then id/n/targets per site.

    Target names resolve through the image symbol table and carry the
    thumb bit, matching what a register holds at the call site.
    """
    words = [len(sites)]
    for site in sites:
        resolved = []
        for name in site.targets:
            if name not in symbols:
                raise InstrumentError(f"unknown policy target {name!r}")
            resolved.append(symbols[name] | 1)
        words.append(site.id)
        words.append(len(resolved))
        words.extend(resolved)
    return struct.pack("<%dI" % len(words), *words)


def parse_policy(blob: bytes) -> dict:
    words = struct.unpack("<%dI" % (len(blob) // 4), blob[:len(blob) & ~3])
    table = {}
    pos = 1
    for _ in range(words[0]):
        sid, n = words[pos], words[pos + 1]
        table[sid] = tuple(words[pos + 2:pos + 2 + n])
        pos += 2 + n
    return table


# --- the monitor device -------------------------------------------------

class CfiMonitor:
    """Shadow stack and branch-policy checker behind secure MMIO.

    Four write-only word ports: entry report at +0, return report at
    +4, site declaration at +8, indirect target at +12. Reading +0
    gives the shadow depth, handy for the secure console. A mismatch
    marks the machine and aborts the instruction with a hard fault, so
    the corrupted transfer never executes.

    The shadow is mirrored into secure SRAM as depth plus entries;
    stale words past the live depth are not cleared.
    """

    PUSH, RET, SITE, IND = 0x0, 0x4, 0x8, 0xC

    def __init__(self, machine, mem, *, policy_base=victims.POLICY_BASE,
                 mirror_base=SHADOW_MIRROR_BASE, cap=SHADOW_CAP):
        self.machine = machine
        self.mem = mem
        self.policy_base = policy_base
        self.mirror_base = mirror_base
        self.cap = cap
        self.shadow: list[int] = []
        self.pending_site: int | None = None

    def on_reset(self) -> None:
        self.shadow.clear()
        self.pending_site = None
        self._mirror()

    def read(self, offset: int, nbytes: int) -> int:
        if offset == self.PUSH:
            return len(self.shadow)
        return 0

    def write(self, offset: int, nbytes: int, value: int) -> None:
        if offset == self.PUSH:
            self._push(value)
        elif offset == self.RET:
            self._ret(value)
        elif offset == self.SITE:
            self.pending_site = value
        elif offset == self.IND:
            self._indirect(value)

    def _push(self, ra: int) -> None:
        if len(self.shadow) >= self.cap:
            self._violation("shadow stack overflow")
        self.shadow.append(ra)
        self._mirror()

    def _ret(self, ra: int) -> None:
        if not self.shadow:
            self._violation("return with empty shadow")
        want = self.shadow[-1]
        if ra != want:
            self._violation(
                f"return address mismatch: expected 0x{want:08x} got 0x{ra:08x}")
        self.shadow.pop()
        self._mirror()

    def _indirect(self, target: int) -> None:
        sid = self.pending_site
        self.pending_site = None
        if sid is None:
            self._violation("indirect call without site declaration")
        allowed = self._policy(sid)
        if allowed is None:
            self._violation(f"no policy for site {sid}")
        if target not in allowed:
            self._violation(
                f"indirect target 0x{target:08x} not allowed at site {sid}")

    def _policy(self, sid: int):
        base = self.policy_base
        n_sites = self._word(base)
        pos = base + 4
        for _ in range(n_sites):
            cur, n = self._word(pos), self._word(pos + 4)
            if cur == sid:
                return tuple(self._word(pos + 8 + 4 * i) for i in range(n))
            pos += 8 + 4 * n
        return None

    def _word(self, addr: int) -> int:
        return struct.unpack("<I", self.mem.peek(addr, 4))[0]

    def _mirror(self) -> None:
        depth = len(self.shadow)
        self.mem.poke(self.mirror_base,
                      struct.pack("<%dI" % (1 + depth), depth, *self.shadow))

    def _violation(self, detail: str) -> None:
        self.machine.cfi_violation = detail
        raise Fault(FaultKind.HARD, f"cfi: {detail}")


# --- image assembly with defenses ---------------------------------------

def build_defended(profile: dict, defenses=()) -> victims.VictimImage:
    """One victim image with the named defense switches applied."""
    chosen = tuple(defenses)
    unknown = set(chosen) - set(DEFENSES)
    if unknown:
        raise ValueError(f"unknown defenses {sorted(unknown)}")
    image = victims.build(
        profile,
        stack_executable=False if "nx" in chosen else None,
        nsc_hardened="nsc_hardening" in chosen,
        instrument=instrument if "cfi" in chosen else None,
    )
    if "cfi" in chosen:
        if image.programs["app"].end > victims.BLOB_BASE:
            raise AssertionError("instrumented application overruns")
        image.mem.add_region(Region(
            name="cfi_mon", base=victims.CFI_MMIO_BASE, size=0x100,
            attr=Attr.S, perms="rw", kind=Kind.MMIO))
        monitor = CfiMonitor(image.machine, image.mem)
        image.mem.attach("cfi_mon", monitor)
        image.mem.poke(victims.POLICY_BASE,
                       pack_policy(image.meta["cfi_sites"], image.symbols))
        image.meta["cfi_monitor"] = monitor
    image.meta["defenses"] = chosen
    return image


def column_defenses(column: str) -> tuple:
    if column == "none":
        return ()
    if column == "all":
        return DEFENSES
    if column in DEFENSES:
        return (column,)
    raise ValueError(f"unknown defense column {column!r}")


def evaluate_matrix(attack_names=None, columns=MATRIX_COLUMNS) -> dict:
    """Run every attack against every defense column on fresh images."""
    names = tuple(attack_names) if attack_names else attacks.ATTACK_NAMES
    results: dict = {}
    for name in names:
        row = {}
        for column in columns:
            image = build_defended(attacks.ATTACK_PROFILES[name],
                                   column_defenses(column))
            row[column] = attacks.run_attack(name, image)
        results[name] = row
    return results


def matrix_outcomes(results: dict) -> dict:
    return {name: {col: rep.outcome for col, rep in row.items()}
            for name, row in results.items()}
