"""Flat physical memory map with security attribution.

Regions carry a security attribution (secure, secure-callable, or
non-secure), permissions, and a kind. The map itself is policy-free:
the execution core decides what an access from a given world means.
peek/poke are host-side loader accessors that bypass permissions but
still respect the map (and never touch device regions).
"""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import dataclass, field


class MapError(Exception):
    pass


class Attr(enum.Enum):
    S = "secure"
    NSC = "nsc"
    NS = "nonsecure"


class Kind(enum.Enum):
    FLASH = "flash"
    SRAM = "sram"
    MMIO = "mmio"


_FILL = {Kind.FLASH: 0xFF, Kind.SRAM: 0x00}


@dataclass
class Region:
    name: str
    base: int
    size: int
    attr: Attr
    perms: str
    kind: Kind
    data: bytearray = field(default=None, repr=False)
    device: object = field(default=None, repr=False)

    def __post_init__(self):
        bad = set(self.perms) - set("rwx")
        if bad:
            raise MapError(f"{self.name}: bad permission flags {sorted(bad)}")
        if self.size <= 0:
            raise MapError(f"{self.name}: empty region")
        if self.base % 4 or self.base + self.size > 1 << 32:
            raise MapError(f"{self.name}: bad extent")
        if self.attr == Attr.NSC and self.kind != Kind.FLASH:
            raise MapError(f"{self.name}: gateway regions must be flash")
        self.r = "r" in self.perms
        self.w = "w" in self.perms
        self.x = "x" in self.perms
        if self.kind != Kind.MMIO and self.data is None:
            self.data = bytearray([_FILL[self.kind]]) * self.size

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, n: int = 1) -> bool:
        return self.base <= addr and addr + n <= self.end


class MemoryMap:
    def __init__(self, regions):
        self.regions = sorted(regions, key=lambda r: r.base)
        self._bases = [r.base for r in self.regions]
        self._by_name = {}
        for r in self.regions:
            if r.name in self._by_name:
                raise MapError(f"duplicate region name {r.name}")
            self._by_name[r.name] = r
        for a, b in zip(self.regions, self.regions[1:]):
            if a.end > b.base:
                raise MapError(f"regions {a.name} and {b.name} overlap")

    def add_region(self, region: Region) -> None:
        for r in self.regions:
            if region.base < r.end and r.base < region.end:
                raise MapError(f"region {region.name} overlaps {r.name}")
        self.regions.append(region)
        self.regions.sort(key=lambda r: r.base)
        self._bases = [r.base for r in self.regions]
        if region.name in self._by_name:
            raise MapError(f"duplicate region name {region.name}")
        self._by_name[region.name] = region

    def region(self, name: str) -> Region:
        return self._by_name[name]

    def region_at(self, addr: int) -> Region | None:
        i = bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        r = self.regions[i]
        return r if addr < r.end else None

    def attach(self, name: str, device) -> None:
        self.region(name).device = device

    # --- host-side accessors -------------------------------------------

    def _walk(self, addr, n, op_name):
        """Yield (region, offset, count) chunks covering [addr, addr+n)."""
        while n > 0:
            r = self.region_at(addr)
            if r is None:
                raise MapError(f"{op_name}: 0x{addr:08x} is unmapped")
            if r.kind == Kind.MMIO:
                raise MapError(f"{op_name}: 0x{addr:08x} is a device region")
            take = min(n, r.end - addr)
            yield r, addr - r.base, take
            addr += take
            n -= take

    def peek(self, addr: int, n: int) -> bytes:
        out = bytearray()
        for r, off, take in self._walk(addr, n, "peek"):
            out += r.data[off:off + take]
        return bytes(out)

    def poke(self, addr: int, data: bytes) -> None:
        chunks = list(self._walk(addr, len(data), "poke"))
        i = 0
        for r, off, take in chunks:
            r.data[off:off + take] = data[i:i + take]
            i += take


def _num(value) -> int:
    if isinstance(value, str):
        return int(value.replace("_", ""), 0)
    return int(value)


_ATTRS = {a.value: a for a in Attr}
_KINDS = {k.value: k for k in Kind}


def map_from_manifest(manifest: dict) -> MemoryMap:
    regions = []
    for spec in manifest.get("regions", []):
        try:
            attr = _ATTRS[spec["attr"]]
            kind = _KINDS[spec["kind"]]
        except KeyError as exc:
            raise MapError(f"region {spec.get('name')}: bad field {exc}") from exc
        data = None
        if "blob" in spec:
            if kind == Kind.MMIO:
                raise MapError(f"region {spec['name']}: device with blob")
            size = _num(spec["size"])
            blob = bytes.fromhex(spec["blob"])
            if len(blob) > size:
                raise MapError(f"region {spec['name']}: blob exceeds size")
            data = bytearray([_FILL[kind]]) * size
            data[:len(blob)] = blob
        regions.append(Region(
            name=spec["name"],
            base=_num(spec["base"]),
            size=_num(spec["size"]),
            attr=attr,
            perms=spec["perms"],
            kind=kind,
            data=data,
        ))
    return MemoryMap(regions)


DEFAULT_MANIFEST = {
    "regions": [
        {"name": "s_flash", "base": "0x0", "size": "0x7E00",
         "attr": "secure", "perms": "rx", "kind": "flash"},
        {"name": "nsc_flash", "base": "0x7E00", "size": "0x200",
         "attr": "nsc", "perms": "rx", "kind": "flash"},
        {"name": "ns_flash", "base": "0x8000", "size": "0x8000",
         "attr": "nonsecure", "perms": "rx", "kind": "flash"},
        {"name": "s_sram", "base": "0x20000000", "size": "0x2000",
         "attr": "secure", "perms": "rw", "kind": "sram"},
        {"name": "ns_sram", "base": "0x20002000", "size": "0x2000",
         "attr": "nonsecure", "perms": "rwx", "kind": "sram"},
        {"name": "uart_s", "base": "0x40000000", "size": "0x400",
         "attr": "secure", "perms": "rw", "kind": "mmio"},
        {"name": "uart_ns", "base": "0x40000400", "size": "0x400",
         "attr": "nonsecure", "perms": "rw", "kind": "mmio"},
    ]
}


def default_map() -> MemoryMap:
    return map_from_manifest(DEFAULT_MANIFEST)
