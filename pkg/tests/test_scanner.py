"""Scanner checks.

Two independent oracles keep the scanner honest: a halfword stepper
that classifies encodings straight from the bit-level validity table
(no decoder involved), and a forward window enumerator that rebuilds
the gadget set without the scanner's backward walk.
"""

import random
from pathlib import Path

import pytest

from tzmlab import asm, isa, scanner, victims

FIXTURES = Path(__file__).parent / "fixtures"

GADGETS_BASE = 0xA000


# --- oracle 1: bit-level census, no decoder ------------------------------

def _hw_valid(hw):
    """Validity of a 16-bit encoding, straight from the format table."""
    if 0x1800 <= hw < 0x1A00:
        return True  # adds reg
    if 0x1C00 <= hw < 0x4000:
        return True  # adds/subs imm3, movs/cmp/adds/subs imm8
    if 0x4600 <= hw < 0x4700:
        return True  # hi-register mov
    if 0x4700 <= hw < 0x4800:
        if (hw >> 3) & 0xF == 15:
            return False
        link, low = hw & 0x80, hw & 7
        return (link, low) in ((0, 0), (0, 4), (0x80, 0))
    if 0x4800 <= hw < 0x5000:
        return True  # pc-relative ldr
    if 0x6000 <= hw < 0x8000:
        return True  # str/ldr/strb/ldrb immediate
    if 0xB400 <= hw < 0xB600:
        return bool(hw & 0x1FF)  # push
    if 0xBC00 <= hw < 0xBE00:
        return bool(hw & 0x1FF)  # pop
    if 0xBE00 <= hw < 0xBF00:
        return True  # bkpt
    if hw == 0xBF00:
        return True  # nop
    if 0xD000 <= hw < 0xE000:
        return (hw >> 8) & 0xF != 15  # b<cond> and udf, svc slot invalid
    if 0xE000 <= hw < 0xE800:
        return True  # b
    return False


def _census_oracle(data):
    data = bytes(data)
    total = pop_pc = bx_lr = unknown = 0
    pos, n = 0, len(data)
    while pos + 2 <= n:
        hw = data[pos] | data[pos + 1] << 8
        if hw >= 0xE800:
            if pos + 4 <= n:
                hw2 = data[pos + 2] | data[pos + 3] << 8
                is_sg = hw == 0xE97F and hw2 == 0xE97F
                is_bl = 0xF000 <= hw <= 0xF7FF and hw2 & 0xD000 == 0xD000
                if is_sg or is_bl:
                    total += 1
                    pos += 4
                    continue
            unknown += 1
            pos += 2
            continue
        if _hw_valid(hw):
            total += 1
            if 0xBD00 <= hw < 0xBE00:
                pop_pc += 1
            elif hw == 0x4770:
                bx_lr += 1
        else:
            unknown += 1
        pos += 2
    return {"total": total, "pop_pc": pop_pc, "bx_lr": bx_lr,
            "unknown": unknown}


# --- oracle 2: forward window enumeration --------------------------------

def _term_oracle(data, pos):
    """(instruction count, kind) when pos starts a terminator."""
    try:
        ins, size = isa.decode(data, pos)
    except isa.DecodeError:
        return None
    if not isinstance(ins, isa.Pop):
        return None
    if ins.pc:
        return 1, "pop_pc"
    try:
        nxt, _ = isa.decode(data, pos + size)
    except isa.DecodeError:
        return None
    if isinstance(nxt, isa.Bx) and nxt.rm == 14:
        return 2, "pop_bx_lr"
    return None


def _gadget_oracle(data, base, max_len):
    """Every even offset, decoded forward to its first terminator."""
    data = bytes(data)
    out = {}
    for start in range(0, len(data) - 1, 2):
        pos, count = start, 0
        while True:
            term = _term_oracle(data, pos)
            if term is not None:
                n, kind = term
                if count + n <= max_len:
                    out[base + start] = (count + n, kind)
                break
            if count == max_len:
                break
            try:
                _, size = isa.decode(data, pos)
            except isa.DecodeError:
                break
            pos += size
            count += 1
    return out


def _random_blobs():
    rng = random.Random(0xC0C5)
    return [bytes(rng.randrange(256) for _ in range(400)) for _ in range(6)]


@pytest.fixture(scope="module")
def demo():
    return scanner.census_demo()


@pytest.fixture(scope="module")
def victim_mem():
    return victims.build({"victim": "bof", "world": "nsw"}).mem


@pytest.fixture(scope="module")
def gadget_bytes(victim_mem):
    region = victim_mem.region("ns_flash")
    off = GADGETS_BASE - region.base
    return bytes(region.data[off:off + 0x300])


def test_census_matches_bitlevel_oracle(demo, gadget_bytes):
    samples = [demo, gadget_bytes, b"", b"\x00"] + _random_blobs()
    for blob in samples:
        got = scanner.census(blob)
        want = _census_oracle(blob)
        for key, val in want.items():
            assert got[key] == val, (key, len(blob))


def test_census_density_definition(demo):
    c = scanner.census(demo)
    assert c["density"] == (c["pop_pc"] + c["bx_lr"]) / c["total"]
    assert scanner.census(b"")["density"] == 0.0


def test_gadgets_match_forward_oracle(demo, gadget_bytes):
    cases = [(demo, 0, 4), (gadget_bytes, GADGETS_BASE, 4),
             (gadget_bytes, GADGETS_BASE, 9), (gadget_bytes, GADGETS_BASE, 14)]
    cases += [(blob, 0x100, ml) for blob in _random_blobs() for ml in (4, 6)]
    for blob, base, max_len in cases:
        got = {g.entry: (g.length, g.terminator)
               for g in scanner.find_gadgets(blob, base, max_len=max_len)}
        assert got == _gadget_oracle(blob, base, max_len)


# --- frozen demo image ---------------------------------------------------

def test_demo_census_frozen(demo):
    assert len(demo) == 4240
    c = scanner.census(demo)
    assert c["total"] == 1908
    assert c["pop_pc"] == 49
    assert c["bx_lr"] == 16
    assert c["unknown"] == 0
    assert c["density"] == pytest.approx(65 / 1908)
    assert scanner.format_density(c["density"]) == "3.41%"


def test_demo_deterministic(demo):
    assert scanner.census_demo() == demo
    assert scanner.census_demo(seed=1) != demo


def test_demo_fixture_current(demo):
    stored = (FIXTURES / "census_demo.bin").read_bytes()
    assert stored == demo


# --- gadget discovery on the planted victim window -----------------------

def test_planted_gadgets_found(gadget_bytes):
    hits = {g.entry: g for g in
            scanner.find_gadgets(gadget_bytes, GADGETS_BASE, max_len=14)}
    g1 = hits[0xA000]
    assert (g1.length, g1.terminator) == (1, "pop_pc")
    assert g1.pop_effect == ("r4", "r5", "pc")
    assert g1.text == ("pop {r4, r5, pc}",)

    g2 = hits[0xA100]
    assert (g2.length, g2.terminator) == (2, "pop_pc")
    assert g2.pop_effect == ("r4", "pc")
    assert g2.text[0] == "mov r0, r5"

    g3 = hits[0xA200]
    assert (g3.length, g3.terminator) == (9, "pop_pc")
    assert g3.pop_effect == ("pc",)
    assert g3.text[-1] == "pop {pc}"


def test_long_window_needs_wider_search(gadget_bytes):
    default = {g.entry for g in
               scanner.find_gadgets(gadget_bytes, GADGETS_BASE)}
    assert 0xA000 in default and 0xA100 in default
    assert 0xA200 not in default


def test_pop_bx_lr_pair():
    blob = (isa.MovImm(0, 1).encode() + isa.Pop((4,)).encode()
            + isa.Bx(14).encode())
    gadgets = scanner.find_gadgets(blob, 0)
    got = {g.entry: g for g in gadgets}
    assert set(got) == {0, 2}
    assert got[2].length == 2
    assert got[2].terminator == "pop_bx_lr"
    assert got[2].pop_effect == ("r4",)
    assert got[0].length == 3
    # a pop with no pc and no bx lr after it terminates nothing
    assert scanner.find_gadgets(isa.Pop((4,)).encode(), 0) == []


def test_misaligned_entries_count(gadget_bytes):
    length_one = [g for g in scanner.find_gadgets(gadget_bytes, GADGETS_BASE)
                  if g.length == 1]
    # every halfword offset is a candidate, so the bare pops inside the
    # planted windows surface as their own one-instruction gadgets
    assert {g.entry for g in length_one} >= {0xA000, 0xA102}


# --- gateway entry discovery ---------------------------------------------

def test_gateway_entries_on_victim(victim_mem):
    region = victim_mem.region("nsc_flash")
    data = bytes(region.data)
    entries = scanner.find_nsc_entries(data, region.base, victim_mem)
    assert entries == [0x7E00, 0x7E20, 0x7E40, 0x7E60, 0x7E80, 0x7EA0,
                       0x7EC0]
    # the map filter only trims; raw byte scan agrees here
    assert scanner.find_nsc_entries(data, region.base) == entries


def test_gateway_filter_rejects_wrong_region(victim_mem):
    region = victim_mem.region("nsc_flash")
    data = bytes(region.data)
    # rebase the same bytes into plain non-secure flash: without a map
    # the markers still show, with the map they are rejected
    assert len(scanner.find_nsc_entries(data, 0x8000)) == 7
    assert scanner.find_nsc_entries(data, 0x8000, victim_mem) == []


def test_gateway_entries_tiny_image():
    prog = asm.assemble("sg\nbxns lr\nsg\nbxns lr\n", 0x7E00)
    assert scanner.find_nsc_entries(prog.data, 0x7E00) == [0x7E00, 0x7E06]


# --- stack-register branches ---------------------------------------------

def test_jmp_sp_detection():
    blob = (isa.MovImm(0, 5).encode() + isa.Bx(13).encode()
            + isa.Nop().encode() + isa.Blx(13).encode()
            + isa.Bx(14).encode())
    assert scanner.find_jmp_sp(blob, 0x100) == [0x102, 0x106]


def test_jmp_sp_absent_in_victim(victim_mem):
    for name in ("s_flash", "nsc_flash", "ns_flash"):
        region = victim_mem.region(name)
        assert scanner.find_jmp_sp(bytes(region.data), region.base) == []


# --- sweep edges and report shape ----------------------------------------

def test_sweep_tail_behaviour():
    # odd trailing byte is ignored; a 32-bit prefix with no second
    # halfword is one unknown
    blob = isa.MovImm(0, 1).encode() + b"\x00\xf0"
    rows = list(scanner.sweep(blob))
    assert rows[1] == (2, None, 2)
    c = scanner.census(blob + b"\xAA")
    assert (c["total"], c["unknown"]) == (1, 1)


def test_iter_instructions_skips_unknown():
    blob = b"\x00\x00" + isa.Nop().encode()
    got = list(scanner.iter_instructions(blob, 0x40))
    assert len(got) == 1
    assert got[0][0] == 0x42
    assert isinstance(got[0][1], isa.Nop)


def test_scan_report_shape(gadget_bytes, victim_mem):
    rep = scanner.scan_report(gadget_bytes, GADGETS_BASE, victim_mem,
                              max_len=14)
    assert set(rep) == {"total", "pop_pc", "bx_lr", "unknown", "density",
                        "gadgets", "nsc_entries", "jmp_sp"}
    assert rep["nsc_entries"] == []
    assert rep["jmp_sp"] == []
    by_entry = {g["entry"]: g for g in rep["gadgets"]}
    assert by_entry[0xA200]["pop_effect"] == ["pc"]
    for g in rep["gadgets"]:
        assert set(g) == {"entry", "length", "terminator", "pop_effect",
                          "text"}
