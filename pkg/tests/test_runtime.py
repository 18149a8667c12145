"""Guest library behaviour, checked against host-side oracles."""

import struct

import pytest
from hypothesis import given, settings, strategies as st

from tzmlab import victims
from tzmlab.machine import RunOutcome
from tzmlab.victims import HEAP_BASE, call_function, returned_ok


@pytest.fixture(scope="module")
def img():
    return victims.build({"victim": "bof", "world": "nsw"})


@pytest.fixture()
def heap_img():
    # heap state accumulates across calls, so allocator tests get a
    # fresh machine each
    return victims.build({"victim": "bof", "world": "nsw"})


def tx(image):
    return image.machine.uart_ns.take_tx()


def put_cstr(image, addr, text):
    image.mem.poke(addr, text + b"\x00")


def guest_printf(image, fmt, *stack_words):
    lb = image.symbols["line_buf"]
    put_cstr(image, lb, fmt)
    tx(image)
    res = call_function(image, "printf", args=(lb,), stack_args=stack_words)
    assert returned_ok(res)
    return tx(image)


def printf_oracle(image, fmt, words):
    """Independent rendering of the guest console's format dialect."""
    out = bytearray()
    queue = list(words)
    i = 0
    while i < len(fmt):
        ch = fmt[i]
        i += 1
        if ch != 0x25:
            out.append(ch)
            continue
        spec = fmt[i]
        i += 1
        if spec == 0x25:
            out.append(0x25)
            continue
        if spec == 0x30:  # "%08..." counts as the wide hex form
            i += 2
            spec = 0x78
        if spec == 0x78:
            out += b"%08x" % (queue.pop(0) & 0xFFFFFFFF)
        elif spec == 0x64:
            out += b"%d" % (queue.pop(0) & 0xFFFFFFFF)
        elif spec == 0x63:
            out.append(queue.pop(0) & 0xFF)
        elif spec == 0x73:
            addr = queue.pop(0)
            while True:
                b = image.mem.peek(addr, 1)[0]
                if not b:
                    break
                out.append(b)
                addr += 1
        else:
            out.append(spec)
    return bytes(out)


# --- formatting ---------------------------------------------------------

def test_printf_mixed_conversions(img):
    saddr = img.symbols["line_buf"] + 200
    put_cstr(img, saddr, b"knock")
    fmt = b"pc=%08x n=%d c=%c s=%s pct=%% x=%x end"
    words = (0xDEADBEEF, 12345, 0x41, saddr, 0x123)
    assert guest_printf(img, fmt, *words) == printf_oracle(img, fmt, words)


@pytest.mark.parametrize("value", [
    0, 1, 7, 9, 10, 99, 100, 101, 999_999_999, 1_000_000_000,
    2**31, 2**32 - 1, 305419896,
])
def test_printf_decimal_matches_oracle(img, value):
    assert guest_printf(img, b"%d", value) == b"%d" % value


@pytest.mark.parametrize("value", [0, 1, 0x80000000, 0xFFFFFFFF, 0x00F00001])
def test_printf_hex_always_eight_digits(img, value):
    assert guest_printf(img, b"%x", value) == b"%08x" % value
    assert guest_printf(img, b"%08x", value) == b"%08x" % value


def test_printf_unknown_and_trailing_spec(img):
    assert guest_printf(img, b"a%qb") == b"aqb"
    # a lone trailing '%' consumes the terminator and echoes it
    assert guest_printf(img, b"ab%") == b"ab\x00"


def test_print_dec_word_zero(img):
    tx(img)
    assert returned_ok(call_function(img, "print_dec_word", args=(0,)))
    assert tx(img) == b"0"


def test_print_hex_word_zero(img):
    tx(img)
    assert returned_ok(call_function(img, "print_hex_word", args=(0,)))
    assert tx(img) == b"00000000"


# --- strings and I/O ----------------------------------------------------

def test_strcpy_copies_through_terminator(img):
    lb = img.symbols["line_buf"]
    src, dst = lb, lb + 64
    put_cstr(img, src, b"hello")
    img.mem.poke(dst, b"\xee" * 8)
    res = call_function(img, "strcpy", args=(dst, src))
    assert returned_ok(res)
    assert img.machine.get_reg(0) == dst
    assert img.mem.peek(dst, 7) == b"hello\x00\xee"


def test_memcpy_moves_exact_count(img):
    lb = img.symbols["line_buf"]
    blob = bytes(range(13))
    img.mem.poke(lb, blob + b"\xaa")
    res = call_function(img, "memcpy", args=(lb + 100, lb, 13))
    assert returned_ok(res)
    assert img.mem.peek(lb + 100, 14) == blob + b"\x00"


def test_read_line_stops_at_newline(img):
    lb = img.symbols["line_buf"]
    img.machine.uart_ns.feed(b"first line\nsecond")
    res = call_function(img, "read_line", args=(lb, 320))
    assert returned_ok(res)
    assert img.mem.peek(lb, 11) == b"first line\x00"
    assert bytes(img.machine.uart_ns.rx) == b"second"
    img.machine.uart_ns.rx.clear()


def test_read_line_drops_overlong_input(img):
    lb = img.symbols["line_buf"]
    img.machine.uart_ns.feed(b"X" * 40 + b"\ntail\n")
    res = call_function(img, "read_line", args=(lb, 8))
    assert returned_ok(res)
    assert img.mem.peek(lb, 8) == b"X" * 7 + b"\x00"
    res = call_function(img, "read_line", args=(lb, 8))
    assert returned_ok(res)
    assert img.mem.peek(lb, 5) == b"tail\x00"


def test_read_blob_length_prefix(img):
    lb = img.symbols["line_buf"]
    body = bytes((i * 7 + 1) % 256 for i in range(300))
    img.machine.uart_ns.feed(struct.pack("<H", 300) + body)
    res = call_function(img, "read_blob", args=(lb,))
    assert returned_ok(res)
    assert img.machine.get_reg(0) == 300
    assert img.mem.peek(lb, 300) == body


def test_negate_is_twos_complement(img):
    for v in (0, 1, 5, 0x80, 0x12345678, 0xFFFFFFFF):
        res = call_function(img, "negate", args=(v,))
        assert returned_ok(res)
        assert img.machine.get_reg(0) == (-v) & 0xFFFFFFFF


# --- allocator ----------------------------------------------------------

def _malloc(image, n):
    res = call_function(image, "malloc", args=(n,))
    assert returned_ok(res)
    return image.machine.get_reg(0)


def _free(image, p):
    assert returned_ok(call_function(image, "free", args=(p,)))


def test_malloc_layout_and_reuse(heap_img):
    h1 = _malloc(heap_img, 16)
    h2 = _malloc(heap_img, 16)
    assert h1 == HEAP_BASE + 8
    assert h2 == HEAP_BASE + 0x20
    _free(heap_img, h1)
    assert _malloc(heap_img, 16) == h1
    assert _malloc(heap_img, 16) == HEAP_BASE + 0x38


def test_malloc_rounds_and_enforces_minimum(heap_img):
    p = _malloc(heap_img, 1)  # minimum payload is 16
    q = _malloc(heap_img, 18)  # rounded up to 20
    assert q - p == 16 + 8
    r = _malloc(heap_img, 4)
    assert r - q == 20 + 8


def test_malloc_out_of_space_returns_null(heap_img):
    assert _malloc(heap_img, 0x800) == 0
    # the failed request must not have consumed wilderness
    assert _malloc(heap_img, 16) == HEAP_BASE + 8


def test_free_coalesces_with_next_chunk(heap_img):
    a = _malloc(heap_img, 16)
    b = _malloc(heap_img, 16)
    _malloc(heap_img, 16)  # keeps the wilderness cap away from b
    _free(heap_img, b)
    _free(heap_img, a)  # a absorbs b: merged payload spans 40 bytes
    assert _malloc(heap_img, 40) == a


def test_free_of_top_chunk_respects_wilderness_cap(heap_img):
    a = _malloc(heap_img, 16)
    _free(heap_img, a)
    assert _malloc(heap_img, 16) == a


class _ModelHeap:
    """Host-side mirror of the guest allocator's observable decisions."""

    def __init__(self):
        self.top = HEAP_BASE
        self.bin = []  # (addr, size) in list order; head inserts at 0
        self.live = {}  # payload addr -> chunk size

    @staticmethod
    def _round(n):
        n = max(n, 16)
        return (n + 3) & ~3

    def malloc(self, n):
        need = self._round(n) + 8
        for i, (addr, size) in enumerate(self.bin):
            if size >= need:
                del self.bin[i]
                self.live[addr + 8] = size
                return addr + 8
        new_top = self.top + need
        if new_top >= HEAP_BASE + 0x800:
            return 0
        addr = self.top
        self.top = new_top
        self.live[addr + 8] = need
        return addr + 8

    def free(self, payload):
        size = self.live.pop(payload)
        addr = payload - 8
        nxt = addr + size
        for i, (faddr, fsize) in enumerate(self.bin):
            if faddr == nxt:
                del self.bin[i]
                size += fsize
                break
        self.bin.insert(0, (addr, size))


def _walk_guest_bin(image):
    """Follow the free list, checking link consistency as we go."""
    bin_addr = image.symbols["heap_bin"]
    seen = []
    node = image.peek_word(bin_addr + 8)
    hops = 0
    while node != bin_addr:
        assert hops < 64, "free list does not terminate"
        size = image.peek_word(node + 4)
        assert size % 2 == 0, "free chunk with busy bit"
        fd = image.peek_word(node + 8)
        bk = image.peek_word(node + 12)
        assert image.peek_word(bk + 8) == node
        assert image.peek_word(fd + 12) == node
        seen.append((node, size))
        node = fd
        hops += 1
    return seen


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 80)),
                min_size=1, max_size=12))
def test_allocator_matches_model(ops):
    image = victims.build({"victim": "bof", "world": "nsw"})
    model = _ModelHeap()
    live = []
    for is_alloc, arg in ops:
        if is_alloc or not live:
            got = _malloc(image, arg)
            want = model.malloc(arg)
            assert got == want
            if got:
                live.append(got)
        else:
            victim = live.pop(arg % len(live))
            _free(image, victim)
            model.free(victim)
        assert _walk_guest_bin(image) == model.bin
        ends = sorted((p - 8, p - 8 + model.live[p]) for p in live)
        for (_, e1), (s2, _) in zip(ends, ends[1:]):
            assert e1 <= s2, "live chunks overlap"
        assert image.peek_word(image.symbols["heap_top_var"]) == model.top


# --- gateway round trip -------------------------------------------------

def test_gateway_sum_round_trip():
    image = victims.build({"victim": "nsc_func", "world": "nsc"})
    lb = image.symbols["line_buf"]
    image.mem.poke(lb, struct.pack("<III", 1, 2, 3))
    out = image.symbols["out_cell"]
    res = call_function(image, "nsc_func", args=(lb, 3, out))
    assert returned_ok(res)
    assert image.machine.get_reg(0) == 6
    assert image.peek_word(out) == 6
    vias = [t.via for t in image.machine.transitions]
    assert vias == ["sg", "bxns"]
