"""Guest-side support library, shipped as assembly source.

Every victim image links one copy of this library per world it uses: the
non-secure copy with no symbol prefix talking to the non-secure UART, and
a secure copy under the ``sec_`` prefix talking to the secure UART.
Instantiation is textual: each label in the template carries a ``$``
sigil which is replaced by the prefix, and the few external constants
(UART base, heap bounds) are supplied as assembler externs.

Calling convention used throughout the guest kit: arguments in r0-r2,
result in r0, r3 and r12 are call-clobbered, r4-r7 are callee-saved.
Labels tagged ``;@fn`` mark routine entry points; the instrumentation
pass in the defense module keys off that tag.

The instruction subset has no register-register compare, no logical ops
and no shifts, which shapes some of the code below:

* unsigned compares are done by adding a pre-negated value and reading
  the carry flag (carry set == no borrow == a >= b),
* negation of a run-time value walks a 256-byte complement table and
  adds one,
* multiply-by-256 is eight self-adds,
* byte extraction bounces a word through a scratch cell and reloads
  single bytes.
"""

from __future__ import annotations

UART_DATA_OFFSET = 0x0
UART_STATUS_OFFSET = 0x4

# heap chunk layout: [prev_size][size|busy] then payload; free chunks
# keep fd at payload+0 and bk at payload+4
CHUNK_HEADER = 8
CHUNK_FD_OFFSET = 8
CHUNK_BK_OFFSET = 12
MIN_PAYLOAD = 16


def _comptab_lines() -> str:
    rows = []
    for i in range(0, 256, 16):
        vals = ", ".join(str(255 - b) for b in range(i, i + 16))
        rows.append("    .byte " + vals)
    return "\n".join(rows)


def _decpow_lines() -> str:
    # negated powers of ten, highest first, zero terminated; adding an
    # entry to a value sets carry exactly when the value >= that power
    rows = []
    for p in (10 ** k for k in range(9, 0, -1)):
        rows.append("    .word 0x%08x    ; -%d" % ((1 << 32) - p, p))
    rows.append("    .word 0")
    return "\n".join(rows)


_IO_AND_STRINGS = """
; print_string deliberately leads the library: images that place this
; file first in a flash bank get it at the bank base address, which
; keeps position-independent caller stubs short.
$print_string: ;@fn
    push {r4, lr}
    mov r4, r0
$ps_loop:
    ldrb r0, [r4]
    cmp r0, #0
    beq $ps_done
    bl $putc
    adds r4, #1
    b $ps_loop
$ps_done:
    pop {r4, pc}

; --- byte I/O ---------------------------------------------------------

$putc: ;@fn
    push {r7}
    ldr r7, =$uart_base
    str r0, [r7]
    pop {r7}
    bx lr

$getc: ;@fn
    push {r7}
    ldr r7, =$uart_base
$gc_poll:
    ldr r0, [r7, #4]
    cmp r0, #0
    beq $gc_poll
    ldr r0, [r7]
    pop {r7}
    bx lr
    .pool

; read one text line into r0 (capacity r1, including the terminator).
; Stops at a line feed, which is why delivered payloads may not contain
; 0x0a anywhere. Overlong input is dropped until the newline arrives.
$read_line: ;@fn
    push {r4, r5, r7, lr}
    mov r4, r0
    mov r5, r1
    subs r5, #1
    ldr r7, =$uart_base
$rl_poll:
    ldr r0, [r7, #4]
    cmp r0, #0
    beq $rl_poll
    ldr r0, [r7]
    cmp r0, #10
    beq $rl_done
    cmp r5, #0
    beq $rl_poll
    strb r0, [r4]
    adds r4, #1
    subs r5, #1
    b $rl_poll
$rl_done:
    movs r0, #0
    strb r0, [r4]
    pop {r4, r5, r7, pc}
    .pool

; read a 16-bit little-endian length then that many raw bytes into r0.
; Binary channel: no terminator, nulls travel freely. Returns the count.
$read_blob: ;@fn
    push {r4, r5, r6, lr}
    mov r4, r0
    bl $getc
    mov r5, r0
    bl $getc
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r0, r0, r0
    adds r5, r5, r0
    mov r6, r5
$rb_loop:
    cmp r5, #0
    beq $rb_done
    bl $getc
    strb r0, [r4]
    adds r4, #1
    subs r5, #1
    b $rb_loop
$rb_done:
    mov r0, r6
    pop {r4, r5, r6, pc}

; --- string routines --------------------------------------------------

; copy through the first 0x00 inclusive, no bounds check whatsoever
$strcpy: ;@fn
    push {r4, r5}
    mov r4, r0
$sc_loop:
    ldrb r5, [r1]
    strb r5, [r0]
    adds r0, #1
    adds r1, #1
    cmp r5, #0
    bne $sc_loop
    mov r0, r4
    pop {r4, r5}
    bx lr

$memcpy: ;@fn
    push {r4, r5}
    mov r4, r0
$mc_loop:
    cmp r2, #0
    beq $mc_done
    ldrb r5, [r1]
    strb r5, [r0]
    adds r0, #1
    adds r1, #1
    subs r2, #1
    b $mc_loop
$mc_done:
    mov r0, r4
    pop {r4, r5}
    bx lr

; --- number formatting ------------------------------------------------

$print_hex_word: ;@fn
    push {r4, lr}
    ldr r4, =$phw_tmp
    str r0, [r4]
    ldrb r0, [r4, #3]
    bl $phw_byte
    ldrb r0, [r4, #2]
    bl $phw_byte
    ldrb r0, [r4, #1]
    bl $phw_byte
    ldrb r0, [r4]
    bl $phw_byte
    pop {r4, pc}
    .pool

$phw_byte: ;@fn
    push {r4, r5, lr}
    mov r4, r0
    movs r5, #0
$pb_split:
    cmp r4, #16
    bcc $pb_out
    subs r4, #16
    adds r5, #1
    b $pb_split
$pb_out:
    mov r0, r5
    bl $phw_digit
    mov r0, r4
    bl $phw_digit
    pop {r4, r5, pc}

$phw_digit: ;@fn
    push {r4, lr}
    ldr r4, =$hexdigits
    adds r4, r4, r0
    ldrb r0, [r4]
    bl $putc
    pop {r4, pc}
    .pool

$print_dec_word: ;@fn
    push {r4, r5, r6, r7, lr}
    mov r4, r0
    ldr r5, =$decpows
    movs r6, #0
$pd_pow:
    ldr r2, [r5]
    cmp r2, #0
    beq $pd_last
    movs r7, #0
$pd_count:
    adds r0, r4, r2
    bcc $pd_emit
    mov r4, r0
    adds r7, #1
    b $pd_count
$pd_emit:
    cmp r7, #0
    bne $pd_do
    cmp r6, #0
    beq $pd_skip
$pd_do:
    movs r6, #1
    mov r0, r7
    adds r0, #48
    bl $putc
$pd_skip:
    adds r5, #4
    b $pd_pow
$pd_last:
    mov r0, r4
    adds r0, #48
    bl $putc
    pop {r4, r5, r6, r7, pc}
    .pool

; --- format interpreter -----------------------------------------------

; printf(r0 = format). Every conversion consumes the next word from the
; stack as it stood at entry, exactly like a variadic ABI with all
; arguments stack-passed: callers push trailing arguments immediately
; before the call and drop them after. Three registers are pushed here,
; so the argument cursor starts at sp+12. Supported conversions:
; %x %08x (both print eight hex digits) %d %c %s %%; "%0" assumes the
; canonical "%08x" and skips two bytes.
$printf: ;@fn
    push {r4, r5, lr}
    mov r4, r0
    mov r5, sp
    adds r5, #12
$pf_loop:
    ldrb r0, [r4]
    adds r4, #1
    cmp r0, #0
    beq $pf_done
    cmp r0, #37
    beq $pf_spec
$pf_put:
    bl $putc
    b $pf_loop
$pf_spec:
    ldrb r0, [r4]
    adds r4, #1
    cmp r0, #37
    beq $pf_put
    cmp r0, #120
    beq $pf_hex
    cmp r0, #100
    beq $pf_dec
    cmp r0, #99
    beq $pf_chr
    cmp r0, #115
    beq $pf_str
    cmp r0, #48
    beq $pf_wide
    b $pf_put
$pf_wide:
    adds r4, #2
$pf_hex:
    ldr r0, [r5]
    adds r5, #4
    bl $print_hex_word
    b $pf_loop
$pf_dec:
    ldr r0, [r5]
    adds r5, #4
    bl $print_dec_word
    b $pf_loop
$pf_chr:
    ldr r0, [r5]
    adds r5, #4
    bl $putc
    b $pf_loop
$pf_str:
    ldr r0, [r5]
    adds r5, #4
    bl $print_string
    b $pf_loop
$pf_done:
    pop {r4, r5, pc}
    .pool
"""

_HEAP = """
; --- allocator --------------------------------------------------------

; two's complement via the byte-complement table, then plus one
$negate: ;@fn
    push {r4, r5, r6, lr}
    ldr r4, =$heap_scratch
    str r0, [r4]
    ldr r6, =$comptab
    ldrb r5, [r4]
    adds r5, r5, r6
    ldrb r5, [r5]
    strb r5, [r4]
    ldrb r5, [r4, #1]
    adds r5, r5, r6
    ldrb r5, [r5]
    strb r5, [r4, #1]
    ldrb r5, [r4, #2]
    adds r5, r5, r6
    ldrb r5, [r5]
    strb r5, [r4, #2]
    ldrb r5, [r4, #3]
    adds r5, r5, r6
    ldrb r5, [r5]
    strb r5, [r4, #3]
    ldr r0, [r4]
    adds r0, #1
    pop {r4, r5, r6, pc}
    .pool

; first-fit from a circular doubly-linked bin; the sentinel's size field
; is zero, which doubles as the end-of-list marker during the walk.
; Chunks carved from the wilderness get a busy cap header planted just
; past them so a later free never coalesces into unclaimed space.
$malloc: ;@fn
    push {r4, r5, r6, r7, lr}
    cmp r0, #16
    bcs $ma_szok
    movs r0, #16
$ma_szok:
    ldr r4, =$heap_scratch
    str r0, [r4]
    ldrb r5, [r4]
$ma_mod:
    cmp r5, #4
    bcc $ma_rem
    subs r5, #4
    b $ma_mod
$ma_rem:
    cmp r5, #0
    beq $ma_aligned
$ma_pad:
    adds r0, #1
    adds r5, #1
    cmp r5, #4
    bne $ma_pad
$ma_aligned:
    mov r4, r0
    adds r0, #8
    bl $negate
    mov r7, r0
    ldr r5, =$heap_bin
    ldr r5, [r5, #8]
$ma_walk:
    ldr r6, [r5, #4]
    cmp r6, #0
    beq $ma_grow
    adds r3, r6, r7
    bcc $ma_next
    ldr r0, [r5, #8]
    ldr r1, [r5, #12]
    str r1, [r0, #12]
    str r0, [r1, #8]
    adds r6, #1
    str r6, [r5, #4]
    mov r0, r5
    adds r0, #8
    pop {r4, r5, r6, r7, pc}
$ma_next:
    ldr r5, [r5, #8]
    b $ma_walk
$ma_grow:
    ldr r5, =$heap_top_var
    ldr r6, [r5]
    mov r0, r6
    adds r0, r0, r4
    adds r0, #8
    ldr r1, =$neg_heap_limit
    adds r3, r0, r1
    bcs $ma_oom
    str r0, [r5]
    movs r3, #1
    str r3, [r0, #4]
    mov r3, r4
    adds r3, #8
    adds r3, #1
    str r3, [r6, #4]
    movs r3, #0
    str r3, [r6]
    mov r0, r6
    adds r0, #8
    pop {r4, r5, r6, r7, pc}
$ma_oom:
    movs r0, #0
    pop {r4, r5, r6, r7, pc}
    .pool

; clear the busy bit, then forward-coalesce: an even size field in the
; following chunk means free, so that chunk is unlinked from the bin
; (fd.bk := bk first, then the bk.fd mirror) and absorbed. Finally the
; merged chunk is pushed at the head of the bin.
$free: ;@fn
    push {r4, r5, r6, r7, lr}
    mov r4, r0
    subs r4, #8
    ldr r5, [r4, #4]
    subs r5, #1
    str r5, [r4, #4]
    adds r6, r4, r5
    ldr r7, [r6, #4]
    ldr r3, =$heap_scratch
    str r7, [r3]
    ldrb r3, [r3]
$fr_mod2:
    cmp r3, #2
    bcc $fr_busy_test
    subs r3, #2
    b $fr_mod2
$fr_busy_test:
    cmp r3, #0
    bne $fr_insert
    ldr r0, [r6, #8]
    ldr r1, [r6, #12]
    str r1, [r0, #12]
    str r0, [r1, #8]
    adds r5, r5, r7
    str r5, [r4, #4]
$fr_insert:
    ldr r6, =$heap_bin
    ldr r7, [r6, #8]
    str r7, [r4, #8]
    str r6, [r4, #12]
    str r4, [r7, #12]
    str r4, [r6, #8]
    pop {r4, r5, r6, r7, pc}
    .pool
"""

_TABLES = """
    .align 2
$hexdigits:
    .ascii "0123456789abcdef"
    .align 2
$decpows:
{decpows}
"""

_COMPTAB = """
    .align 2
$comptab:
{comptab}
"""


def library_source(*, include_heap: bool = True) -> str:
    """Assembly source of one library instance, ``$``-sigil form."""
    src = _IO_AND_STRINGS
    if include_heap:
        src += _HEAP
    src += _TABLES.format(decpows=_decpow_lines())
    if include_heap:
        src += _COMPTAB.format(comptab=_comptab_lines())
    return src


def instantiate(template: str, prefix: str) -> str:
    """Resolve the ``$`` label sigils to a concrete symbol prefix."""
    return template.replace("$", prefix)


def data_source(*, include_heap: bool = True, heap_base: int = 0) -> str:
    """Static cells the library needs, placed in the owning world's RAM."""
    src = """
    .align 2
$phw_tmp:
    .word 0
"""
    if include_heap:
        src += f"""
$heap_scratch:
    .word 0
$heap_top_var:
    .word 0x{heap_base:08x}
$heap_bin:
    .word 0, 0, $heap_bin, $heap_bin
"""
    return src


def library_externs(prefix: str, *, uart_base: int,
                    heap_limit: int | None = None) -> dict:
    """Constant externs one library instance resolves against."""
    ext = {prefix + "uart_base": uart_base}
    if heap_limit is not None:
        ext[prefix + "neg_heap_limit"] = (1 << 32) - heap_limit
    return ext
