import hashlib
import random

import pytest

from conftest import COPY_ENTRY, SYNTHETIC_BASE, WORKER_ENTRY, corpus_image, corpus_program, make_image
from hashswap.bundle import load_bundle
from hashswap.cli import execute
from hashswap.disasm import disassemble
from hashswap.emulator import layout_named
from hashswap.errors import (DisplacementOverflow, HashswapError, NoPrologueFound, NonImmediateAllocationSize,
                             OffsetInsideExpandedTail, RewriteError, RoutineTooSmall, StaleEdit)
from hashswap.identify import IdentifiedPrimitive
from hashswap.rewrite import (
    HOOK_SIZE, TRAP, BufferExpansion, ChangeSet, Rewriter, UserEdit, _immediate_load, apply, build_changeset,
    compute_new_size, hook, load_changes, parse_changes, plan_frame_expansion, recompute_rip_displacement,
    recompute_stack_offset, relocate_routine, remap_static_buffer, rewrite_heap_site, rewrite_stack_frame,
)
from hashswap.taint import STACK, TaintedBuffer, TaintReport, taint_run
from hashswap.x86 import decode_all, encode

GAS = 5_000_000
PRINTER_MAIN = 0x400629
PRINTER_MD5 = IdentifiedPrimitive(0x400616, 'MD5', layout_named('ILO'), 16, (0x40069a,))
PRINTER_BUFFERS = [TaintedBuffer(STACK, PRINTER_MAIN, 0x20, 16), TaintedBuffer(STACK, PRINTER_MAIN, 0x30, 32)]
PRINTER_CHANGES = 'logic 4006dc 837dac0f -> 837dac1f\nlogic 40070d 837dac0f -> 837dac1f\n'


def _expand(*sizes, owner=PRINTER_MAIN):
    return [BufferExpansion(TaintedBuffer(STACK, owner, offset, old), new) for offset, old, new in sizes]


def _by_vaddr(instructions):
    return {insn.vaddr: insn for insn in instructions}


# arithmetic

@pytest.mark.parametrize('old,target,secure,expected', [
    (16, 16, 32, 32),
    (32, 16, 32, 64),
    (5, 16, 32, 10),
    (20, 20, 32, 32),
    (33, 16, 32, 66),
])
def test_compute_new_size(old, target, secure, expected):
    assert compute_new_size(old, target, secure) == expected


def test_compute_new_size_rounds_up():
    for target in (16, 20):
        for old in range(1, 257):
            new = compute_new_size(old, target, 32)
            assert new * target >= old * 32
            assert (new - 1) * target < old * 32
    with pytest.raises(ValueError):
        compute_new_size(0, 16, 32)


def test_rip_displacement():
    assert recompute_rip_displacement(0x100, 0x401000, 0x501000) == -0xFFF00
    with pytest.raises(DisplacementOverflow):
        recompute_rip_displacement(0, 0x401000, 0x401000 + 2 ** 32)


def test_rip_displacement_keeps_target():
    rng = random.Random(7)
    for _ in range(10000):
        old_disp = rng.randrange(-2 ** 31, 2 ** 31)
        old_end = rng.randrange(0x400000, 0x800000)
        new_end = old_end + rng.randrange(-2 ** 32, 2 ** 32)
        target = old_end + old_disp
        if -2 ** 31 <= target - new_end < 2 ** 31:
            assert new_end + recompute_rip_displacement(old_disp, old_end, new_end) == target
        else:
            with pytest.raises(DisplacementOverflow):
                recompute_rip_displacement(old_disp, old_end, new_end)


@pytest.mark.parametrize('old,expected', [(0x0c, 0x0c), (0x20, 0x20), (0x30, 0x40), (0x51, 0x81)])
def test_stack_offset(old, expected):
    assert recompute_stack_offset(old, [(0x20, 16, 32), (0x30, 32, 64)]) == expected


def test_stack_offset_inside_buffer():
    with pytest.raises(OffsetInsideExpandedTail):
        recompute_stack_offset(0x28, [(0x20, 16, 32), (0x30, 32, 64)])


def _random_frame(rng):
    buffers, cursor = [], rng.randrange(0, 0x20)
    for _ in range(rng.randint(1, 4)):
        old = rng.randint(1, 0x40)
        buffers.append((cursor, old, old + rng.randint(0, 0x40)))
        cursor += old + rng.randrange(0, 0x20)
    return buffers


def _walk_frame(buffers, size):
    """New position of every old frame byte, copying the old frame one byte
    at a time and inserting each buffer's extra bytes after its last byte."""
    owner = {start + j: (start, j, old, new) for start, old, new in buffers for j in range(old)}
    moved, cursor = {}, 0
    for byte in range(size):
        moved[byte] = cursor
        cursor += 1
        if byte in owner:
            _start, j, old, new = owner[byte]
            if j == old - 1:
                cursor += new - old
    return moved, owner


def test_stack_offset_matches_byte_walk():
    rng = random.Random(11)
    for _ in range(1000):
        buffers = _random_frame(rng)
        size = buffers[-1][0] + buffers[-1][1] + 0x40
        moved, owner = _walk_frame(buffers, size)
        occupied = set(moved.values())
        for start, old, new in buffers:
            assert occupied.isdisjoint(range(moved[start] + old, moved[start] + new))
        offset = rng.randrange(0, size)
        if offset in owner and owner[offset][1] > 0:
            with pytest.raises(OffsetInsideExpandedTail):
                recompute_stack_offset(offset, buffers)
            continue
        assert recompute_stack_offset(offset, buffers) == moved[offset]


def test_frame_expansion():
    assert plan_frame_expansion(0x60, _expand((0x20, 16, 32), (0x30, 32, 64))) == 0x90
    assert plan_frame_expansion(0x40, _expand((0x10, 15, 32))) == 0x60
    assert plan_frame_expansion(0x60, []) == 0x60


# stack frames

def test_worker_frame_rewrite(synthetic):
    routine = disassemble(synthetic).routines[WORKER_ENTRY]
    before = _by_vaddr(routine.instructions)
    after = _by_vaddr(rewrite_stack_frame(routine, list(routine.instructions),
                                          _expand((0x10, 16, 32), owner=WORKER_ENTRY)))
    assert after[WORKER_ENTRY + 0x01].operands[1].value == 0x50   # sub rsp
    assert after[WORKER_ENTRY + 0x2c].operands[1].value == 0x50   # add rsp
    for unchanged in (0x05, 0x0a, 0x1b):
        assert after[WORKER_ENTRY + unchanged] == before[WORKER_ENTRY + unchanged]
    assert after[WORKER_ENTRY + 0x0f].memory_operand().disp == 0x40
    assert after[WORKER_ENTRY + 0x17].memory_operand().disp == 0x40
    assert after[WORKER_ENTRY + 0x27].memory_operand().disp == 0x30


def test_printer_frame_rewrite(printer_program):
    routine = printer_program.routines[PRINTER_MAIN]
    before = _by_vaddr(routine.instructions)
    after = _by_vaddr(rewrite_stack_frame(routine, list(routine.instructions),
                                          _expand((0x20, 16, 32), (0x30, 32, 64))))
    assert after[0x40062d].operands[1].value == 0x90
    assert after[0x40063b] == before[0x40063b]
    assert after[0x40068c].memory_operand().disp == -0x70
    assert after[0x400690].memory_operand().disp == -0x80
    assert after[0x4006ad].memory_operand().disp == -0x70
    assert after[0x4006bd].memory_operand().disp == -0x50
    assert encode(after[0x4006b5]) == bytes.fromhex('8b957cffffff')
    changed = [vaddr for vaddr in before if before[vaddr] != after[vaddr]]
    assert len(changed) == 12


def test_frame_rewrite_errors(synthetic):
    program = disassemble(synthetic)
    worker = program.routines[WORKER_ENTRY]
    with pytest.raises(NoPrologueFound):
        copy = program.routines[COPY_ENTRY]
        rewrite_stack_frame(copy, list(copy.instructions), _expand((0x10, 16, 32), owner=COPY_ENTRY))
    with pytest.raises(OffsetInsideExpandedTail):
        rewrite_stack_frame(worker, list(worker.instructions), _expand((0x28, 16, 32), owner=WORKER_ENTRY))
    with pytest.raises(RewriteError):
        rewrite_stack_frame(worker, list(worker.instructions),
                            _expand((0x10, 16, 32), (0x18, 16, 32), owner=WORKER_ENTRY))


# heap and static buffers

def test_malloc_size_grows():
    edits = rewrite_heap_site(corpus_program('md5-ilo-O2-heap'), 0x401095, 16, 32)
    assert [(insn.vaddr, insn.operands[1].value) for insn in edits] == [(0x401090, 0x20)]


def test_calloc_count_scales():
    edits = rewrite_heap_site(corpus_program('md5-ilo-O2-calloc'), 0x40109a, 16, 32)
    assert [(insn.vaddr, insn.operands[1].value) for insn in edits] == [(0x401095, 8)]


def test_heap_site_errors():
    program = corpus_program('md5-ilo-O2-heap')
    with pytest.raises(NonImmediateAllocationSize, match='strlen'):
        rewrite_heap_site(program, 0x401086, 16, 32)
    with pytest.raises(NonImmediateAllocationSize):
        rewrite_heap_site(program, 0x401090, 16, 32)
    with pytest.raises(NonImmediateAllocationSize, match='smaller'):
        rewrite_heap_site(program, 0x401095, 32, 64)


def test_size_load_does_not_cross_calls():
    # mov edi, 0x10; call 0x40100a (nearest first)
    block = list(decode_all(bytes.fromhex('bf10000000' 'e800000000'), 0x401000))[::-1]
    with pytest.raises(NonImmediateAllocationSize, match='call at 0x401005'):
        _immediate_load(block, 'rdi', 0x40100a)
    assert _immediate_load(block[1:], 'rdi', 0x40100a).operands[1].value == 0x10


def test_static_absolute_references_move():
    edits, diagnostics = remap_static_buffer(corpus_program('md5-ilo-O2-static'), 0x404040, 16, 0x500000)
    moved = _by_vaddr(edits)
    assert moved[0x401089].operands[1].value == 0x500000
    assert moved[0x401095].memory_operand().disp == 0x500000
    assert diagnostics == []


def test_static_rip_references_move():
    edits, _diagnostics = remap_static_buffer(corpus_program('md5-ilo-O2-riprel'), 0x404040, 16, 0x500000)
    moved = _by_vaddr(edits)
    assert moved[0x401089].rip_target() == 0x500000
    assert moved[0x401097].rip_target() == 0x500000


def test_arithmetic_immediate_is_reported():
    code = bytes.fromhex('b840204000' '0540204000' 'c3')  # mov eax, 0x402040; add eax, 0x402040; ret
    program = disassemble(make_image(code, data=bytes(64)))
    edits, diagnostics = remap_static_buffer(program, 0x402040, 16, 0x403000)
    assert [(insn.vaddr, insn.operands[1].value) for insn in edits] == [(0x401000, 0x403000)]
    assert [(d.kind, d.vaddr) for d in diagnostics] == [('ambiguous-immediate', 0x401005)]


# relocation and hooks

def test_relocated_worker_keeps_targets(synthetic):
    routine = disassemble(synthetic).routines[WORKER_ENTRY]
    relocation = relocate_routine(routine, routine.instructions, 0x500000)
    assert relocation.entry == WORKER_ENTRY
    assert len(relocation.code) == 0x32
    moved = list(decode_all(relocation.code, 0x500000))
    lea = next(insn for insn in moved if insn.rip_target() is not None)
    assert lea.rip_target() == 0x401162
    jle = next(insn for insn in moved if insn.mnemonic == 'jle')
    assert jle.branch_target() == relocation.addresses[WORKER_ENTRY + 0x2c]


def test_relocated_start_calls_original_worker(synthetic):
    routine = disassemble(synthetic).routines[SYNTHETIC_BASE]
    relocation = relocate_routine(routine, routine.instructions, 0x500000)
    moved = list(decode_all(relocation.code, 0x500000))
    assert [insn.mnemonic for insn in moved] == ['mov', 'call', 'jmp']
    assert moved[1].branch_target() == WORKER_ENTRY
    assert moved[2].branch_target() == 0x500000


def test_short_branch_widens(synthetic):
    routine = disassemble(synthetic).routines[WORKER_ENTRY]
    padding = list(decode_all(b'\x90' * 140, 0x480000))
    items = list(routine.instructions)
    split = next(i for i, insn in enumerate(items) if insn.mnemonic == 'jle') + 1
    relocation = relocate_routine(routine, items[:split] + padding + items[split:], 0x500000)
    moved = list(decode_all(relocation.code, 0x500000))
    jle = next(insn for insn in moved if insn.mnemonic == 'jle')
    assert jle.raw[:2] == b'\x0f\x8e'
    assert jle.branch_target() == relocation.addresses[WORKER_ENTRY + 0x2c]


def test_hook(synthetic):
    program = disassemble(synthetic)
    worker = program.routines[WORKER_ENTRY]
    vaddr, data = hook(worker, 0x500000, True)
    assert vaddr == WORKER_ENTRY
    assert data[0] == 0xe9
    assert int.from_bytes(data[1:5], 'little', signed=True) == 0x500000 - (WORKER_ENTRY + HOOK_SIZE)
    assert data[5:] == TRAP * (0x32 - HOOK_SIZE)
    assert hook(worker, 0x500000, False)[1] == data[:HOOK_SIZE]
    with pytest.raises(DisplacementOverflow):
        hook(worker, WORKER_ENTRY + 2 ** 32, False)


def test_hook_needs_five_bytes():
    tiny = disassemble(make_image(b'\xc3')).routines[SYNTHETIC_BASE]
    with pytest.raises(RoutineTooSmall):
        hook(tiny, 0x500000, False)


# change sets

def test_parse_changes(tmp_path):
    edits = parse_changes('# widen both loops\n' + PRINTER_CHANGES)
    assert edits == [
        UserEdit(0x4006dc, bytes.fromhex('837dac0f'), bytes.fromhex('837dac1f')),
        UserEdit(0x40070d, bytes.fromhex('837dac0f'), bytes.fromhex('837dac1f')),
    ]
    assert edits[0].render() == 'logic 4006dc 837dac0f -> 837dac1f'
    path = tmp_path / 'printer.changes'
    path.write_text(PRINTER_CHANGES)
    assert load_changes(str(path)) == edits
    assert load_changes(None) == []
    with pytest.raises(HashswapError):
        load_changes(str(tmp_path / 'missing.changes'))


@pytest.mark.parametrize('line', [
    'logic 4006dc 837dac0f 837dac1f',
    'patch 4006dc 837dac0f -> 837dac1f',
    'logic xyz 837dac0f -> 837dac1f',
    'logic 4006dc 837dac0 -> 837dac1f',
])
def test_parse_changes_errors(line):
    with pytest.raises(HashswapError):
        parse_changes(line)


def test_stale_edits(printer):
    current = ChangeSet(PRINTER_MD5, 'SHA-256', edits=parse_changes(PRINTER_CHANGES))
    current.validate(printer)
    with pytest.raises(StaleEdit):
        ChangeSet(PRINTER_MD5, 'SHA-256', edits=[UserEdit(0x4006dc, b'\x90', b'\xcc')]).validate(printer)
    with pytest.raises(StaleEdit):
        ChangeSet(PRINTER_MD5, 'SHA-256', edits=[UserEdit(0x10, b'\x90', b'\xcc')]).validate(printer)


def test_build_changeset():
    changeset = build_changeset(TaintReport(PRINTER_MD5, PRINTER_BUFFERS), [], 'SHA-256')
    assert [(e.buffer.offset, e.new_size, e.delta) for e in changeset.expansions] == [(0x20, 32, 16), (0x30, 64, 32)]


def test_logic_edit_must_start_on_instruction(printer, printer_program):
    edit = UserEdit(0x4006dd, printer.read(0x4006dd, 3), b'\x90\x90\x90')
    changeset = ChangeSet(PRINTER_MD5, 'SHA-256', edits=[edit])
    with pytest.raises(RewriteError, match='start'):
        Rewriter(printer, printer_program, changeset, load_bundle()).plan()


def test_logic_edit_outside_code(printer, printer_program):
    edit = UserEdit(0x400840, printer.read(0x400840, 2), b'\x00\x00')
    changeset = ChangeSet(PRINTER_MD5, 'SHA-256', edits=[edit])
    with pytest.raises(RewriteError, match='outside every recovered routine'):
        Rewriter(printer, printer_program, changeset, load_bundle()).plan()


def test_bundle_must_match_replacement(printer, printer_program):
    changeset = ChangeSet(PRINTER_MD5, 'SHA-512')
    with pytest.raises(RewriteError, match='SHA-512'):
        Rewriter(printer, printer_program, changeset, load_bundle()).plan()


# whole-binary rewrite

def test_printer_rewrite(printer, printer_program, fixtures):
    changeset = build_changeset(TaintReport(PRINTER_MD5, PRINTER_BUFFERS, [(PRINTER_MAIN, 0x60)]),
                                parse_changes(PRINTER_CHANGES), 'SHA-256')
    rewritten, plan = apply(printer, printer_program, changeset, load_bundle())

    summary = plan.summary
    assert summary.logic == 2
    assert summary.buffer == 12
    assert summary.routines_relocated == 1
    assert summary.routine > 0
    assert summary.automated_share == (summary.routine + 12) / (summary.routine + 14)
    assert summary.bytes_added == len(rewritten.raw) - len(printer.raw)
    assert summary.injected_code == len(plan.code)
    assert summary.bytes_added <= 13 * 1024
    assert summary.injected_code <= 4 * 1024

    assert PRINTER_MAIN in plan.relocations
    assert bytes.fromhex('8b957cffffff') in plan.code
    assert rewritten.read(PRINTER_MD5.entry, 1) == b'\xe9'
    assert rewritten.read(PRINTER_MAIN, 1) == b'\xe9'

    trace = execute(rewritten, [b'Hello, world!'], b'', GAS)
    assert trace.exit_status == 0
    assert trace.stdout.decode() == fixtures['md5-printer']['rewritten_stdout']
    assert trace.stdout.decode() == hashlib.sha256(b'Hello, world!').hexdigest() + '\n'


def test_static_variant_rewrite(fixtures):
    name = 'md5-ilo-O2-static'
    image, program = corpus_image(name), corpus_program(name)
    fixture = fixtures[name]
    routine = fixture['weak_routines'][0]
    target = IdentifiedPrimitive(int(routine['entry'], 16), 'MD5', layout_named('ILO'), 16,
                                 tuple(int(s, 16) for s in routine['call_sites']))
    report = taint_run(image, target, [b'Hello, world!'], b'', GAS, program)
    changeset = build_changeset(report, parse_changes('\n'.join(fixture['changes'])), 'SHA-256')
    rewritten, plan = apply(image, program, changeset, load_bundle())
    assert 0x404040 in plan.static_slots
    assert min(plan.static_slots.values()) == plan.layout.data_vaddr
    trace = execute(rewritten, [b'Hello, world!'], b'', GAS)
    assert trace.stdout.decode() == fixture['rewritten_stdout']
