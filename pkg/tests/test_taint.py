import random

import pytest

from conftest import SYNTHETIC_BASE, corpus_image, corpus_program, make_image
from hashswap.emulator import MASK64, SENTINEL, STACK_TOP, Frame, Hook, Machine, layout_named
from hashswap.errors import TargetNeverCalled
from hashswap.identify import IdentifiedPrimitive
from hashswap.taint import (
    DERIVED, DIGEST, HEAP, STACK, STATIC, UNKNOWN, Anchor, Cell, TaintedBuffer, TaintMap, TaintReport,
    aggregate, classify, propagate, taint_run, union, union_buffers,
)
from hashswap.x86 import Imm, Mem, Reg, assemble

ARGV = [b'Hello, world!']
GAS = 5_000_000


def _primitive(fixture):
    routine = fixture['weak_routines'][0]
    return IdentifiedPrimitive(int(routine['entry'], 16), routine['algorithm'], layout_named(routine['layout']),
                               routine['digest_size'], tuple(int(s, 16) for s in routine['call_sites']))


def _scope(name, fixtures):
    return taint_run(corpus_image(name), _primitive(fixtures[name]), ARGV, b'', GAS, corpus_program(name))


def test_printer_buffers(fixtures):
    report = _scope('md5-printer', fixtures)
    assert report.buffers == [
        TaintedBuffer(STACK, 0x400629, 0x20, 16),
        TaintedBuffer(STACK, 0x400629, 0x30, 32),
    ]
    assert report.frames == [(0x400629, 0x60)]


def test_heap_buffer_is_named_by_allocation_site(fixtures):
    report = _scope('md5-ilo-O2-heap', fixtures)
    heap = [b for b in report.buffers if b.kind == HEAP]
    assert heap
    assert heap[0].location == 0x401095
    assert heap[0].old_size >= 16


def test_static_buffer_is_named_by_address(fixtures):
    report = _scope('md5-ilo-O2-static', fixtures)
    static = [b for b in report.buffers if b.kind == STATIC]
    digest = [b for b in static if b.location == 0x404040]
    assert digest and digest[0].old_size >= 16


def test_target_never_called(fixtures):
    unused = IdentifiedPrimitive(0x400629 + 0x1000, 'MD5', layout_named('ILO'), 16)
    with pytest.raises(TargetNeverCalled):
        taint_run(corpus_image('md5-printer'), unused, ARGV, b'', GAS, corpus_program('md5-printer'))


def _cells(kind, key, offsets, origin, base=0):
    return {(kind, key, base, offset): Cell(Anchor(kind, key, offset, base), origin) for offset in offsets}


def test_aggregate_splits_digest_from_derived_bytes():
    cells = {}
    cells.update(_cells(STACK, 0x400629, range(0x20, 0x30), DIGEST))
    cells.update(_cells(STACK, 0x400629, range(0x30, 0x50), DERIVED))
    cells.update(_cells(HEAP, 0x401095, range(0, 4), DERIVED, base=0x10000000))
    cells.update(_cells(STATIC, 0, range(0x404040, 0x404050), DIGEST))
    cells.update(_cells(UNKNOWN, 0, range(0x100, 0x200), DIGEST))
    assert aggregate(cells, 16) == [
        TaintedBuffer(STACK, 0x400629, 0x20, 16),
        TaintedBuffer(STACK, 0x400629, 0x30, 32),
        TaintedBuffer(STATIC, 0x404040, 0, 16),
    ]


def test_aggregate_names_heap_runs_by_site():
    cells = _cells(HEAP, 0x401095, range(0, 20), DIGEST, base=0x10000000)
    assert aggregate(cells, 16) == [TaintedBuffer(HEAP, 0x401095, 0, 20)]


def test_union_keeps_largest():
    small = TaintedBuffer(HEAP, 0x401095, 0, 16)
    large = TaintedBuffer(HEAP, 0x401095, 0, 24)
    assert union_buffers([small, large, small]) == [large]

    target = IdentifiedPrimitive(0x400616, 'MD5', layout_named('ILO'), 16)
    first = TaintReport(target, [small], [(0x400629, 0x60)])
    second = TaintReport(target, [large, TaintedBuffer(STACK, 0x400629, 0x20, 16)], [(0x401000, 0x40)])
    merged = union([first, second])
    assert merged.target == target
    assert merged.buffers == [large, TaintedBuffer(STACK, 0x400629, 0x20, 16)]
    assert merged.frames == [(0x400629, 0x60), (0x401000, 0x40)]
    with pytest.raises(ValueError):
        union([])


REGS = ['rax', 'rbx', 'rcx', 'rdx', 'rsi', 'rdi']
LOW = {'rax': 'eax', 'rbx': 'ebx', 'rcx': 'ecx', 'rdx': 'edx', 'rsi': 'esi', 'rdi': 'edi'}
SLOTS = 4
FRAME = STACK_TOP - 0x1000    # rbp
DIGEST_AT = STACK_TOP - 0x2000  # r15
TABLE_AT = STACK_TOP - 0x3000   # r14
# nonnegative add/lea/mov chains of at most 50 steps cannot cancel a +1 / +2**13 shift
PERTURBATION = (1, 1 << 13)


def _random_program(rng, pointers):
    program = []
    length = rng.randint(1, 49)
    while len(program) < length:
        dst, src = rng.choice(REGS), rng.choice(REGS)
        slot = Mem(8, 'rbp', disp=-8 * (rng.randrange(SLOTS) + 1))
        choice = rng.randrange(10 if pointers else 8)
        if choice == 0:
            program.append(('mov', Reg(dst), Reg(src)))
        elif choice == 1:
            program.append(('add', Reg(dst), Reg(src)))
        elif choice == 2:
            program.append(('xor', Reg(dst), Reg(dst)))
        elif choice == 3:
            program.append(('mov', Reg(dst), Imm(rng.randrange(256), 8)))
        elif choice == 4:
            program.append(('lea', Reg(dst), Mem(8, src, disp=8)))
        elif choice == 5:
            program.append(('mov', slot, Reg(src)))
        elif choice == 6:
            program.append(('mov', Reg(dst), slot))
        elif choice == 7:
            program.append(('mov', Reg(dst), Mem(8, 'r15', disp=8 * rng.randrange(2))))
        elif choice == 8:
            program.append(('xor', Reg(dst), Reg(src)))
        else:
            program.append(('and', Reg(src), Imm(0xff, 8)))
            program.append(('movzx', Reg(LOW[dst]), Mem(1, 'r14', src)))
    return b''.join(assemble(mnemonic, *operands).raw for mnemonic, *operands in program) + b'\xc3'


class _Follow(Hook):
    def __init__(self):
        self.taint = TaintMap()

    def after(self, machine, step):
        propagate(machine, self.taint, step, _anchor)


def _anchor(vaddr):
    return Anchor(STACK, 0, vaddr)


def _execute(code, registers, slots, digest, table):
    follow = _Follow()
    machine = Machine(make_image(code), 1000, hooks=[follow])
    for name, value in zip(REGS, registers):
        machine.set(name, value)
    machine.set('rbp', FRAME)
    machine.set('r14', TABLE_AT)
    machine.set('r15', DIGEST_AT)
    for i, value in enumerate(slots):
        machine.memory.write_int(FRAME - 8 * (i + 1), 8, value)
    for i, value in enumerate(digest):
        machine.memory.write_int(DIGEST_AT + 8 * i, 8, value)
    machine.memory.write(TABLE_AT, table)
    follow.taint.set_mem(DIGEST_AT, 16, True, _anchor, DIGEST)
    machine.regs[4] = STACK_TOP - 0x4000
    machine.push(SENTINEL)
    machine.rip = SYNTHETIC_BASE
    machine.run()
    return machine, follow.taint


@pytest.mark.parametrize('pointers', [False, True])
@pytest.mark.parametrize('seed', range(250))
def test_taint_covers_every_digest_dependent_value(seed, pointers):
    rng = random.Random(seed)
    code = _random_program(rng, pointers)
    registers = [rng.getrandbits(64) for _ in REGS]
    slots = [rng.getrandbits(64) for _ in range(SLOTS)]
    digest = [rng.getrandbits(64) for _ in PERTURBATION]
    table = bytes(rng.randrange(256) for _ in range(256))
    shifted = [(value + delta) & MASK64 for value, delta in zip(digest, PERTURBATION)]

    first, taint = _execute(code, registers, slots, digest, table)
    second, _ = _execute(code, registers, slots, shifted, table)

    addresses = [FRAME - 8 * (i + 1) for i in range(SLOTS)]
    changed = {r for r in REGS if first.get(r) != second.get(r)} | \
              {a for a in addresses if first.memory.read(a, 8) != second.memory.read(a, 8)}
    tainted = {r for r in REGS if taint.reg(r)} | {a for a in addresses if taint.mem(a, 8)}
    if pointers:
        assert changed <= tainted
    else:
        assert changed == tainted


def test_classify():
    image = make_image(data=bytes(64))
    machine = Machine(image, 100)
    machine.root = Frame(STACK_TOP - 0x100, image.entry_point, SENTINEL)
    machine.regs[4] = STACK_TOP - 0x200
    heap = machine.allocate(16)

    kind, section = classify(0x402010, machine, image)
    assert kind == STATIC and section.name == '.data'
    kind, allocation = classify(heap + 4, machine, image)
    assert kind == HEAP and allocation.base == heap
    assert classify(STACK_TOP - 0x180, machine, image) == (STACK, machine.root)
    assert classify(0x12345, machine, image) == (UNKNOWN, None)
