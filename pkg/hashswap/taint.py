"""
Digest taint scoping
====================

Runs the program on a test input with an instrumentation hook. When the
identified routine returns, the bytes of its output buffer are tainted; taint
then follows data flow (and loads through tainted pointers) until the program
exits. Every tainted byte remembers a stable anchor taken when it was
written, so buffers can be named by frame offset, allocation site or static
address after the run is over.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from hashswap.disasm import Program, disassemble
from hashswap.elf import BinaryImage
from hashswap.emulator import RED_ZONE, STACK_TOP, Frame, Hook, Machine, Step, prepare_program
from hashswap.errors import Diagnostic, InvariantViolation, RecursiveTarget, TargetNeverCalled
from hashswap.identify import IdentifiedPrimitive
from hashswap.libc import Copy, Derive, RegSource, Source
from hashswap.x86 import REGISTERS, STRING_OPS, Instruction, Mem, Reg, full_reg, reg_size

logger = logging.getLogger(__name__)

STATIC, HEAP, STACK, UNKNOWN = 'static', 'heap', 'stack', 'unknown'
DIGEST, DERIVED = 'digest', 'derived'

_MOVES = {'mov', 'movabs', 'movzx', 'movsx', 'movsxd'}
_ARITH = {'add', 'sub', 'adc', 'sbb', 'and', 'or', 'xor'}
_SHIFTS = {'shl', 'sal', 'shr', 'sar', 'rol', 'ror'}
_SAME_IN_PLACE = {'inc', 'dec', 'not', 'neg', 'bswap'}


@dataclass(frozen=True)
class Anchor:
    """Where a byte lives, in coordinates that survive the run.

    stack: ``key`` is the owning routine entry and ``offset`` is relative to
    that routine's post-prologue stack pointer; heap: ``key`` is the
    allocation call site, ``base`` the runtime base and ``offset`` the
    position inside the allocation; static: ``offset`` is the vaddr.
    """

    kind: str
    key: int
    offset: int
    base: int = 0


@dataclass(frozen=True)
class Cell:
    anchor: Anchor
    origin: str


@dataclass(frozen=True)
class TaintedBuffer:
    kind: str
    location: int
    offset: int
    old_size: int

    @property
    def key(self) -> Tuple[str, int, int]:
        return self.kind, self.location, self.offset


@dataclass
class TaintReport:
    target: IdentifiedPrimitive
    buffers: List[TaintedBuffer] = field(default_factory=list)
    frames: List[Tuple[int, int]] = field(default_factory=list)
    diagnostics: List[Diagnostic] = field(default_factory=list)


def classify(vaddr: int, machine: Machine, image: BinaryImage) -> Tuple[str, object]:
    """Static, Heap, Stack or Unknown, with the owning section, allocation
    or shadow frame."""
    found = []
    for section in image.data_sections():
        if section.contains(vaddr):
            found.append((STATIC, section))
            break
    for allocation in machine.live_allocations():
        if allocation.contains(vaddr):
            found.append((HEAP, allocation))
            break
    frame = _stack_frame(vaddr, machine)
    if frame is not None:
        found.append((STACK, frame))
    if len(found) > 1:
        raise InvariantViolation(f"address {vaddr:#x} classifies as both {found[0][0]} and {found[1][0]}")
    return found[0] if found else (UNKNOWN, None)


def _stack_frame(vaddr: int, machine: Machine) -> Optional[Frame]:
    """Frame i spans from frame i+1's return-address slot (exclusive) up to
    and including its own; the innermost frame reaches down to the red zone."""
    frames = machine.frames()
    for i in range(len(frames) - 1, -1, -1):
        lower = frames[i + 1].entry_sp + 8 if i + 1 < len(frames) else machine.rsp - RED_ZONE
        upper = frames[i].entry_sp + 8 if i else STACK_TOP
        if lower <= vaddr < upper:
            return frames[i]
    return None


def _slot(name: str) -> int:
    return REGISTERS[full_reg(name)][0]


class TaintMap:
    """Register taint per 64-bit register, one flag bit, byte-granular memory."""

    def __init__(self):
        self.registers: Set[int] = set()
        self.flags = False
        self.cells: Dict[int, Cell] = {}

    # -- queries -------------------------------------------------------------

    def reg(self, name: str) -> bool:
        return name != 'rip' and _slot(name) in self.registers

    def mem(self, vaddr: int, size: int) -> bool:
        return any(vaddr + i in self.cells for i in range(size))

    def address(self, mem: Mem) -> bool:
        return bool((mem.base and self.reg(mem.base)) or (mem.index and self.reg(mem.index)))

    def source(self, source: Source) -> bool:
        if isinstance(source, RegSource):
            return self.reg(source.name)
        return self.mem(source.vaddr, source.size)

    # -- updates -------------------------------------------------------------

    def set_reg(self, name: str, tainted: bool):
        """32/64-bit writes replace the register's taint; narrower ones merge."""
        if tainted:
            self.registers.add(_slot(name))
        elif reg_size(name) >= 4:
            self.registers.discard(_slot(name))

    def set_mem(self, vaddr: int, size: int, tainted: bool, anchor_of, origin: str = DERIVED):
        for i in range(size):
            if tainted:
                self.cells[vaddr + i] = Cell(anchor_of(vaddr + i), origin)
            else:
                self.cells.pop(vaddr + i, None)

    def clear(self):
        self.registers.clear()
        self.flags = False
        self.cells.clear()


@dataclass
class _PendingCall:
    output: int
    return_address: int
    entry_sp: int


class TaintHook(Hook):
    def __init__(self, target: IdentifiedPrimitive, program: Program):
        self.target = target
        self.program = program
        self.image = program.image
        self.taint = TaintMap()
        self.pending: Optional[_PendingCall] = None
        self.introductions = 0
        self.unclassified: Set[int] = set()
        self._machine: Optional[Machine] = None

    # -- anchors -------------------------------------------------------------

    def anchor(self, vaddr: int) -> Anchor:
        kind, owner = classify(vaddr, self._machine, self.image)
        if kind == STACK:
            routine = self.program.routines.get(owner.callee)
            post_sp = owner.entry_sp + (routine.frame.post_prologue_sp if routine else 0)
            return Anchor(STACK, owner.callee, vaddr - post_sp)
        if kind == HEAP:
            return Anchor(HEAP, owner.site, vaddr - owner.base, owner.base)
        if kind == STATIC:
            return Anchor(STATIC, 0, vaddr)
        self.unclassified.add(vaddr)
        return Anchor(UNKNOWN, 0, vaddr)

    # -- hook interface --------------------------------------------------------

    def before(self, machine: Machine, insn: Instruction):
        if insn.vaddr != self.target.entry:
            return
        if self.pending is not None:
            raise RecursiveTarget(f"{self.target.algorithm} routine re-entered before returning", insn.vaddr)
        register = self.target.layout.register('O')
        self.pending = _PendingCall(machine.get(register), machine.memory.read_int(machine.rsp, 8), machine.rsp)

    def after(self, machine: Machine, step: Step):
        self._machine = machine
        propagate(machine, self.taint, step, self.anchor)
        pending = self.pending
        if pending is not None and machine.rip == pending.return_address \
                and machine.rsp == pending.entry_sp + 8 and (step.insn.is_return or step.libc is not None):
            self.taint.set_mem(pending.output, self.target.digest_size, True, self.anchor, DIGEST)
            self.introductions += 1
            self.pending = None
            logger.debug(f"tainted {self.target.digest_size} bytes at {pending.output:#x} "
                         f"on return to {pending.return_address:#x}")


# -- propagation ---------------------------------------------------------------

def _operand(taint: TaintMap, op, ea: Optional[int]) -> bool:
    if isinstance(op, Reg):
        return taint.reg(op.name)
    if isinstance(op, Mem):
        return taint.mem(ea, op.size) or taint.address(op)
    return False


def _write(taint: TaintMap, op, ea: Optional[int], tainted: bool, anchor_of):
    if isinstance(op, Reg):
        taint.set_reg(op.name, tainted)
    elif isinstance(op, Mem):
        taint.set_mem(ea, op.size, tainted, anchor_of)


def _libc(machine: Machine, taint: TaintMap, step: Step, anchor_of):
    effect = step.libc.effect
    for write in effect.writes:
        if isinstance(write, Copy):
            flags = [write.src + i in taint.cells for i in range(write.size)]
            for i, tainted in enumerate(flags):
                taint.set_mem(write.dst + i, 1, tainted, anchor_of)
        elif isinstance(write, Derive):
            taint.set_mem(write.dst, write.size, any(taint.source(s) for s in write.sources), anchor_of)
    if effect.ret is not None:
        taint.set_reg('rax', any(taint.source(s) for s in effect.ret_sources))


def propagate(machine: Machine, taint: TaintMap, step: Step, anchor_of) -> TaintMap:
    """Apply one executed instruction's data flow to ``taint``.

    ``step.regs`` is the register file before the instruction ran and
    ``step.address`` the effective address of its memory operand.
    """
    insn = step.insn
    m = insn.mnemonic
    ops = insn.operands
    ea = step.address

    if step.libc is not None:
        _libc(machine, taint, step, anchor_of)
        return taint

    if m in _MOVES:
        _write(taint, ops[0], ea, _operand(taint, ops[1], ea), anchor_of)
    elif m == 'lea':
        taint.set_reg(ops[0].name, taint.address(ops[1]))
    elif m in _ARITH:
        dst, src = ops
        if m in ('xor', 'sub') and isinstance(dst, Reg) and dst == src:
            _write(taint, dst, ea, False, anchor_of)
            taint.flags = False
        else:
            tainted = _operand(taint, dst, ea) or _operand(taint, src, ea)
            if m in ('adc', 'sbb'):
                tainted = tainted or taint.flags
            _write(taint, dst, ea, tainted, anchor_of)
            taint.flags = tainted
    elif m in ('cmp', 'test'):
        taint.flags = _operand(taint, ops[0], ea) or _operand(taint, ops[1], ea)
    elif m in _SAME_IN_PLACE:
        taint.flags = _operand(taint, ops[0], ea)
    elif m in _SHIFTS:
        tainted = _operand(taint, ops[0], ea) or _operand(taint, ops[1], ea)
        _write(taint, ops[0], ea, tainted, anchor_of)
        taint.flags = tainted
    elif m == 'imul' and len(ops) > 1:
        tainted = any(_operand(taint, op, ea) for op in ops[1:]) or (len(ops) == 2 and _operand(taint, ops[0], ea))
        _write(taint, ops[0], ea, tainted, anchor_of)
        taint.flags = tainted
    elif m in ('imul', 'mul'):
        tainted = taint.reg('rax') or _operand(taint, ops[0], ea)
        taint.set_reg('rax', tainted)
        taint.set_reg('rdx', tainted)
        taint.flags = tainted
    elif m in ('div', 'idiv'):
        tainted = taint.reg('rax') or taint.reg('rdx') or _operand(taint, ops[0], ea)
        taint.set_reg('rax', tainted)
        taint.set_reg('rdx', tainted)
    elif m in ('cdq', 'cqo'):
        taint.set_reg('rdx', taint.reg('rax'))
    elif m == 'xchg':
        a, b = _operand(taint, ops[0], ea), _operand(taint, ops[1], ea)
        _write(taint, ops[0], ea, b, anchor_of)
        _write(taint, ops[1], ea, a, anchor_of)
    elif m.startswith('cmov'):
        tainted = _operand(taint, ops[0], ea) or _operand(taint, ops[1], ea) or taint.flags
        _write(taint, ops[0], ea, tainted, anchor_of)
    elif m.startswith('set') and not insn.is_branch:
        _write(taint, ops[0], ea, taint.flags, anchor_of)
    elif m == 'push':
        tainted = _operand(taint, ops[0], ea)
        taint.set_mem(machine.rsp, 8, tainted, anchor_of)
    elif m == 'pop':
        _write(taint, ops[0], ea, taint.mem(step.regs[4], 8), anchor_of)
    elif m == 'leave':
        taint.set_reg('rbp', taint.mem(step.regs[5], 8))
    elif m == 'call':
        taint.set_mem(machine.rsp, 8, False, anchor_of)
    elif m in STRING_OPS:
        _string(machine, taint, step, anchor_of)
    return taint


def _string(machine: Machine, taint: TaintMap, step: Step, anchor_of):
    insn = step.insn
    _opcode, size = STRING_OPS[insn.mnemonic]
    count = step.regs[1] if insn.prefix else 1
    rdi, rsi = step.regs[7], step.regs[6]
    if insn.mnemonic.startswith('stos'):
        taint.set_mem(rdi, size * count, taint.reg('rax'), anchor_of)
    else:
        flags = [rsi + i in taint.cells for i in range(size * count)]
        for i, tainted in enumerate(flags):
            taint.set_mem(rdi + i, 1, tainted, anchor_of)


# -- aggregation ----------------------------------------------------------------

def aggregate(cells: Dict[int, Cell], digest_size: int) -> List[TaintedBuffer]:
    """Contiguous runs of tainted bytes, split where bytes copied from the
    digest meet derived bytes; runs shorter than the digest are dropped."""
    groups: Dict[Tuple[str, int, int], List[Tuple[int, str]]] = {}
    for cell in cells.values():
        anchor = cell.anchor
        if anchor.kind == UNKNOWN:
            continue
        groups.setdefault((anchor.kind, anchor.key, anchor.base), []).append((anchor.offset, cell.origin))

    buffers = []
    for (kind, key, _base), members in groups.items():
        members.sort()
        start, length, origin = members[0][0], 1, members[0][1]
        runs = []
        for offset, member_origin in members[1:]:
            if offset == start + length and member_origin == origin:
                length += 1
                continue
            runs.append((start, length))
            start, length, origin = offset, 1, member_origin
        runs.append((start, length))
        for run_start, run_length in runs:
            if run_length < digest_size:
                continue
            if kind == STACK:
                buffers.append(TaintedBuffer(STACK, key, run_start, run_length))
            elif kind == HEAP:
                buffers.append(TaintedBuffer(HEAP, key, 0, run_length))
            else:
                buffers.append(TaintedBuffer(STATIC, run_start, 0, run_length))
    return union_buffers(buffers)


def union_buffers(buffers: Iterable[TaintedBuffer]) -> List[TaintedBuffer]:
    """One buffer per anchor, keeping the largest observed size."""
    merged: Dict[Tuple[str, int, int], TaintedBuffer] = {}
    for buffer in buffers:
        known = merged.get(buffer.key)
        if known is None or buffer.old_size > known.old_size:
            merged[buffer.key] = buffer
    return sorted(merged.values(), key=lambda b: (b.kind, b.location, b.offset))


def _frames(buffers: Sequence[TaintedBuffer], program: Program) -> List[Tuple[int, int]]:
    entries = sorted({b.location for b in buffers if b.kind == STACK})
    return [(entry, program.routines[entry].frame.frame_size if entry in program.routines else 0)
            for entry in entries]


def taint_run(image: BinaryImage, target: IdentifiedPrimitive, argv: Sequence[bytes], stdin: bytes = b'',
              gas: int = 50_000_000, program: Optional[Program] = None) -> TaintReport:
    if program is None:
        program = disassemble(image)
    hook = TaintHook(target, program)
    machine = prepare_program(image, argv, stdin, gas, hooks=[hook])
    machine.run()
    if hook.introductions == 0:
        raise TargetNeverCalled(f"the test input never returned from the {target.algorithm} routine",
                                target.entry)

    report = TaintReport(target)
    report.buffers = aggregate(hook.taint.cells, target.digest_size)
    report.frames = _frames(report.buffers, program)
    for vaddr in sorted(hook.unclassified):
        if vaddr in hook.taint.cells:
            report.diagnostics.append(Diagnostic('unclassified-taint', vaddr))
    logger.info(f"{len(report.buffers)} digest buffers after {machine.instruction_count} instructions "
                f"({hook.introductions} calls to {target.entry:#x})")
    for buffer in report.buffers:
        logger.debug(f"buffer {buffer.kind} {buffer.location:#x}+{buffer.offset:#x} size {buffer.old_size}")
    return report


def union(reports: Sequence[TaintReport]) -> TaintReport:
    """Merge the reports of several runs against the same target."""
    if not reports:
        raise ValueError("no reports to merge")
    merged = TaintReport(reports[0].target)
    merged.buffers = union_buffers(b for r in reports for b in r.buffers)
    frames: Dict[int, int] = {}
    for report in reports:
        frames.update(report.frames)
    merged.frames = sorted(frames.items())
    merged.diagnostics = sorted({d for r in reports for d in r.diagnostics}, key=lambda d: (d.vaddr, d.kind))
    return merged
