"""
Static rewriting
================

Turns an identified weak-hash routine, the digest buffers found by taint
scoping and the user's logic edits into a new executable:

* the replacement bundle is injected in a new executable segment and the
  weak routine's entry is hooked to the bundle entry for its layout;
* stack buffers grow inside their owner's frame (frame adjustments and every
  frame-relative access rewritten), heap buffers grow at their allocation
  site, static buffers move to a larger slot in a new data segment;
* routines whose edits cannot be made in place are relocated into the new
  code segment, with branches and rip-relative operands fixed up, and their
  old entry hooked.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from hashswap.bundle import PatchBundle
from hashswap.disasm import Program, Routine
from hashswap.elf import BinaryImage, InjectionLayout, align_up, inject, plan_injection
from hashswap.errors import (Diagnostic, DisplacementOverflow, HashswapError, NoPrologueFound,
                             NonImmediateAllocationSize, OffsetInsideExpandedTail, RewriteError,
                             RoutineTooSmall, StaleEdit)
from hashswap.identify import IdentifiedPrimitive
from hashswap.signatures import hash_profile
from hashswap.taint import HEAP, STACK, STATIC, TaintedBuffer, TaintReport
from hashswap.x86 import Imm, Instruction, Mem, Reg, decode_all, encode, fits, full_reg

logger = logging.getLogger(__name__)

TRAP = b'\xcc'
HOOK_SIZE = 5
ROUTINE_ALIGN = 16
STATIC_ALIGN = 16
FRAME_ALIGN = 16
ALLOCATORS = {'malloc': ('rdi',), 'calloc': ('rdi', 'rsi'), 'realloc': ('rsi',)}


# -- change inputs ----------------------------------------------------------------

@dataclass(frozen=True)
class UserEdit:
    vaddr: int
    original: bytes
    replacement: bytes

    def render(self) -> str:
        return f"logic {self.vaddr:x} {self.original.hex()} -> {self.replacement.hex()}"


def parse_changes(text: str, source: str = '<changes>') -> List[UserEdit]:
    """``logic <vaddr> <original-hex> -> <replacement-hex>`` lines."""
    edits = []
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] != 'logic' or parts[3] != '->':
            raise HashswapError(f"{source}:{number}: expected 'logic <vaddr> <original> -> <replacement>'")
        try:
            edit = UserEdit(int(parts[1], 16), bytes.fromhex(parts[2]), bytes.fromhex(parts[4]))
        except ValueError as e:
            raise HashswapError(f"{source}:{number}: {e}")
        if not edit.original or not edit.replacement:
            raise HashswapError(f"{source}:{number}: empty byte string")
        edits.append(edit)
    return edits


def load_changes(path: Optional[str]) -> List[UserEdit]:
    if not path:
        return []
    try:
        with open(path) as f:
            return parse_changes(f.read(), path)
    except OSError as e:
        raise HashswapError(f"cannot read change file {path}: {e}")


@dataclass(frozen=True)
class BufferExpansion:
    buffer: TaintedBuffer
    new_size: int

    @property
    def delta(self) -> int:
        return self.new_size - self.buffer.old_size


@dataclass
class ChangeSet:
    target: IdentifiedPrimitive
    replacement: str
    expansions: List[BufferExpansion] = field(default_factory=list)
    edits: List[UserEdit] = field(default_factory=list)

    def validate(self, image: BinaryImage):
        for edit in self.edits:
            try:
                current = image.read(edit.vaddr, len(edit.original))
            except HashswapError:
                raise StaleEdit("logic edit outside the image", edit.vaddr)
            if current != edit.original:
                raise StaleEdit(f"expected {edit.original.hex()}, found {current.hex()}", edit.vaddr)


def build_changeset(report: TaintReport, edits: Sequence[UserEdit], replacement: str) -> ChangeSet:
    target = report.target
    secure = hash_profile(replacement).digest_size
    expansions = [BufferExpansion(b, compute_new_size(b.old_size, target.digest_size, secure))
                  for b in report.buffers]
    return ChangeSet(target, replacement, expansions, list(edits))


# -- arithmetic ---------------------------------------------------------------------

def compute_new_size(old_size: int, digest_target: int, digest_secure: int) -> int:
    """Buffer size scaled by the digest-size ratio, rounded up."""
    if old_size <= 0 or digest_target <= 0 or digest_secure <= 0:
        raise ValueError("sizes must be positive")
    return -(-old_size * digest_secure // digest_target)


def recompute_rip_displacement(old_disp: int, old_inst_addr: int, new_inst_addr: int) -> int:
    """Displacement keeping the same absolute target once the instruction
    ending at ``old_inst_addr`` ends at ``new_inst_addr`` instead."""
    new_disp = old_disp + old_inst_addr - new_inst_addr
    if not fits(new_disp, 4):
        raise DisplacementOverflow(f"target {old_inst_addr + old_disp:#x} out of rel32 reach", new_inst_addr)
    return new_disp


def recompute_stack_offset(old_offset: int, buffers: Sequence[Tuple[int, int, int]]) -> int:
    """New post-prologue offset of a frame slot once the (offset, old size,
    new size) buffers below it have grown."""
    delta = 0
    for offset, old_size, new_size in buffers:
        if old_offset < offset + old_size:
            if offset < old_offset:
                raise OffsetInsideExpandedTail(f"offset {old_offset:#x} lies inside the buffer at {offset:#x}")
            break
        delta += new_size - old_size
    return old_offset + delta


def _relocated_offset(old_offset: int, buffers: Sequence[Tuple[int, int, int]], indexed: bool) -> int:
    """Like recompute_stack_offset, but an indexed access into a buffer's
    interior moves with the buffer base."""
    for offset, old_size, _new in buffers:
        if offset < old_offset < offset + old_size:
            if not indexed:
                raise OffsetInsideExpandedTail(f"offset {old_offset:#x} lies inside the buffer at {offset:#x}")
            return recompute_stack_offset(offset, buffers) + old_offset - offset
    return recompute_stack_offset(old_offset, buffers)


def plan_frame_expansion(frame_size: int, expansions: Iterable[BufferExpansion]) -> int:
    growth = sum(e.delta for e in expansions)
    if growth <= 0:
        return frame_size
    return frame_size + align_up(growth, FRAME_ALIGN)


# -- per-routine rewrites ---------------------------------------------------------

def _stack_buffers(expansions: Iterable[BufferExpansion]) -> List[Tuple[int, int, int]]:
    buffers = sorted((e.buffer.offset, e.buffer.old_size, e.new_size) for e in expansions)
    for (a, size, _n), (b, _s, _m) in zip(buffers, buffers[1:]):
        if a + size > b:
            raise RewriteError(f"stack buffers at {a:#x} and {b:#x} overlap")
    return buffers


def rewrite_stack_frame(routine: Routine, instructions: List[Instruction],
                        expansions: Sequence[BufferExpansion]) -> List[Instruction]:
    """Frame adjustments and frame-relative operands of ``routine`` after its
    stack buffers grow."""
    frame = routine.frame
    if not frame.frame_size or not frame.adjust_sites:
        raise NoPrologueFound("routine has no stack adjustment to grow", routine.entry)
    new_frame = plan_frame_expansion(frame.frame_size, expansions)
    growth = new_frame - frame.frame_size
    buffers = _stack_buffers(expansions)
    post_sp = frame.post_prologue_sp
    pre_adjust = post_sp + frame.frame_size
    logger.debug(f"frame of {routine.entry:#x}: {frame.frame_size:#x} -> {new_frame:#x}")

    rewritten = []
    for insn in instructions:
        ops = insn.operands
        if insn.vaddr in frame.adjust_sites and len(ops) == 2 and ops[0] == Reg('rsp') \
                and isinstance(ops[1], Imm) and ops[1].value == frame.frame_size:
            rewritten.append(insn.with_operands(ops[0], Imm(new_frame, ops[1].size)))
            continue
        mem = insn.memory_operand()
        if mem is None or mem.base not in ('rsp', 'rbp'):
            rewritten.append(insn)
            continue
        old_offset = frame.canonical_offset(insn, mem)
        if old_offset is None:
            if mem.base == 'rsp' or frame.frame_pointer and insn.vaddr >= (frame.prologue_end or 0):
                logger.warning(f"cannot place {insn} at {insn.vaddr:#x} in the frame of {routine.entry:#x}")
            rewritten.append(insn)
            continue
        if mem.base == 'rsp':
            base_old = old_offset - mem.disp + post_sp
            base_new = base_old - growth if base_old < pre_adjust else base_old
        else:
            base_old = base_new = frame.rbp_value
        if old_offset >= frame.frame_size:
            new_offset = old_offset + growth
        else:
            new_offset = _relocated_offset(old_offset, buffers, mem.index is not None)
        disp = new_offset + post_sp - growth - base_new
        if disp == mem.disp:
            rewritten.append(insn)
            continue
        rewritten.append(insn.with_operands(*(mem.with_disp(disp) if op is mem else op for op in ops)))
    return rewritten


def _is_leader(routine: Routine, insn: Instruction, previous: Optional[Instruction]) -> bool:
    if previous is None or previous.end != insn.vaddr or previous.is_branch or previous.is_return:
        return True
    if insn.vaddr not in routine.cfg:
        return False
    return set(routine.cfg.predecessors(insn.vaddr)) - {previous.vaddr} != set()


def _block_before(routine: Routine, site: int) -> List[Instruction]:
    """Instructions preceding ``site`` in its basic block, nearest first."""
    ordered = routine.instructions
    index = next(i for i, insn in enumerate(ordered) if insn.vaddr == site)
    block = []
    for i in range(index, 0, -1):
        if _is_leader(routine, ordered[i], ordered[i - 1]):
            break
        block.append(ordered[i - 1])
    return block


def _immediate_load(block: Sequence[Instruction], register: str, site: int) -> Instruction:
    for insn in block:
        if insn.is_call:
            raise NonImmediateAllocationSize(f"{register} does not survive the call at {insn.vaddr:#x}", site)
        ops = insn.operands
        if ops and isinstance(ops[0], Reg) and full_reg(ops[0].name) == register:
            if insn.mnemonic == 'mov' and isinstance(ops[1], Imm):
                return insn
            raise NonImmediateAllocationSize(f"{register} is computed by {insn}", site)
    raise NonImmediateAllocationSize(f"no load of {register} before the allocation", site)


def rewrite_heap_site(program: Program, site: int, old_size: int, new_size: int) -> List[Instruction]:
    """The size-argument load feeding the allocator call at ``site``, grown
    by ``new_size - old_size`` bytes."""
    routine = program.routine_at(site)
    call = routine.at(site) if routine else None
    if call is None or not call.is_call:
        raise NonImmediateAllocationSize("allocation site is not a call", site)
    name = program.import_name(call.branch_target())
    if name not in ALLOCATORS:
        raise NonImmediateAllocationSize(f"allocation site calls {name or 'an unknown routine'}", site)
    block = _block_before(routine, site)
    delta = new_size - old_size
    if name == 'calloc':
        count = _immediate_load(block, 'rdi', site)
        element = _immediate_load(block, 'rsi', site).operands[1].value
        allocated = count.operands[1].value * element
        if element <= 0 or allocated < old_size:
            raise NonImmediateAllocationSize(f"calloc({count.operands[1].value}, {element}) "
                                             f"is smaller than the tainted {old_size} bytes", site)
        scaled = -(-(allocated + delta) // element)
        return [count.with_operands(count.operands[0], Imm(scaled, count.operands[1].size))]
    load = _immediate_load(block, ALLOCATORS[name][0], site)
    allocated = load.operands[1].value
    if allocated < old_size:
        raise NonImmediateAllocationSize(f"{name}({allocated}) is smaller than the tainted "
                                         f"{old_size} bytes", site)
    return [load.with_operands(load.operands[0], Imm(allocated + delta, load.operands[1].size))]


_ADDRESS_IMMEDIATES = {'mov', 'push', 'movabs'}


def remap_static_buffer(program: Program, old_vaddr: int, old_size: int, new_vaddr: int
                        ) -> Tuple[List[Instruction], List[Diagnostic]]:
    """Every operand addressing [old_vaddr, old_vaddr+old_size) redirected to
    the same offset from ``new_vaddr``."""
    def moved(address: int) -> Optional[int]:
        if old_vaddr <= address < old_vaddr + old_size:
            return new_vaddr + address - old_vaddr
        return None

    edits: List[Instruction] = []
    diagnostics: List[Diagnostic] = []
    seen: Set[int] = set()
    for entry in sorted(program.routines):
        routine = program.routines[entry]
        if routine.is_import:
            continue
        for insn in routine.instructions:
            if insn.vaddr in seen:
                continue
            seen.add(insn.vaddr)
            edited = _remap_operands(insn, moved, diagnostics)
            if edited is not None:
                edits.append(edited)
    return edits, diagnostics


def _remap_operands(insn: Instruction, moved, diagnostics: List[Diagnostic]) -> Optional[Instruction]:
    ops = list(insn.operands)
    changed = False
    for i, op in enumerate(ops):
        if isinstance(op, Mem):
            if op.rip_relative:
                target = moved(insn.rip_target())
                if target is not None:
                    ops[i] = op.with_disp(target - insn.end)
                    changed = True
            else:
                target = moved(op.disp)
                if target is not None:
                    ops[i] = op.with_disp(target)
                    changed = True
        elif isinstance(op, Imm) and not insn.is_branch and op.size >= 4:
            target = moved(op.value)
            if target is None:
                continue
            if insn.mnemonic in _ADDRESS_IMMEDIATES:
                ops[i] = Imm(target, op.size)
                changed = True
            else:
                diagnostics.append(Diagnostic('ambiguous-immediate', insn.vaddr, f"{op.value:x}"))
                logger.warning(f"{insn} at {insn.vaddr:#x} uses {op.value:#x} arithmetically; left as is")
    return insn.with_operands(*ops) if changed else None


# -- relocation ---------------------------------------------------------------------

@dataclass
class Relocation:
    entry: int
    vaddr: int
    code: bytes
    addresses: Dict[int, int]


def _swap_mem(insn: Instruction, mem: Mem, disp: int) -> Instruction:
    return insn.with_operands(*(mem.with_disp(disp) if op is mem else op for op in insn.operands))


def _encode_at(insn: Instruction, at: int, internal: Dict[int, int]) -> bytes:
    """``insn`` encoded at ``at``: internal branch targets follow the moved
    code, rip-relative operands keep their absolute target."""
    target = insn.branch_target()
    if target is not None and target in internal:
        insn = insn.with_operands(Imm(internal[target], 8))
    mem = insn.memory_operand()
    if mem is not None and mem.rip_relative:
        end = at + len(encode(_swap_mem(insn, mem, 0), at))
        insn = _swap_mem(insn, mem, recompute_rip_displacement(mem.disp, insn.end, end))
    return encode(insn, at)


def _anchors(routine: Routine, items: Sequence[Instruction]) -> Dict[int, int]:
    """Branch-target address -> index into ``items``. An unedited original
    instruction wins over an inserted one decoded at the same address."""
    original = {insn.vaddr: insn.raw for insn in routine.instructions}
    anchors: Dict[int, int] = {}
    for i, insn in enumerate(items):
        if original.get(insn.vaddr) == insn.raw:
            anchors[insn.vaddr] = i
        else:
            anchors.setdefault(insn.vaddr, i)
    return anchors


def relocate_routine(routine: Routine, instructions: Sequence[Instruction], new_base: int) -> Relocation:
    """Encode ``instructions`` (the routine with its edits) contiguously at
    ``new_base``. Internal branches follow their targets; external branches
    and rip-relative operands keep their absolute destinations. Short
    branches that no longer reach are widened until the layout is stable."""
    items = list(instructions)
    anchors = _anchors(routine, items)
    wide = [insn.wide for insn in items]
    sizes = [insn.length for insn in items]

    for _round in range(64):
        starts = [new_base]
        for size in sizes:
            starts.append(starts[-1] + size)
        internal = {vaddr: starts[i] for vaddr, i in anchors.items()}
        chunks = []
        at = new_base
        for i, insn in enumerate(items):
            if insn.is_branch:
                insn = replace(insn, wide=wide[i])
            chunk = _encode_at(insn, at, internal)
            if insn.is_branch and not insn.is_call and len(chunk) > 2:
                wide[i] = True
            chunks.append(chunk)
            at += len(chunk)
        new_sizes = [len(chunk) for chunk in chunks]
        if new_sizes == sizes:
            break
        sizes = new_sizes
    else:
        raise RewriteError("branch sizes did not converge", routine.entry)
    logger.debug(f"relocated {routine.entry:#x} to {new_base:#x} ({at - new_base} bytes)")
    return Relocation(routine.entry, new_base, b''.join(chunks), internal)


def hook(routine: Routine, destination: int, fill: bool) -> Tuple[int, bytes]:
    """``jmp rel32`` at the routine entry, the rest of its body trap-filled
    when ``fill`` is set."""
    contiguous = routine.entry
    for insn in routine.instructions:
        if insn.vaddr == contiguous:
            contiguous = insn.end
    if contiguous - routine.entry < HOOK_SIZE:
        raise RoutineTooSmall(f"only {contiguous - routine.entry} contiguous bytes for a hook", routine.entry)
    rel = destination - (routine.entry + HOOK_SIZE)
    if not fits(rel, 4):
        raise DisplacementOverflow(f"hook target {destination:#x} out of reach", routine.entry)
    jump = b'\xe9' + (rel & 0xffffffff).to_bytes(4, 'little')
    if not fill:
        return routine.entry, jump
    return routine.entry, jump + TRAP * (contiguous - routine.entry - HOOK_SIZE)


# -- planning and application ---------------------------------------------------------

@dataclass
class RewriteSummary:
    bytes_added: int = 0
    injected_code: int = 0
    routines_relocated: int = 0
    routine: int = 0
    buffer: int = 0
    logic: int = 0

    @property
    def automated_share(self) -> float:
        total = self.routine + self.buffer + self.logic
        return (self.routine + self.buffer) / total if total else 1.0

    def render(self) -> List[str]:
        return [
            f"bytes added {self.bytes_added}",
            f"injected code {self.injected_code}",
            f"routines relocated {self.routines_relocated}",
            f"rewritten routine {self.routine}",
            f"rewritten buffer {self.buffer}",
            f"rewritten logic {self.logic}",
            f"automated share {self.automated_share:.4f}",
        ]


@dataclass
class RewritePlan:
    layout: InjectionLayout
    code: bytes
    relocations: Dict[int, int]
    hooks: List[Tuple[int, int]]
    inline_edits: List[Tuple[int, bytes]]
    static_slots: Dict[int, int]
    summary: RewriteSummary
    diagnostics: List[Diagnostic] = field(default_factory=list)


class Rewriter:
    def __init__(self, image: BinaryImage, program: Program, changeset: ChangeSet, bundle: PatchBundle):
        self.image = image
        self.program = program
        self.changeset = changeset
        self.bundle = bundle
        self.diagnostics: List[Diagnostic] = []
        self.working: Dict[int, List[Instruction]] = {}
        self.relocate: Set[int] = set()
        self.summary = RewriteSummary()

    def _routine(self, vaddr: int) -> Routine:
        routine = self.program.routine_containing(vaddr)
        if routine is None or routine.is_import:
            raise RewriteError("edit outside every recovered routine", vaddr)
        return routine

    def _instructions(self, routine: Routine) -> List[Instruction]:
        return self.working.setdefault(routine.entry, list(routine.instructions))

    def _substitute(self, routine: Routine, edited: Iterable[Instruction]) -> int:
        by_vaddr = {insn.vaddr: insn for insn in edited}
        current = self._instructions(routine)
        changed = 0
        for i, insn in enumerate(current):
            new = by_vaddr.get(insn.vaddr)
            if new is not None and new != insn:
                current[i] = new
                changed += 1
        return changed

    # logic edits

    def apply_logic(self):
        for edit in self.changeset.edits:
            routine = self._routine(edit.vaddr)
            current = self._instructions(routine)
            start = next((i for i, insn in enumerate(current) if insn.vaddr == edit.vaddr), None)
            if start is None:
                raise RewriteError("logic edit does not start on an instruction", edit.vaddr)
            end, covered = start, 0
            while covered < len(edit.original) and end < len(current):
                covered += current[end].length
                end += 1
            if covered != len(edit.original):
                raise RewriteError("logic edit does not end on an instruction boundary", edit.vaddr)
            replacement = list(decode_all(edit.replacement, edit.vaddr))
            current[start:end] = replacement
            self.summary.logic += len(replacement)
            if len(edit.replacement) != len(edit.original):
                self.relocate.add(routine.entry)
            logger.debug(f"logic edit at {edit.vaddr:#x}: {edit.original.hex()} -> {edit.replacement.hex()}")

    # buffer edits

    def apply_stack(self, expansions: Sequence[BufferExpansion]):
        by_routine: Dict[int, List[BufferExpansion]] = {}
        for expansion in expansions:
            by_routine.setdefault(expansion.buffer.location, []).append(expansion)
        for entry, group in sorted(by_routine.items()):
            routine = self.program.routines.get(entry)
            if routine is None:
                raise NoPrologueFound("stack buffer owner is not a recovered routine", entry)
            current = self._instructions(routine)
            rewritten = rewrite_stack_frame(routine, current, group)
            self.summary.buffer += sum(1 for a, b in zip(current, rewritten) if a != b)
            self.working[entry] = rewritten
            self.relocate.add(entry)

    def apply_heap(self, expansions: Sequence[BufferExpansion]):
        for expansion in expansions:
            site = expansion.buffer.location
            edits = rewrite_heap_site(self.program, site, expansion.buffer.old_size, expansion.new_size)
            self.summary.buffer += self._substitute(self._routine(site), edits)
            logger.debug(f"allocation at {site:#x}: {expansion.buffer.old_size} -> {expansion.new_size} bytes")

    def apply_static(self, expansions: Sequence[BufferExpansion], data_vaddr: int) -> Dict[int, int]:
        slots: Dict[int, int] = {}
        offset = 0
        for expansion in sorted(expansions, key=lambda e: e.buffer.location):
            old = expansion.buffer.location
            slots[old] = data_vaddr + offset
            edits, diagnostics = remap_static_buffer(self.program, old, expansion.buffer.old_size, slots[old])
            self.diagnostics.extend(diagnostics)
            by_routine: Dict[int, List[Instruction]] = {}
            for insn in edits:
                by_routine.setdefault(self._routine(insn.vaddr).entry, []).append(insn)
            for entry, group in by_routine.items():
                self.summary.buffer += self._substitute(self.program.routines[entry], group)
            offset = align_up(offset + expansion.new_size, STATIC_ALIGN)
        return slots

    # layout

    def _in_place(self) -> List[Tuple[int, bytes]]:
        """Encodings of edited instructions in routines that stay put;
        routines with a length change move to the relocation set."""
        patches = []
        for entry, current in sorted(self.working.items()):
            if entry in self.relocate:
                continue
            originals = {insn.vaddr: insn for insn in self.program.routines[entry].instructions}
            pending = []
            for insn in current:
                if originals.get(insn.vaddr) == insn:
                    continue
                data = encode(insn, insn.vaddr)
                if len(data) != insn.length:
                    self.relocate.add(entry)
                    break
                pending.append((insn.vaddr, data))
            else:
                patches.extend(pending)
        return patches

    def _build(self, data_vaddr: int, base_working: Dict[int, List[Instruction]],
               code_vaddr: int) -> Tuple[bytes, List[Relocation], List[Tuple[int, bytes]], Dict[int, int]]:
        self.working = {k: list(v) for k, v in base_working.items()}
        self.diagnostics = []
        statics = [e for e in self.changeset.expansions if e.buffer.kind == STATIC]
        slots = self.apply_static(statics, data_vaddr)
        patches = self._in_place()

        code = bytearray(self.bundle.blob())
        relocations = []
        for entry in sorted(self.relocate):
            if entry == self.changeset.target.entry:
                raise RewriteError("the replaced routine cannot also be relocated", entry)
            code.extend(bytes(align_up(len(code), ROUTINE_ALIGN) - len(code)))
            relocation = relocate_routine(self.program.routines[entry], self.working[entry],
                                          code_vaddr + len(code))
            relocations.append(relocation)
            code.extend(relocation.code)
        patches = [p for p in patches if self.program.routine_at(p[0]).entry not in self.relocate]
        return bytes(code), relocations, patches, slots

    def plan(self) -> RewritePlan:
        changeset = self.changeset
        target = changeset.target
        if self.bundle.algorithm != changeset.replacement:
            raise RewriteError(f"bundle implements {self.bundle.algorithm}, not {changeset.replacement}")
        entry_offset = self.bundle.entry(target.layout.order)
        changeset.validate(self.image)

        self.apply_logic()
        stack = [e for e in changeset.expansions if e.buffer.kind == STACK]
        heap = [e for e in changeset.expansions if e.buffer.kind == HEAP]
        self.apply_stack(stack)
        self.apply_heap(heap)
        base_working = {k: list(v) for k, v in self.working.items()}
        base_summary = replace(self.summary)

        data_size = sum(align_up(e.new_size, STATIC_ALIGN) for e in changeset.expansions
                        if e.buffer.kind == STATIC)
        # code placement does not depend on the code size; the data segment
        # follows the code, so size the code once with a provisional slot base
        provisional = plan_injection(self.image, len(self.bundle.blob()), data_size)
        code, _r, _p, _s = self._build(provisional.code_vaddr + 0x100000, base_working, provisional.code_vaddr)
        layout = plan_injection(self.image, len(code), data_size)
        self.summary = replace(base_summary)
        code, relocations, patches, slots = self._build(layout.data_vaddr, base_working, layout.code_vaddr)
        if len(code) != layout.code_size:
            raise RewriteError("relocated code changed size between passes")

        hooks = [(target.entry, layout.code_vaddr + entry_offset)]
        for relocation in relocations:
            hooks.append((relocation.entry, relocation.vaddr))
        for routine_entry, destination in hooks:
            fill = routine_entry != target.entry
            vaddr, data = hook(self.program.routines[routine_entry], destination, fill)
            patches.append((vaddr, data))
        self._check_overlaps(patches)

        self.summary.routine = self._replaced_instructions(target)
        self.summary.routines_relocated = len(relocations)
        self.summary.injected_code = len(code)
        return RewritePlan(layout, code, {r.entry: r.vaddr for r in relocations}, hooks, sorted(patches),
                           slots, self.summary, sorted(self.diagnostics, key=lambda d: d.vaddr))

    def _replaced_instructions(self, target: IdentifiedPrimitive) -> int:
        entries = {target.entry} | self.program.graph.exclusive_callees(target.entry)
        return sum(len(self.program.routines[e].instructions) for e in entries
                   if not self.program.routines[e].is_import)

    @staticmethod
    def _check_overlaps(patches: List[Tuple[int, bytes]]):
        ordered = sorted(patches)
        for (a, data), (b, _other) in zip(ordered, ordered[1:]):
            if a + len(data) > b:
                raise RewriteError("patches overlap", b)


def apply(image: BinaryImage, program: Program, changeset: ChangeSet, bundle: PatchBundle
          ) -> Tuple[BinaryImage, RewritePlan]:
    plan = Rewriter(image, program, changeset, bundle).plan()
    rewritten = inject(image, plan.layout, plan.code, dict(plan.inline_edits))
    plan.summary.bytes_added = len(rewritten.raw) - len(image.raw)
    logger.info(f"rewrote {image.path or '<image>'}: +{plan.summary.bytes_added} bytes, "
                f"{plan.summary.routines_relocated} routines relocated")
    return rewritten, plan
