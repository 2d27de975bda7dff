"""
Routine recovery for stripped executables.

Recursive descent from the entry point and every direct call target, then a
linear sweep over code bytes nothing reached, so that address-taken or dead
routines still show up. PLT stubs become routines named after their import.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

import networkx as nx

from hashswap.elf import BinaryImage
from hashswap.errors import Diagnostic, UndecodableInstruction
from hashswap.x86 import Imm, Instruction, Mem, Reg, decode

logger = logging.getLogger(__name__)

NORETURN = {'exit', '_exit', 'abort', '__stack_chk_fail'}
PADDING = {'nop', 'int3'}


@dataclass
class FrameInfo:
    """Static stack layout of one routine.

    Stack-pointer values are relative to the routine entry (rsp at entry,
    pointing at the return address, is 0).
    """

    pushes: int = 0
    frame_pointer: bool = False
    rbp_value: Optional[int] = None
    frame_size: int = 0
    post_prologue_sp: int = 0
    prologue_end: Optional[int] = None
    adjust_sites: List[int] = field(default_factory=list)
    sp_before: Dict[int, Optional[int]] = field(default_factory=dict)

    def canonical_offset(self, insn: Instruction, mem: Mem) -> Optional[int]:
        """Offset of ``mem``'s displacement point from the post-prologue rsp."""
        if mem.base == 'rsp':
            sp = self.sp_before.get(insn.vaddr)
            if sp is None:
                return None
            if insn.mnemonic == 'pop':
                sp += 8
            return mem.disp + sp - self.post_prologue_sp
        if mem.base == 'rbp' and self.frame_pointer and self.rbp_value is not None:
            if self.prologue_end is not None and insn.vaddr < self.prologue_end:
                return None
            return mem.disp + self.rbp_value - self.post_prologue_sp
        return None


@dataclass
class Routine:
    entry: int
    instructions: List[Instruction]
    name: str = ''
    tail_targets: Set[int] = field(default_factory=set)
    cfg: nx.DiGraph = field(default_factory=nx.DiGraph, repr=False)
    frame: FrameInfo = field(default_factory=FrameInfo, repr=False)

    @property
    def start(self) -> int:
        return self.entry

    @property
    def end(self) -> int:
        return max(insn.end for insn in self.instructions)

    @property
    def is_import(self) -> bool:
        return self.name.endswith('@plt')

    def contains(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end

    def at(self, vaddr: int) -> Optional[Instruction]:
        for insn in self.instructions:
            if insn.vaddr == vaddr:
                return insn
        return None

    def calls(self) -> List[Instruction]:
        return [insn for insn in self.instructions if insn.is_call]


class CallGraph:
    """Direct-call graph keyed by call site (one edge per call instruction)."""

    def __init__(self):
        self.graph = nx.MultiDiGraph()

    def add_node(self, entry: int):
        self.graph.add_node(entry)

    def add_edge(self, caller: int, callee: int, site: int):
        self.graph.add_edge(caller, callee, key=site)

    @property
    def nodes(self) -> List[int]:
        return sorted(self.graph.nodes)

    def edges(self) -> List[Tuple[int, int, int]]:
        return sorted((u, v, k) for u, v, k in self.graph.edges(keys=True))

    def callers(self, entry: int) -> List[int]:
        if entry not in self.graph:
            return []
        return sorted(set(self.graph.predecessors(entry)))

    def callees(self, entry: int) -> List[int]:
        if entry not in self.graph:
            return []
        return sorted(set(self.graph.successors(entry)))

    def call_sites(self, callee: int) -> List[int]:
        if callee not in self.graph:
            return []
        return sorted(k for _u, _v, k in self.graph.in_edges(callee, keys=True))

    def exclusive_callees(self, entry: int) -> Set[int]:
        """Routines reachable from ``entry`` only through it."""
        owned = {entry}
        changed = True
        while changed:
            changed = False
            for node in nx.descendants(self.graph, entry):
                if node in owned:
                    continue
                if set(self.graph.predecessors(node)) <= owned:
                    owned.add(node)
                    changed = True
        owned.discard(entry)
        return owned


@dataclass
class Program:
    image: BinaryImage
    routines: Dict[int, Routine]
    graph: CallGraph
    diagnostics: List[Diagnostic] = field(default_factory=list)

    def routine(self, entry: int) -> Routine:
        return self.routines[entry]

    def routine_containing(self, vaddr: int) -> Optional[Routine]:
        """The routine whose byte range covers ``vaddr``, instruction start or not."""
        for routine in self.routines.values():
            if routine.contains(vaddr):
                return routine
        return None

    def routine_at(self, vaddr: int) -> Optional[Routine]:
        for routine in self.routines.values():
            if routine.contains(vaddr) and routine.at(vaddr) is not None:
                return routine
        return None

    def instructions(self) -> Iterable[Instruction]:
        seen = set()
        for entry in sorted(self.routines):
            for insn in self.routines[entry].instructions:
                if insn.vaddr not in seen:
                    seen.add(insn.vaddr)
                    yield insn

    def import_name(self, vaddr: int) -> Optional[str]:
        return self.image.imports.get(vaddr)


class Disassembler:
    def __init__(self, image: BinaryImage):
        self.image = image
        self.decoded: Dict[int, Instruction] = {}
        self.diagnostics: List[Diagnostic] = []
        self.unverifiable: Set[int] = set()

    def _decode(self, vaddr: int) -> Optional[Instruction]:
        if vaddr in self.decoded:
            return self.decoded[vaddr]
        section = self.image.section_at(vaddr)
        if section is None or section.kind != 'code':
            return None
        offset = section.offset + (vaddr - section.vaddr)
        chunk = self.image.raw[offset:min(offset + 15, section.offset + section.size)]
        try:
            insn = decode(chunk, vaddr)
        except UndecodableInstruction:
            return None
        self.decoded[vaddr] = insn
        return insn

    def _explore(self, entry: int, entries: Set[int]) -> Tuple[Routine, Set[int]]:
        """Decode everything reachable from ``entry`` without crossing into
        other routines; returns the routine and the call targets it found."""
        cfg = nx.DiGraph()
        owned: Dict[int, Instruction] = {}
        targets: Set[int] = set()
        tails: Set[int] = set()
        work = [entry]
        while work:
            vaddr = work.pop()
            if vaddr in owned:
                continue
            insn = self._decode(vaddr)
            if insn is None:
                self.diagnostics.append(Diagnostic('undecodable', vaddr, f"in routine {entry:x}"))
                self.unverifiable.add(entry)
                continue
            owned[vaddr] = insn
            cfg.add_node(vaddr)
            successors = []
            target = insn.branch_target()
            if insn.is_call:
                if target is not None and self.image.is_code(target):
                    targets.add(target)
                if self.image.imports.get(target) not in NORETURN:
                    successors.append(insn.end)
            elif insn.is_jump:
                if target is None:
                    pass
                elif target != entry and (target in entries or not self.image.is_code(target)):
                    tails.add(target)
                else:
                    successors.append(target)
            elif insn.is_conditional:
                successors.extend([target, insn.end])
            elif insn.is_return or insn.mnemonic in ('int3', 'hlt'):
                pass
            else:
                successors.append(insn.end)
            for succ in successors:
                if succ != entry and succ in entries and succ != insn.end:
                    tails.add(succ)
                    continue
                cfg.add_edge(vaddr, succ)
                work.append(succ)
        routine = Routine(entry, [owned[v] for v in sorted(owned)], tail_targets=tails, cfg=cfg)
        name = self.image.imports.get(entry)
        if name:
            routine.name = f"{name}@plt"
        return routine, targets | {t for t in tails if self.image.is_code(t)}

    def _gaps(self, covered: Set[int]) -> List[int]:
        """Start addresses of non-padding code nothing reached."""
        starts = []
        for section in self.image.code_sections():
            vaddr = section.vaddr
            in_gap = False
            while vaddr < section.end:
                if vaddr in covered:
                    in_gap = False
                    vaddr += 1
                    continue
                insn = self._decode(vaddr)
                if insn is None:
                    self.diagnostics.append(Diagnostic('undecodable', vaddr, 'sweep resync'))
                    vaddr += 1
                    continue
                if insn.mnemonic in PADDING or insn.raw == b'\x00\x00':
                    vaddr = insn.end
                    continue
                if not in_gap:
                    starts.append(vaddr)
                    in_gap = True
                vaddr = insn.end
        return starts

    def run(self) -> Program:
        entries: Set[int] = {self.image.entry_point}
        for section in self.image.code_sections():
            if section.name.startswith('.plt'):
                entries.update(v for v in self.image.imports if section.contains(v))
        routines: Dict[int, Routine] = {}
        while True:
            routines = {}
            found: Set[int] = set()
            for entry in sorted(entries):
                routine, targets = self._explore(entry, entries)
                routines[entry] = routine
                found |= targets
            covered = {v for r in routines.values() for insn in r.instructions
                       for v in range(insn.vaddr, insn.end)}
            found |= set(self._gaps(covered))
            if found <= entries:
                break
            entries |= found

        graph = CallGraph()
        for entry, routine in routines.items():
            graph.add_node(entry)
        for entry, routine in sorted(routines.items()):
            for insn in routine.calls():
                target = insn.branch_target()
                if target in routines:
                    graph.add_edge(entry, target, insn.vaddr)
            routine.frame = analyze_frame(routine)

        for entry in sorted(self.unverifiable):
            logger.warning(f"routine {entry:#x} has undecodable paths; results for it are unverified")
        logger.debug(f"recovered {len(routines)} routines, {len(graph.edges())} call edges")
        return Program(self.image, routines, graph, self._dedupe(self.diagnostics))

    @staticmethod
    def _dedupe(diagnostics: List[Diagnostic]) -> List[Diagnostic]:
        return sorted(set(diagnostics), key=lambda d: (d.vaddr, d.kind, d.detail))


def disassemble(image: BinaryImage) -> Program:
    return Disassembler(image).run()


def _sp_effect(insn: Instruction, sp: int, rbp: Optional[int]) -> Optional[int]:
    ops = insn.operands
    if insn.mnemonic == 'push':
        return sp - 8
    if insn.mnemonic == 'pop':
        if ops and isinstance(ops[0], Reg) and ops[0].name == 'rsp':
            return None
        return sp + 8
    if insn.mnemonic == 'leave':
        return None if rbp is None else rbp + 8
    if ops and isinstance(ops[0], Reg) and ops[0].name == 'rsp':
        if insn.mnemonic in ('sub', 'add') and isinstance(ops[1], Imm):
            return sp - ops[1].value if insn.mnemonic == 'sub' else sp + ops[1].value
        if insn.mnemonic == 'mov' and isinstance(ops[1], Reg) and ops[1].name == 'rbp':
            return rbp
        if insn.mnemonic == 'lea' and isinstance(ops[1], Mem) and ops[1].base == 'rbp' \
                and ops[1].index is None and rbp is not None:
            return rbp + ops[1].disp
        return None
    return sp


def analyze_frame(routine: Routine) -> FrameInfo:
    """Prologue shape plus the rsp value before every instruction, by a
    forward dataflow over the routine's CFG (conflicting paths give None)."""
    info = FrameInfo()
    if routine.is_import or not routine.instructions:
        return info
    by_vaddr = {insn.vaddr: insn for insn in routine.instructions}

    # prologue: pushes, optional frame pointer, one rsp adjustment, all before
    # the first branch or call
    sp = 0
    for insn in routine.instructions:
        if insn.vaddr != routine.entry and insn.vaddr not in routine.cfg:
            break
        ops = insn.operands
        if insn.is_branch or insn.is_return:
            break
        if insn.mnemonic == 'push' and isinstance(ops[0], Reg):
            sp -= 8
            info.pushes += 1
            info.post_prologue_sp = sp
            info.prologue_end = insn.end
        elif insn.mnemonic == 'mov' and ops == (Reg('rbp'), Reg('rsp')):
            info.frame_pointer = True
            info.rbp_value = sp
            info.prologue_end = insn.end
        elif insn.mnemonic == 'sub' and ops[0] == Reg('rsp') and isinstance(ops[1], Imm):
            sp -= ops[1].value
            info.frame_size = ops[1].value
            info.post_prologue_sp = sp
            info.prologue_end = insn.end
            info.adjust_sites.append(insn.vaddr)
            break

    # rsp before each instruction
    state: Dict[int, Tuple[Optional[int], Optional[int]]] = {routine.entry: (0, None)}
    work = [routine.entry]
    while work:
        vaddr = work.pop()
        insn = by_vaddr.get(vaddr)
        if insn is None:
            continue
        sp_in, rbp_in = state[vaddr]
        info.sp_before[vaddr] = sp_in
        if sp_in is None:
            sp_out = None
        else:
            sp_out = _sp_effect(insn, sp_in, rbp_in)
        rbp_out = rbp_in
        if insn.operands and insn.operands[0] == Reg('rbp'):
            if insn.mnemonic == 'mov' and insn.operands[1] == Reg('rsp'):
                rbp_out = sp_in
            elif insn.mnemonic in ('pop', 'leave'):
                rbp_out = None
            else:
                rbp_out = None
        if insn.mnemonic == 'leave':
            rbp_out = None
        for succ in routine.cfg.successors(vaddr) if vaddr in routine.cfg else ():
            incoming = (sp_out, rbp_out)
            if succ not in state:
                state[succ] = incoming
                work.append(succ)
            elif state[succ] != incoming and state[succ][0] is not None:
                merged = (state[succ][0] if state[succ][0] == sp_out else None,
                          state[succ][1] if state[succ][1] == rbp_out else None)
                if merged != state[succ]:
                    state[succ] = merged
                    work.append(succ)

    # epilogue adjustments mirror the prologue one
    if info.frame_size:
        for insn in routine.instructions:
            ops = insn.operands
            if insn.mnemonic == 'add' and ops and ops[0] == Reg('rsp') and isinstance(ops[1], Imm) \
                    and ops[1].value == info.frame_size \
                    and info.sp_before.get(insn.vaddr) == info.post_prologue_sp:
                info.adjust_sites.append(insn.vaddr)
    return info
