"""
Weak-hash identification
========================

Constant scanning finds routines that hold or reference a known hash
constant; those routines and their direct callers become candidates, and each
candidate is executed offline under every parameter layout on a fixed test
input. A candidate counts as identified only when exactly one binding
reproduces the expected digest.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from hashswap.disasm import Program, Routine, disassemble
from hashswap.elf import BinaryImage
from hashswap.emulator import LAYOUTS, CallLayout, run_routine
from hashswap.errors import Diagnostic, ExecutionError, UnknownAlgorithm
from hashswap.signatures import ConstantSignature, HashProfile, SignatureDB, hash_profile
from hashswap.x86 import Imm, Instruction, Mem

logger = logging.getLogger(__name__)

CODE_IMMEDIATE = 'code-immediate'
DATA_SECTION = 'data-section'
WINDOW = 4


@dataclass(frozen=True)
class ConstantHit:
    signature: ConstantSignature
    vaddr: int
    container: str
    routines: Tuple[int, ...] = ()

    @property
    def algorithm(self) -> str:
        return self.signature.algorithm


@dataclass(frozen=True)
class Candidate:
    entry: int
    algorithms: Tuple[str, ...]


@dataclass(frozen=True)
class IdentifiedPrimitive:
    entry: int
    algorithm: str
    layout: CallLayout
    digest_size: int
    call_sites: Tuple[int, ...] = ()


@dataclass
class Identification:
    primitives: List[IdentifiedPrimitive] = field(default_factory=list)
    detected: List[Tuple[str, int]] = field(default_factory=list)
    diagnostics: List[Diagnostic] = field(default_factory=list)


def _immediate_bytes(insn: Instruction) -> Optional[bytes]:
    if insn.mnemonic not in ('mov', 'movabs') or len(insn.operands) != 2:
        return None
    src = insn.operands[1]
    if not isinstance(src, Imm) or src.size < 4:
        return None
    return (src.value & ((1 << (src.size * 8)) - 1)).to_bytes(src.size, 'little')


def _scan_routine(routine: Routine, signatures: Sequence[ConstantSignature]) -> List[ConstantHit]:
    words = [(insn.vaddr, data) for insn in routine.instructions
             if (data := _immediate_bytes(insn)) is not None]
    hits = []
    for i, (vaddr, _data) in enumerate(words):
        window = b''.join(data for _v, data in words[i:i + WINDOW])
        for sig in signatures:
            if window.startswith(sig.immediate_pattern):
                hits.append(ConstantHit(sig, vaddr, CODE_IMMEDIATE, (routine.entry,)))
    return hits


def _references(insn: Instruction, start: int, end: int) -> bool:
    for op in insn.operands:
        if isinstance(op, Mem):
            target = insn.rip_target() if op.rip_relative else op.disp
            if start <= target < end:
                return True
        elif isinstance(op, Imm) and not insn.is_branch and start <= op.value < end:
            return True
    return False


def scan_constants(image: BinaryImage, db: SignatureDB, program: Optional[Program] = None) -> List[ConstantHit]:
    """Every occurrence of every signature: exact matches in data sections,
    and runs of up to four mov immediates inside one routine."""
    if program is None:
        program = disassemble(image)
    hits: List[ConstantHit] = []

    windowed = [sig for sig in db if sig.matches_immediates]
    for entry in sorted(program.routines):
        routine = program.routines[entry]
        if not routine.is_import:
            hits.extend(_scan_routine(routine, windowed))

    for section in image.data_sections():
        if section.kind != 'data':
            continue
        contents = image.section_bytes(section)
        for sig in db:
            start = contents.find(sig.pattern)
            while start >= 0:
                vaddr = section.vaddr + start
                owners = tuple(sorted(
                    entry for entry, routine in program.routines.items()
                    if not routine.is_import and any(
                        _references(insn, vaddr, vaddr + len(sig.pattern)) for insn in routine.instructions)))
                hits.append(ConstantHit(sig, vaddr, DATA_SECTION, owners))
                start = contents.find(sig.pattern, start + 1)

    hits.sort(key=lambda h: (h.vaddr, h.algorithm, h.signature.kind))
    logger.debug(f"{len(hits)} constant hits in {image.path or '<image>'}")
    return hits


def locate_candidates(hits: Iterable[ConstantHit], program: Program, db: SignatureDB,
                      diagnostics: Optional[List[Diagnostic]] = None) -> List[Candidate]:
    """Routines enclosing or referencing a weak-hash hit, plus their direct
    callers, each with the algorithms worth trying on it."""
    plausible: Dict[int, Set[str]] = {}
    for hit in hits:
        if not db.is_weak(hit.algorithm):
            continue
        if not hit.routines:
            if diagnostics is not None:
                diagnostics.append(Diagnostic('orphan-hit', hit.vaddr, hit.algorithm))
            logger.warning(f"{hit.algorithm} constant at {hit.vaddr:#x} is not referenced by any routine")
            continue
        algorithms = db.plausible(hit.algorithm)
        for entry in hit.routines:
            for candidate in [entry] + program.graph.callers(entry):
                plausible.setdefault(candidate, set()).update(algorithms)
    return [Candidate(entry, tuple(sorted(plausible[entry]))) for entry in sorted(plausible)]


def enumerate_layouts() -> List[CallLayout]:
    return list(LAYOUTS)


def _matches(image: BinaryImage, entry: int, profile: HashProfile, layout: CallLayout, gas: int) -> bool:
    try:
        output = run_routine(image, entry, layout, profile.test_input, gas)
    except ExecutionError as e:
        logger.debug(f"{entry:#x} {profile.algorithm} {layout}: {e}")
        return False
    return output[:profile.digest_size] == profile.expected_digest


def _preferred(layouts: List[CallLayout]) -> Optional[CallLayout]:
    """The single binding to report, or None when the matches disagree."""
    if len(layouts) == 1:
        return layouts[0]
    short = [layout for layout in layouts if layout.arity == 2]
    if len(short) != 1:
        return None
    chosen = short[0]
    for layout in layouts:
        if any(layout.register(role) != chosen.register(role) for role in 'IO'):
            return None
    return chosen


def verify_candidates(image: BinaryImage, program: Program, candidates: Sequence[Candidate],
                      layouts: Sequence[CallLayout], gas: int,
                      diagnostics: Optional[List[Diagnostic]] = None) -> List[IdentifiedPrimitive]:
    identified = []
    for candidate in candidates:
        routine = program.routines.get(candidate.entry)
        if routine is None or routine.is_import:
            continue
        found: Dict[str, List[CallLayout]] = {}
        for algorithm in candidate.algorithms:
            try:
                profile = hash_profile(algorithm)
            except UnknownAlgorithm:
                logger.warning(f"no profile for {algorithm}; cannot verify {candidate.entry:#x}")
                continue
            for layout in layouts:
                if _matches(image, candidate.entry, profile, layout, gas):
                    logger.debug(f"{candidate.entry:#x} computes {algorithm} under {layout}")
                    found.setdefault(algorithm, []).append(layout)
        if not found:
            continue
        if len(found) > 1:
            detail = '/'.join(sorted(found))
            logger.warning(f"{candidate.entry:#x} matches several algorithms ({detail}); skipped")
            if diagnostics is not None:
                diagnostics.append(Diagnostic('ambiguous-binding', candidate.entry, detail))
            continue
        algorithm, matched = next(iter(found.items()))
        layout = _preferred(matched)
        if layout is None:
            detail = ','.join(str(m) for m in matched)
            logger.warning(f"{candidate.entry:#x} computes {algorithm} under several layouts ({detail}); skipped")
            if diagnostics is not None:
                diagnostics.append(Diagnostic('ambiguous-binding', candidate.entry, detail))
            continue
        identified.append(IdentifiedPrimitive(candidate.entry, algorithm, layout,
                                              hash_profile(algorithm).digest_size,
                                              tuple(program.graph.call_sites(candidate.entry))))
    return identified


def identify(image: BinaryImage, db: SignatureDB, gas: int, program: Optional[Program] = None) -> Identification:
    """Scan, expand and verify; the whole of the identification phase."""
    if program is None:
        program = disassemble(image)
    result = Identification(diagnostics=list(program.diagnostics))
    hits = scan_constants(image, db, program)

    result.detected = sorted({(hit.algorithm, hit.vaddr) for hit in hits if not db.is_weak(hit.algorithm)},
                             key=lambda d: (d[1], d[0]))
    candidates = locate_candidates(hits, program, db, result.diagnostics)
    logger.info(f"{len(hits)} constant hits, {len(candidates)} candidates")
    result.primitives = verify_candidates(image, program, candidates, enumerate_layouts(), gas,
                                          result.diagnostics)

    # a weak constant none of whose candidates verified: typically an Init
    # routine reachable only from unverifiable code
    verified = {p.entry for p in result.primitives}
    for hit in hits:
        if not db.is_weak(hit.algorithm) or not hit.routines:
            continue
        owners = set(hit.routines)
        for entry in hit.routines:
            owners.update(program.graph.callers(entry))
        if not owners & verified and not _covered(hit, result.primitives, program):
            result.diagnostics.append(Diagnostic('bare-init', hit.vaddr, hit.algorithm))
            logger.warning(f"{hit.algorithm} constants at {hit.vaddr:#x} belong to no verified routine")

    result.diagnostics = sorted(set(result.diagnostics), key=lambda d: (d.vaddr, d.kind, d.detail))
    for primitive in result.primitives:
        logger.info(f"identified {primitive.algorithm} at {primitive.entry:#x} ({primitive.layout})")
    return result


def _covered(hit: ConstantHit, primitives: Sequence[IdentifiedPrimitive], program: Program) -> bool:
    """True when the hit's routine is owned by an identified primitive."""
    for primitive in primitives:
        owned = program.graph.exclusive_callees(primitive.entry) | {primitive.entry}
        if set(hit.routines) & owned:
            return True
    return False
