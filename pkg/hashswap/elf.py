"""
ELF64 executable model
======================

Parsing uses pyelftools; writing (segment injection, header extension) packs
the header structures directly since pyelftools is read-only.
"""

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from elftools.common.exceptions import ELFError
from elftools.elf.constants import P_FLAGS, SH_FLAGS
from elftools.elf.elffile import ELFFile

from hashswap.errors import HashswapError, MalformedElf, TruncatedFile, UndecodableInstruction
from hashswap.x86 import decode_all

logger = logging.getLogger(__name__)

EHDR = struct.Struct('<16sHHIQQQIHHHHHH')
PHDR = struct.Struct('<IIQQQQQQ')
SHDR = struct.Struct('<IIQQQQIIQQ')

ET_EXEC = 2
EM_X86_64 = 0x3e
PT_LOAD = 1
PT_PHDR = 6
SHT_PROGBITS = 1
SHT_NOBITS = 8
PAGE = 0x1000

INJECTED_CODE = '.hs.text'
INJECTED_DATA = '.hs.data'


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class Segment:
    index: int
    vaddr: int
    offset: int
    filesz: int
    memsz: int
    flags: str  # e.g. 'r-x'

    @property
    def end(self) -> int:
        return self.vaddr + self.memsz

    def contains(self, vaddr: int) -> bool:
        return self.vaddr <= vaddr < self.end


@dataclass(frozen=True)
class Section:
    name: str
    vaddr: int
    offset: int
    size: int
    kind: str  # code | data | bss

    @property
    def end(self) -> int:
        return self.vaddr + self.size

    def contains(self, vaddr: int) -> bool:
        return self.vaddr <= vaddr < self.end


@dataclass(frozen=True)
class BinaryImage:
    path: str
    raw: bytes
    segments: Tuple[Segment, ...]
    sections: Tuple[Section, ...]
    entry_point: int
    imports: Dict[int, str] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    def serialize(self) -> bytes:
        return self.raw

    def section(self, name: str) -> Optional[Section]:
        for section in self.sections:
            if section.name == name:
                return section
        return None

    def section_at(self, vaddr: int) -> Optional[Section]:
        for section in self.sections:
            if section.contains(vaddr):
                return section
        return None

    def segment_at(self, vaddr: int) -> Optional[Segment]:
        for segment in self.segments:
            if segment.contains(vaddr):
                return segment
        return None

    def code_sections(self) -> List[Section]:
        return [s for s in self.sections if s.kind == 'code']

    def data_sections(self) -> List[Section]:
        return [s for s in self.sections if s.kind in ('data', 'bss')]

    def is_code(self, vaddr: int) -> bool:
        section = self.section_at(vaddr)
        return section is not None and section.kind == 'code'

    def file_offset(self, vaddr: int) -> Optional[int]:
        segment = self.segment_at(vaddr)
        if segment is None or vaddr >= segment.vaddr + segment.filesz:
            return None
        return segment.offset + (vaddr - segment.vaddr)

    def read(self, vaddr: int, size: int) -> bytes:
        """Loaded contents of [vaddr, vaddr+size); bytes past p_filesz read as zero."""
        segment = self.segment_at(vaddr)
        if segment is None or vaddr + size > segment.end:
            raise HashswapError(f"read of {size} bytes outside loadable segments", vaddr)
        start = vaddr - segment.vaddr
        backed = self.raw[segment.offset + start:segment.offset + min(start + size, segment.filesz)]
        return backed + bytes(size - len(backed))

    def section_bytes(self, section: Section) -> bytes:
        if section.kind == 'bss':
            return bytes(section.size)
        return self.raw[section.offset:section.offset + section.size]

    @property
    def max_vaddr(self) -> int:
        return max(segment.end for segment in self.segments)


def _check_header(data: bytes):
    if len(data) < EHDR.size:
        raise TruncatedFile(f"file is {len(data)} bytes, shorter than an ELF64 header")
    if data[:4] != b'\x7fELF':
        raise MalformedElf("bad ELF magic")
    if data[4] != 2:
        raise MalformedElf(f"ELF class {data[4]} is not ELF64")
    if data[5] != 1:
        raise MalformedElf("not a little-endian ELF")
    (_ident, e_type, e_machine, _version, _entry, e_phoff, e_shoff, _flags, _ehsize,
     e_phentsize, e_phnum, e_shentsize, e_shnum, _shstrndx) = EHDR.unpack_from(data)
    if e_machine != EM_X86_64:
        raise MalformedElf(f"machine {e_machine:#x} is not x86-64")
    if e_type != ET_EXEC:
        raise MalformedElf(f"ELF type {e_type} is not a static executable (ET_EXEC)")
    if e_phoff + e_phnum * e_phentsize > len(data):
        raise TruncatedFile("program header table extends beyond end of file")
    if e_shoff + e_shnum * e_shentsize > len(data):
        raise TruncatedFile("section header table extends beyond end of file")


def _flags_text(p_flags: int) -> str:
    return ''.join((
        'r' if p_flags & P_FLAGS.PF_R else '-',
        'w' if p_flags & P_FLAGS.PF_W else '-',
        'x' if p_flags & P_FLAGS.PF_X else '-',
    ))


def parse_elf(data: bytes, path: str = '') -> BinaryImage:
    """Parse an x86-64 ET_EXEC file into a BinaryImage."""
    _check_header(data)
    try:
        elf = ELFFile(io.BytesIO(data))
        segments = []
        for index, seg in enumerate(elf.iter_segments()):
            if seg['p_type'] != 'PT_LOAD':
                continue
            if seg['p_offset'] + seg['p_filesz'] > len(data):
                raise TruncatedFile(f"segment {index} extends beyond end of file")
            segments.append(Segment(index, seg['p_vaddr'], seg['p_offset'], seg['p_filesz'],
                                    seg['p_memsz'], _flags_text(seg['p_flags'])))

        sections = []
        for sec in elf.iter_sections():
            if not sec['sh_flags'] & SH_FLAGS.SHF_ALLOC or not sec['sh_addr']:
                continue
            if sec['sh_type'] == 'SHT_NOBITS':
                kind = 'bss'
            elif sec['sh_flags'] & SH_FLAGS.SHF_EXECINSTR:
                kind = 'code'
            else:
                kind = 'data'
            if kind != 'bss' and sec['sh_offset'] + sec['sh_size'] > len(data):
                raise TruncatedFile(f"section {sec.name} extends beyond end of file")
            sections.append(Section(sec.name, sec['sh_addr'], sec['sh_offset'], sec['sh_size'], kind))
        entry = elf.header['e_entry']
        relocations = _jump_slots(elf)
    except ELFError as e:
        raise MalformedElf(f"pyelftools rejected the file: {e}")

    segments.sort(key=lambda s: s.vaddr)
    for before, after in zip(segments, segments[1:]):
        if before.end > after.vaddr:
            raise MalformedElf(f"loadable segments overlap at {after.vaddr:#x}")
    for section in sections:
        if section.kind == 'bss':
            continue
        owners = [s for s in segments if s.vaddr <= section.vaddr and section.end <= s.vaddr + s.filesz]
        if len(owners) != 1:
            raise MalformedElf(f"section {section.name} is not inside exactly one segment")

    image = BinaryImage(path, bytes(data), tuple(segments), tuple(sections), entry)
    imports = _plt_stubs(image, relocations)
    logger.debug(f"parsed {path or '<bytes>'}: {len(segments)} segments, "
                 f"{len(sections)} sections, {len(imports)} imports")
    return BinaryImage(path, image.raw, image.segments, image.sections, entry, imports)


def load(path: str) -> BinaryImage:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise HashswapError(f"cannot read {path}: {e.strerror}")
    return parse_elf(data, path)


def _jump_slots(elf: ELFFile) -> Dict[int, str]:
    """GOT slot address -> imported symbol name, from .rela.plt."""
    slots = {}
    rela = elf.get_section_by_name('.rela.plt')
    if rela is None:
        return slots
    symtab = elf.get_section(rela['sh_link'])
    for reloc in rela.iter_relocations():
        symbol = symtab.get_symbol(reloc['r_info_sym'])
        slots[reloc['r_offset']] = symbol.name
    return slots


def _plt_stubs(image: BinaryImage, slots: Dict[int, str]) -> Dict[int, str]:
    """PLT stub address -> imported name, by following each stub's indirect jmp."""
    stubs = {}
    if not slots:
        return stubs
    for section in image.code_sections():
        if not section.name.startswith('.plt'):
            continue
        try:
            for insn in decode_all(image.section_bytes(section), section.vaddr):
                if insn.is_jump:
                    target = insn.rip_target()
                    if target in slots:
                        stubs[insn.vaddr] = slots[target]
        except UndecodableInstruction as e:
            logger.warning(f"stopped decoding {section.name}: {e}")
    return stubs


# -- injection ----------------------------------------------------------------

@dataclass(frozen=True)
class InjectionLayout:
    """Where the injected code and data segments land.

    The code segment is placed so that its file offset and virtual address
    differ by the same amount as the first loadable segment's, which keeps
    ``AT_PHDR = load base + e_phoff`` correct for the relocated header table.
    """

    code_vaddr: int
    code_offset: int
    code_size: int
    phdr_offset: int  # within the code segment
    phnum: int
    data_vaddr: int
    data_size: int

    @property
    def code_filesz(self) -> int:
        return self.phdr_offset + self.phnum * PHDR.size


def plan_injection(image: BinaryImage, code_size: int, data_size: int) -> InjectionLayout:
    first = image.segments[0]
    base = first.vaddr - first.offset
    offset = max(align_up(len(image.raw), PAGE), align_up(image.max_vaddr - base, PAGE))
    code_vaddr = base + offset
    old_phnum = EHDR.unpack_from(image.raw)[10]
    phnum = old_phnum + 1 + (1 if data_size else 0)
    phdr_offset = align_up(code_size, 8)
    code_end = code_vaddr + phdr_offset + phnum * PHDR.size
    data_vaddr = align_up(code_end, PAGE) if data_size else 0
    return InjectionLayout(code_vaddr, offset, code_size, phdr_offset, phnum, data_vaddr, data_size)


def inject(image: BinaryImage, layout: InjectionLayout, code: bytes,
           patches: Dict[int, bytes]) -> BinaryImage:
    """New file: ``patches`` (vaddr -> bytes) applied in place, ``code`` and
    a zero-filled data segment injected, program and section headers extended.
    """
    if len(code) != layout.code_size:
        raise HashswapError(f"injected code is {len(code)} bytes, layout expects {layout.code_size}")
    raw = bytearray(image.raw)
    for vaddr, data in sorted(patches.items()):
        offset = image.file_offset(vaddr)
        if offset is None or image.file_offset(vaddr + len(data) - 1) != offset + len(data) - 1:
            raise HashswapError("patch outside file-backed code", vaddr)
        raw[offset:offset + len(data)] = data

    ehdr = list(EHDR.unpack_from(raw))
    e_phoff, e_shoff, e_phentsize, e_phnum = ehdr[5], ehdr[6], ehdr[9], ehdr[10]
    e_shentsize, e_shnum, e_shstrndx = ehdr[11], ehdr[12], ehdr[13]

    phdrs = [list(PHDR.unpack_from(raw, e_phoff + i * e_phentsize)) for i in range(e_phnum)]
    table_vaddr = layout.code_vaddr + layout.phdr_offset
    table_offset = layout.code_offset + layout.phdr_offset
    for phdr in phdrs:
        if phdr[0] == PT_PHDR:
            phdr[2], phdr[3], phdr[4] = table_offset, table_vaddr, table_vaddr
            phdr[5] = phdr[6] = layout.phnum * PHDR.size
    new_loads = [[PT_LOAD, P_FLAGS.PF_R | P_FLAGS.PF_X, layout.code_offset, layout.code_vaddr,
                  layout.code_vaddr, layout.code_filesz, layout.code_filesz, PAGE]]
    if layout.data_size:
        # zero-filled, so only the page congruence of p_offset matters
        data_offset = layout.code_offset
        new_loads.append([PT_LOAD, P_FLAGS.PF_R | P_FLAGS.PF_W, data_offset, layout.data_vaddr,
                          layout.data_vaddr, 0, layout.data_size, PAGE])
    last_load = max(i for i, p in enumerate(phdrs) if p[0] == PT_LOAD)
    phdrs[last_load + 1:last_load + 1] = new_loads

    table = b''.join(PHDR.pack(*p) for p in phdrs)
    raw.extend(bytes(layout.code_offset - len(raw)))
    raw.extend(code)
    raw.extend(bytes(layout.phdr_offset - len(code)))
    raw.extend(table)

    # section headers: originals, then the two injected sections, with a
    # string table extended by their names
    shdrs = [list(SHDR.unpack_from(raw, e_shoff + i * e_shentsize)) for i in range(e_shnum)]
    strtab = shdrs[e_shstrndx]
    names = bytearray(raw[strtab[4]:strtab[4] + strtab[5]])
    code_name = len(names)
    names.extend(INJECTED_CODE.encode() + b'\0')
    data_name = len(names)
    names.extend(INJECTED_DATA.encode() + b'\0')
    strtab[4], strtab[5] = len(raw), len(names)
    raw.extend(names)
    shdrs.append([code_name, SHT_PROGBITS, SH_FLAGS.SHF_ALLOC | SH_FLAGS.SHF_EXECINSTR,
                  layout.code_vaddr, layout.code_offset, layout.code_size, 0, 0, 16, 0])
    if layout.data_size:
        shdrs.append([data_name, SHT_NOBITS, SH_FLAGS.SHF_ALLOC | SH_FLAGS.SHF_WRITE,
                      layout.data_vaddr, new_loads[1][2], layout.data_size, 0, 0, 16, 0])
    raw.extend(bytes(align_up(len(raw), 8) - len(raw)))
    ehdr[6], ehdr[12] = len(raw), len(shdrs)
    ehdr[5], ehdr[10] = table_offset, len(phdrs)
    raw.extend(b''.join(SHDR.pack(*s) for s in shdrs))
    raw[:EHDR.size] = EHDR.pack(*ehdr)

    logger.info(f"injected {len(code)} code bytes at {layout.code_vaddr:#x}"
                + (f", {layout.data_size} data bytes at {layout.data_vaddr:#x}" if layout.data_size else ''))
    return parse_elf(bytes(raw), image.path)
