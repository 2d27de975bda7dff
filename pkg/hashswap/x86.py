"""
x86-64 instruction model
========================

Decoding goes through capstone; encoding is done here for the integer subset
the rewriter needs, choosing the same (shortest) forms GNU as emits so that
``encode(decode(raw)) == raw`` for compiler output.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple, Union

import capstone
from capstone import x86 as cs_x86

from hashswap.errors import DisplacementOverflow, EncodingUnsupported, UndecodableInstruction

logger = logging.getLogger(__name__)

GPR64 = ['rax', 'rcx', 'rdx', 'rbx', 'rsp', 'rbp', 'rsi', 'rdi',
         'r8', 'r9', 'r10', 'r11', 'r12', 'r13', 'r14', 'r15']
GPR32 = ['eax', 'ecx', 'edx', 'ebx', 'esp', 'ebp', 'esi', 'edi',
         'r8d', 'r9d', 'r10d', 'r11d', 'r12d', 'r13d', 'r14d', 'r15d']
GPR16 = ['ax', 'cx', 'dx', 'bx', 'sp', 'bp', 'si', 'di',
         'r8w', 'r9w', 'r10w', 'r11w', 'r12w', 'r13w', 'r14w', 'r15w']
GPR8 = ['al', 'cl', 'dl', 'bl', 'spl', 'bpl', 'sil', 'dil',
        'r8b', 'r9b', 'r10b', 'r11b', 'r12b', 'r13b', 'r14b', 'r15b']
HIGH8 = {'ah': 0, 'ch': 1, 'dh': 2, 'bh': 3}

REGISTERS: Dict[str, Tuple[int, int]] = {}
for _size, _names in ((8, GPR64), (4, GPR32), (2, GPR16), (1, GPR8)):
    for _number, _name in enumerate(_names):
        REGISTERS[_name] = (_number, _size)

CONDITION_CODES = {
    'o': 0x0, 'no': 0x1, 'b': 0x2, 'c': 0x2, 'nae': 0x2, 'ae': 0x3, 'nb': 0x3, 'nc': 0x3,
    'e': 0x4, 'z': 0x4, 'ne': 0x5, 'nz': 0x5, 'be': 0x6, 'na': 0x6, 'a': 0x7, 'nbe': 0x7,
    's': 0x8, 'ns': 0x9, 'p': 0xa, 'pe': 0xa, 'np': 0xb, 'po': 0xb,
    'l': 0xc, 'nge': 0xc, 'ge': 0xd, 'nl': 0xd, 'le': 0xe, 'ng': 0xe, 'g': 0xf, 'nle': 0xf,
}

ALU_OPS = {'add': 0, 'or': 1, 'adc': 2, 'sbb': 3, 'and': 4, 'sub': 5, 'xor': 6, 'cmp': 7}
SHIFT_OPS = {'rol': 0, 'ror': 1, 'rcl': 2, 'rcr': 3, 'shl': 4, 'sal': 4, 'shr': 5, 'sar': 7}
UNARY_OPS = {'not': 2, 'neg': 3, 'mul': 4, 'div': 6, 'idiv': 7}
STRING_OPS = {'stosb': (0xaa, 1), 'stosw': (0xab, 2), 'stosd': (0xab, 4), 'stosq': (0xab, 8),
              'movsb': (0xa4, 1), 'movsw': (0xa5, 2), 'movsd': (0xa5, 4), 'movsq': (0xa5, 8)}
FIXED = {'ret': b'\xc3', 'leave': b'\xc9', 'cdqe': b'\x48\x98', 'cdq': b'\x99',
         'cqo': b'\x48\x99', 'cwde': b'\x98', 'int3': b'\xcc', 'hlt': b'\xf4'}

# Canonical multi-byte nops by length (same table the assemblers use).
NOPS = {
    1: bytes.fromhex('90'),
    2: bytes.fromhex('6690'),
    3: bytes.fromhex('0f1f00'),
    4: bytes.fromhex('0f1f4000'),
    5: bytes.fromhex('0f1f440000'),
    6: bytes.fromhex('660f1f440000'),
    7: bytes.fromhex('0f1f8000000000'),
    8: bytes.fromhex('0f1f840000000000'),
    9: bytes.fromhex('660f1f840000000000'),
    10: bytes.fromhex('662e0f1f840000000000'),
    11: bytes.fromhex('66662e0f1f840000000000'),
}


def reg_number(name: str) -> int:
    if name in HIGH8:
        return HIGH8[name] + 4
    return REGISTERS[name][0]


def reg_size(name: str) -> int:
    if name in HIGH8:
        return 1
    return REGISTERS[name][1]


def full_reg(name: str) -> str:
    """64-bit register containing ``name``."""
    if name in HIGH8:
        return GPR64[HIGH8[name]]
    return GPR64[REGISTERS[name][0]]


def reg_name(number: int, size: int) -> str:
    return {8: GPR64, 4: GPR32, 2: GPR16, 1: GPR8}[size][number]


def to_signed(value: int, size: int) -> int:
    bits = size * 8
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def fits(value: int, size: int) -> bool:
    bits = size * 8
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


@dataclass(frozen=True)
class Reg:
    name: str

    @property
    def size(self) -> int:
        return reg_size(self.name)

    @property
    def number(self) -> int:
        return reg_number(self.name)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int
    size: int = 4

    def __str__(self) -> str:
        return hex(self.value)


@dataclass(frozen=True)
class Mem:
    size: int
    base: Optional[str] = None
    index: Optional[str] = None
    scale: int = 1
    disp: int = 0

    @property
    def rip_relative(self) -> bool:
        return self.base == 'rip'

    def with_disp(self, disp: int) -> 'Mem':
        return replace(self, disp=disp)

    def __str__(self) -> str:
        parts = []
        if self.base:
            parts.append(self.base)
        if self.index:
            parts.append(f"{self.index}*{self.scale}")
        text = '+'.join(parts)
        if self.disp or not parts:
            text += f"{'-' if self.disp < 0 else '+' if parts else ''}{abs(self.disp):#x}"
        return f"[{text}]"


Operand = Union[Reg, Imm, Mem]

BRANCHES = {'jmp', 'call'} | {f"j{cc}" for cc in CONDITION_CODES}


@dataclass(frozen=True)
class Instruction:
    vaddr: int
    mnemonic: str
    operands: Tuple[Operand, ...] = ()
    raw: bytes = b''
    prefix: Optional[str] = None
    wide: bool = field(default=False, compare=False)

    @property
    def length(self) -> int:
        return len(self.raw)

    @property
    def end(self) -> int:
        return self.vaddr + len(self.raw)

    @property
    def is_call(self) -> bool:
        return self.mnemonic == 'call'

    @property
    def is_return(self) -> bool:
        return self.mnemonic == 'ret'

    @property
    def is_jump(self) -> bool:
        return self.mnemonic == 'jmp'

    @property
    def is_conditional(self) -> bool:
        return self.mnemonic in BRANCHES and self.mnemonic not in ('jmp', 'call')

    @property
    def is_branch(self) -> bool:
        return self.mnemonic in BRANCHES

    @property
    def is_nop(self) -> bool:
        return self.mnemonic == 'nop'

    def branch_target(self) -> Optional[int]:
        """Absolute target of a direct jmp/jcc/call."""
        if self.is_branch and len(self.operands) == 1 and isinstance(self.operands[0], Imm):
            return self.operands[0].value
        return None

    def memory_operand(self) -> Optional[Mem]:
        for op in self.operands:
            if isinstance(op, Mem):
                return op
        return None

    def rip_target(self) -> Optional[int]:
        mem = self.memory_operand()
        if mem is not None and mem.rip_relative:
            return self.end + mem.disp
        return None

    def with_operands(self, *operands: Operand) -> 'Instruction':
        return replace(self, operands=tuple(operands))

    def __str__(self) -> str:
        text = f"{self.prefix} {self.mnemonic}" if self.prefix else self.mnemonic
        if self.operands:
            text += ' ' + ', '.join(str(op) for op in self.operands)
        return text


# -- decoding ---------------------------------------------------------------

_CS = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
_CS.detail = True


def _convert(insn, op, dst_size: int) -> Operand:
    if op.type == cs_x86.X86_OP_REG:
        return Reg(insn.reg_name(op.reg))
    if op.type == cs_x86.X86_OP_IMM:
        return Imm(op.imm, op.size or dst_size)
    mem = op.mem
    base = insn.reg_name(mem.base) if mem.base else None
    index = insn.reg_name(mem.index) if mem.index else None
    return Mem(op.size, base, index, mem.scale if index else 1, mem.disp)


def _from_capstone(insn) -> Instruction:
    words = insn.mnemonic.split()
    prefix = None
    while len(words) > 1 and words[0] in ('rep', 'repe', 'repz', 'repne', 'repnz', 'lock',
                                          'cs', 'ds', 'data16', 'notrack', 'bnd'):
        if words[0] in ('rep', 'repe', 'repz', 'repne', 'repnz', 'lock'):
            prefix = words[0]
        words.pop(0)
    mnemonic = words[-1]
    raw = bytes(insn.bytes)
    ops = list(insn.operands)
    dst_size = ops[0].size if ops else 8

    if mnemonic == 'xchg' and raw == b'\x66\x90':
        return Instruction(insn.address, 'nop', (), raw)
    if mnemonic == 'nop':
        return Instruction(insn.address, 'nop', (), raw)
    if mnemonic in STRING_OPS:
        return Instruction(insn.address, mnemonic, (), raw, prefix)
    if mnemonic.startswith('stos') or mnemonic.startswith('movs') and mnemonic not in (
            'movsx', 'movsxd', 'movss'):
        suffix = {1: 'b', 2: 'w', 4: 'd', 8: 'q'}[dst_size]
        return Instruction(insn.address, mnemonic[:4] + suffix, (), raw, prefix)

    operands: List[Operand] = []
    for op in ops:
        operand = _convert(insn, op, dst_size)
        if isinstance(operand, Imm):
            if mnemonic in BRANCHES:
                operand = Imm(operand.value, 8)
            elif mnemonic in SHIFT_OPS:
                operand = Imm(operand.value & 0xff, 1)
            elif mnemonic == 'push':
                operand = Imm(to_signed(operand.value, 8), 1 if insn.opcode[0] == 0x6a else 4)
            elif mnemonic == 'ret':
                operand = Imm(operand.value & 0xffff, 2)
            else:
                size = dst_size if dst_size in (1, 2, 4, 8) else operand.size
                operand = Imm(to_signed(operand.value, size), size)
        operands.append(operand)

    # d0/d1/d2/d3 forms: make the shift count explicit
    if mnemonic in SHIFT_OPS and len(operands) == 1:
        operands.append(Imm(1, 1))

    wide = mnemonic in BRANCHES and mnemonic != 'call' and len(raw) > 2
    return Instruction(insn.address, mnemonic, tuple(operands), raw, prefix, wide)


def decode(code: bytes, vaddr: int) -> Instruction:
    """Decode the single instruction at the start of ``code``."""
    for insn in _CS.disasm(code[:15], vaddr, 1):
        return _from_capstone(insn)
    raise UndecodableInstruction("undecodable bytes", vaddr)


def decode_all(code: bytes, vaddr: int) -> Iterator[Instruction]:
    """Linear decode; raises UndecodableInstruction where decoding breaks off."""
    offset = 0
    while offset < len(code):
        insn = decode(code[offset:offset + 15], vaddr + offset)
        yield insn
        offset += insn.length


# -- encoding ---------------------------------------------------------------

class _Rex:
    def __init__(self, w: bool = False):
        self.w = w
        self.r = self.x = self.b = False
        self.forced = False

    def need(self, name: str):
        if name in ('spl', 'bpl', 'sil', 'dil'):
            self.forced = True

    def byte(self) -> bytes:
        value = 0x40 | (self.w << 3) | (self.r << 2) | (self.x << 1) | self.b
        if value != 0x40 or self.forced:
            return bytes([value])
        return b''


def _modrm(reg_field: int, rm: Operand, rex: _Rex) -> bytes:
    rex.r = bool(reg_field & 8)
    reg_field &= 7
    if isinstance(rm, Reg):
        rex.need(rm.name)
        number = rm.number
        rex.b = bool(number & 8) and rm.name not in HIGH8
        return bytes([0xc0 | reg_field << 3 | number & 7])
    if not isinstance(rm, Mem):
        raise EncodingUnsupported('modrm', f"operand {rm}")

    if rm.rip_relative:
        return bytes([reg_field << 3 | 5]) + _disp32(rm.disp)

    scale_bits = {1: 0, 2: 1, 4: 2, 8: 3}[rm.scale]
    index_bits = 4
    if rm.index is not None:
        index = reg_number(rm.index)
        if index == 4:
            raise EncodingUnsupported('modrm', 'rsp cannot be an index')
        rex.x = bool(index & 8)
        index_bits = index & 7

    if rm.base is None:
        sib = scale_bits << 6 | index_bits << 3 | 5
        return bytes([reg_field << 3 | 4, sib]) + _disp32(rm.disp)

    base = reg_number(rm.base)
    rex.b = bool(base & 8)
    if rm.disp == 0 and base & 7 != 5:
        mod, disp = 0, b''
    elif fits(rm.disp, 1):
        mod, disp = 1, (rm.disp & 0xff).to_bytes(1, 'little')
    else:
        mod, disp = 2, _disp32(rm.disp)

    if rm.index is not None or base & 7 == 4:
        sib = scale_bits << 6 | index_bits << 3 | base & 7
        return bytes([mod << 6 | reg_field << 3 | 4, sib]) + disp
    return bytes([mod << 6 | reg_field << 3 | base & 7]) + disp


def _disp32(disp: int) -> bytes:
    if not fits(disp, 4):
        raise EncodingUnsupported('modrm', f"displacement {disp:#x} exceeds 32 bits")
    return (disp & 0xffffffff).to_bytes(4, 'little')


def _imm(value: int, size: int) -> bytes:
    if not fits(value, size) and not (0 <= value < 1 << (size * 8)):
        raise EncodingUnsupported('imm', f"{value:#x} does not fit {size} bytes")
    return (value & ((1 << (size * 8)) - 1)).to_bytes(size, 'little')


def _assemble(size: int, opcode: bytes, reg_field: int, rm: Operand, tail: bytes = b'',
              default64: bool = False, prefix: bytes = b'', other: Optional[Reg] = None) -> bytes:
    """Prefixes, REX, opcode, ModRM/SIB/disp and trailing immediate."""
    rex = _Rex(w=size == 8 and not default64)
    if other is not None:
        rex.need(other.name)
    body = _modrm(reg_field, rm, rex)
    legacy = prefix + (b'\x66' if size == 2 else b'')
    return legacy + rex.byte() + opcode + body + tail


def _size_of(op: Operand) -> int:
    if isinstance(op, (Reg, Mem)):
        return op.size
    return op.size


def _encode_alu(n: int, dst: Operand, src: Operand) -> bytes:
    size = _size_of(dst)
    wide = 0 if size == 1 else 1
    if isinstance(src, Imm):
        value = src.value
        if size == 1:
            if isinstance(dst, Reg) and dst.name == 'al':
                return bytes([n * 8 + 4]) + _imm(value, 1)
            return _assemble(1, b'\x80', n, dst, _imm(value, 1))
        if fits(value, 1):
            return _assemble(size, b'\x83', n, dst, _imm(value, 1))
        imm_size = 2 if size == 2 else 4
        if isinstance(dst, Reg) and dst.number == 0:
            return _assemble_short(size, bytes([n * 8 + 5]), 0) + _imm(value, imm_size)
        return _assemble(size, b'\x81', n, dst, _imm(value, imm_size))
    if isinstance(src, Reg):
        return _assemble(size, bytes([n * 8 + wide]), src.number, dst, other=src)
    if isinstance(dst, Reg) and isinstance(src, Mem):
        return _assemble(size, bytes([n * 8 + 2 + wide]), dst.number, src, other=dst)
    raise EncodingUnsupported('alu', f"{dst}, {src}")


def _assemble_short(size: int, opcode: bytes, regnum: int, prefix: bytes = b'',
                    default64: bool = False) -> bytes:
    """Opcode with the register folded into the low bits (no ModRM)."""
    rex = _Rex(w=size == 8 and not default64)
    rex.b = bool(regnum & 8)
    return prefix + (b'\x66' if size == 2 else b'') + rex.byte() + opcode


def _encode_mov(dst: Operand, src: Operand, insn: Instruction) -> bytes:
    size = _size_of(dst)
    if isinstance(src, Imm):
        if isinstance(dst, Reg):
            number = dst.number
            if size == 8 and not fits(src.value, 4):
                raise EncodingUnsupported('mov', 'use movabs for 64-bit immediates', insn.vaddr)
            if size == 8:
                return _assemble(8, b'\xc7', 0, dst, _imm(src.value, 4))
            rex = _Rex()
            rex.need(dst.name)
            rex.b = bool(number & 8) and dst.name not in HIGH8
            opcode = (0xb0 if size == 1 else 0xb8) + (number & 7)
            return (b'\x66' if size == 2 else b'') + rex.byte() + bytes([opcode]) + _imm(src.value, size)
        if size == 1:
            return _assemble(1, b'\xc6', 0, dst, _imm(src.value, 1))
        return _assemble(size, b'\xc7', 0, dst, _imm(src.value, min(size, 4)))
    if isinstance(src, Reg):
        return _assemble(size, b'\x88' if size == 1 else b'\x89', src.number, dst, other=src)
    if isinstance(dst, Reg) and isinstance(src, Mem):
        return _assemble(size, b'\x8a' if size == 1 else b'\x8b', dst.number, src, other=dst)
    raise EncodingUnsupported('mov', f"{dst}, {src}", insn.vaddr)


def _encode_branch(insn: Instruction, vaddr: int) -> bytes:
    target = insn.branch_target()
    mnemonic = insn.mnemonic
    if target is None:
        op = insn.operands[0]
        reg_field = 2 if mnemonic == 'call' else 4
        if mnemonic not in ('jmp', 'call'):
            raise EncodingUnsupported(mnemonic, 'indirect conditional branch', insn.vaddr)
        return _assemble(8, b'\xff', reg_field, op, default64=True)
    if mnemonic == 'call':
        return b'\xe8' + _rel32(target - (vaddr + 5), insn)
    if mnemonic == 'jmp':
        short = target - (vaddr + 2)
        if not insn.wide and fits(short, 1):
            return b'\xeb' + _imm(short, 1)
        return b'\xe9' + _rel32(target - (vaddr + 5), insn)
    cc = CONDITION_CODES[mnemonic[1:]]
    short = target - (vaddr + 2)
    if not insn.wide and fits(short, 1):
        return bytes([0x70 + cc]) + _imm(short, 1)
    return bytes([0x0f, 0x80 + cc]) + _rel32(target - (vaddr + 6), insn)


def _rel32(rel: int, insn: Instruction) -> bytes:
    if not fits(rel, 4):
        raise DisplacementOverflow(f"branch target out of rel32 range for {insn.mnemonic}", insn.vaddr)
    return _imm(rel, 4)


def encode(insn: Instruction, vaddr: Optional[int] = None) -> bytes:
    """Encode ``insn`` as if placed at ``vaddr`` (defaults to its own address).

    Rip-relative displacements are emitted as stored; callers moving code
    recompute them first.
    """
    at = insn.vaddr if vaddr is None else vaddr
    mnemonic = insn.mnemonic
    ops = insn.operands

    if mnemonic == 'nop':
        if insn.raw and (not ops):
            return insn.raw
        return NOPS[1]
    if mnemonic in FIXED and not ops:
        return FIXED[mnemonic]
    if mnemonic == 'ret' and ops:
        return b'\xc2' + _imm(ops[0].value, 2)
    if mnemonic in BRANCHES:
        return _encode_branch(insn, at)
    if mnemonic in STRING_OPS:
        opcode, size = STRING_OPS[mnemonic]
        prefix = b'\xf3' if insn.prefix in ('rep', 'repe', 'repz') else b''
        return prefix + (b'\x66' if size == 2 else b'') + (b'\x48' if size == 8 else b'') + bytes([opcode])

    if mnemonic in ALU_OPS and len(ops) == 2:
        return _encode_alu(ALU_OPS[mnemonic], ops[0], ops[1])
    if mnemonic == 'test' and len(ops) == 2:
        dst, src = ops
        size = _size_of(dst)
        if isinstance(src, Imm):
            imm = _imm(src.value, 1 if size == 1 else 2 if size == 2 else 4)
            if isinstance(dst, Reg) and dst.number == 0 and dst.name not in HIGH8:
                return _assemble_short(size, b'\xa8' if size == 1 else b'\xa9', 0) + imm
            return _assemble(size, b'\xf6' if size == 1 else b'\xf7', 0, dst, imm)
        return _assemble(size, b'\x84' if size == 1 else b'\x85', src.number, dst, other=src)
    if mnemonic == 'mov' and len(ops) == 2:
        return _encode_mov(ops[0], ops[1], insn)
    if mnemonic == 'movabs':
        dst, src = ops
        if isinstance(dst, Reg) and isinstance(src, Imm):
            return _assemble_short(8, bytes([0xb8 + (dst.number & 7)]), dst.number) + _imm(src.value, 8)
        raise EncodingUnsupported(mnemonic, 'only register, imm64', insn.vaddr)
    if mnemonic == 'lea':
        dst, src = ops
        return _assemble(dst.size, b'\x8d', dst.number, src, other=dst)
    if mnemonic in ('movzx', 'movsx'):
        dst, src = ops
        second = {('movzx', 1): 0xb6, ('movzx', 2): 0xb7,
                  ('movsx', 1): 0xbe, ('movsx', 2): 0xbf}[(mnemonic, _size_of(src))]
        rex_other = src if isinstance(src, Reg) else None
        return _assemble(dst.size, bytes([0x0f, second]), dst.number, src, other=rex_other)
    if mnemonic == 'movsxd':
        dst, src = ops
        return _assemble(dst.size, b'\x63', dst.number, src)
    if mnemonic in SHIFT_OPS:
        dst, count = ops
        size = _size_of(dst)
        n = SHIFT_OPS[mnemonic]
        if isinstance(count, Reg):
            return _assemble(size, b'\xd2' if size == 1 else b'\xd3', n, dst)
        if count.value == 1:
            return _assemble(size, b'\xd0' if size == 1 else b'\xd1', n, dst)
        return _assemble(size, b'\xc0' if size == 1 else b'\xc1', n, dst, _imm(count.value, 1))
    if mnemonic in ('inc', 'dec'):
        dst = ops[0]
        size = _size_of(dst)
        return _assemble(size, b'\xfe' if size == 1 else b'\xff', 0 if mnemonic == 'inc' else 1, dst)
    if mnemonic in UNARY_OPS or (mnemonic == 'imul' and len(ops) == 1):
        dst = ops[0]
        size = _size_of(dst)
        n = 5 if mnemonic == 'imul' else UNARY_OPS[mnemonic]
        return _assemble(size, b'\xf6' if size == 1 else b'\xf7', n, dst)
    if mnemonic == 'imul':
        if len(ops) == 2:
            dst, src = ops
            return _assemble(dst.size, b'\x0f\xaf', dst.number, src, other=dst)
        dst, src, imm = ops
        if fits(imm.value, 1):
            return _assemble(dst.size, b'\x6b', dst.number, src, _imm(imm.value, 1))
        return _assemble(dst.size, b'\x69', dst.number, src,
                         _imm(imm.value, 2 if dst.size == 2 else 4))
    if mnemonic == 'push':
        op = ops[0]
        if isinstance(op, Reg):
            return _assemble_short(8, bytes([0x50 + (op.number & 7)]), op.number, default64=True)
        if isinstance(op, Imm):
            if op.size == 1:
                return b'\x6a' + _imm(op.value, 1)
            if not fits(op.value, 4):
                raise EncodingUnsupported('push', f"{op.value:#x} does not sign-extend from 4 bytes")
            return b'\x68' + _imm(op.value, 4)
        return _assemble(8, b'\xff', 6, op, default64=True)
    if mnemonic == 'pop':
        op = ops[0]
        if isinstance(op, Reg):
            return _assemble_short(8, bytes([0x58 + (op.number & 7)]), op.number, default64=True)
        return _assemble(8, b'\x8f', 0, op, default64=True)
    if mnemonic == 'bswap':
        op = ops[0]
        return _assemble_short(op.size, bytes([0x0f, 0xc8 + (op.number & 7)]), op.number)
    if mnemonic == 'xchg':
        dst, src = ops
        size = _size_of(dst)
        if isinstance(dst, Reg) and isinstance(src, Reg) and size > 1 and 0 in (dst.number, src.number):
            other = src if dst.number == 0 else dst
            return _assemble_short(size, bytes([0x90 + (other.number & 7)]), other.number)
        if isinstance(src, Reg):
            return _assemble(size, b'\x86' if size == 1 else b'\x87', src.number, dst, other=src)
        return _assemble(size, b'\x86' if size == 1 else b'\x87', dst.number, src, other=dst)
    if mnemonic.startswith('cmov') and mnemonic[4:] in CONDITION_CODES:
        dst, src = ops
        cc = CONDITION_CODES[mnemonic[4:]]
        return _assemble(dst.size, bytes([0x0f, 0x40 + cc]), dst.number, src, other=dst)
    if mnemonic.startswith('set') and mnemonic[3:] in CONDITION_CODES:
        cc = CONDITION_CODES[mnemonic[3:]]
        return _assemble(1, bytes([0x0f, 0x90 + cc]), 0, ops[0])

    raise EncodingUnsupported(mnemonic, str(insn), insn.vaddr)


def assemble(mnemonic: str, *operands: Operand, vaddr: int = 0, prefix: Optional[str] = None) -> Instruction:
    """Build an instruction from parts and fill in its encoding."""
    insn = Instruction(vaddr, mnemonic, tuple(operands), b'', prefix)
    return replace(insn, raw=encode(insn))


def reencode(insn: Instruction, vaddr: Optional[int] = None) -> Instruction:
    """Copy of ``insn`` placed at ``vaddr`` with freshly encoded bytes."""
    at = insn.vaddr if vaddr is None else vaddr
    moved = replace(insn, vaddr=at)
    return replace(moved, raw=encode(moved, at))
