import pytest

from conftest import CORPUS_BINARIES, corpus_program
from hashswap.errors import DisplacementOverflow, EncodingUnsupported, UndecodableInstruction
from hashswap.x86 import (
    Imm, Instruction, Mem, Reg, assemble, decode, decode_all, encode, fits, full_reg, reencode, to_signed,
)

# GNU as output for a cross-section of compiler idioms
GAS_ENCODINGS = [
    '55',                     # push rbp
    '4889e5',                 # mov rbp, rsp
    '4883ec60',               # sub rsp, 0x60
    '4881ec00010000',         # sub rsp, 0x100
    '488d45c0',               # lea rax, [rbp-0x40]
    '8b55ac',                 # mov edx, [rbp-0x54]
    'c745ac00000000',         # mov dword [rbp-0x54], 0
    '4898',                   # cdqe
    '0fb6441dc0',             # movzx eax, byte [rbp+rbx-0x40]
    '4801d0',                 # add rax, rdx
    '83f80f',                 # cmp eax, 0xf
    '31c0',                   # xor eax, eax
    'c1e005',                 # shl eax, 5
    '4c8d0500100000',         # lea r8, [rip+0x1000]
    '48c7c0ffffffff',         # mov rax, -1
    'b801000000',             # mov eax, 1
    '8802',                   # mov [rdx], al
    '48ffc7',                 # inc rdi
    'f3ab',                   # rep stosd
    '0fafc2',                 # imul eax, edx
    '448b4c2410',             # mov r9d, [rsp+0x10]
    '486345f8',               # movsxd rax, [rbp-0x8]
    '85c0',                   # test eax, eax
    '4154',                   # push r12
    '6a00',                   # push 0
    '6800000000',             # push 0 (imm32)
    '68ffffff7f',             # push 0x7fffffff
    '68000000ff',             # push -0x1000000
    '415c',                   # pop r12
    'c644242000',             # mov byte [rsp+0x20], 0
    'c9',                     # leave
    'c3',                     # ret
]


@pytest.mark.parametrize('raw', GAS_ENCODINGS)
def test_reencode_reproduces_assembler_output(raw):
    code = bytes.fromhex(raw)
    insn = decode(code, 0x401000)
    assert insn.length == len(code)
    assert encode(insn) == code


def test_decode_frame_access():
    insn = decode(bytes.fromhex('8b55ac'), 0x4006d6)
    assert insn.mnemonic == 'mov'
    assert insn.operands == (Reg('edx'), Mem(4, 'rbp', None, 1, -0x54))
    assert str(insn) == 'mov edx, [rbp-0x54]'


def test_assemble_frame_access():
    insn = assemble('mov', Reg('edx'), Mem(4, 'rbp', disp=-0x54))
    assert insn.raw == bytes.fromhex('8b55ac')


def test_displacement_widens_to_32_bits():
    insn = decode(bytes.fromhex('8b55ac'), 0).with_operands(Reg('edx'), Mem(4, 'rbp', disp=-0x84))
    assert encode(insn) == bytes.fromhex('8b957cffffff')


def test_jump_to_self():
    short = decode(bytes.fromhex('ebfe'), 0x401000)
    assert short.branch_target() == 0x401000
    assert not short.wide
    assert encode(short) == bytes.fromhex('ebfe')
    wide = Instruction(0x401000, 'jmp', (Imm(0x401000, 8),), wide=True)
    assert encode(wide) == bytes.fromhex('e9fbffffff')


def test_branch_follows_new_address():
    call = decode(bytes.fromhex('e836000000'), 0x401005)
    assert call.branch_target() == 0x401040
    moved = reencode(call, 0x500000)
    assert moved.vaddr == 0x500000
    assert moved.branch_target() == 0x401040
    assert moved.raw[0] == 0xe8
    assert int.from_bytes(moved.raw[1:], 'little', signed=True) == 0x401040 - 0x500005


def test_short_branch_widens_when_out_of_reach():
    jle = decode(bytes.fromhex('7e05'), 0x401065)
    assert jle.branch_target() == 0x40106c
    far = reencode(jle, 0x401065 - 0x1000)
    assert far.raw[:2] == bytes.fromhex('0f8e')
    assert far.length == 6


def test_rip_target():
    insn = decode(bytes.fromhex('4c8d0500100000'), 0x401000)
    assert insn.memory_operand().rip_relative
    assert insn.rip_target() == 0x401007 + 0x1000


def test_call_out_of_rel32_range():
    call = Instruction(0, 'call', (Imm(0x1_0000_0000, 8),))
    with pytest.raises(DisplacementOverflow):
        encode(call)


def test_unsupported_mnemonic():
    with pytest.raises(EncodingUnsupported) as excinfo:
        encode(Instruction(0, 'vpxor', (Reg('eax'),)))
    assert excinfo.value.mnemonic == 'vpxor'


def test_mov_rejects_wide_immediate():
    with pytest.raises(EncodingUnsupported):
        assemble('mov', Reg('rax'), Imm(0x1_0000_0000, 8))


def test_decode_empty():
    with pytest.raises(UndecodableInstruction):
        decode(b'', 0x401000)


def test_decode_all_stops_on_garbage():
    with pytest.raises(UndecodableInstruction):
        list(decode_all(bytes.fromhex('90900f'), 0))


def test_decode_all_is_linear():
    insns = list(decode_all(bytes.fromhex('554889e5c9c3'), 0x1000))
    assert [i.mnemonic for i in insns] == ['push', 'mov', 'leave', 'ret']
    assert [i.vaddr for i in insns] == [0x1000, 0x1001, 0x1004, 0x1005]


def test_integer_helpers():
    assert to_signed(0xff, 1) == -1
    assert to_signed(0x7f, 1) == 0x7f
    assert fits(-0x80, 1) and not fits(0x80, 1)
    assert full_reg('dl') == 'rdx'
    assert full_reg('r9d') == 'r9'
    assert full_reg('ah') == 'rax'


def test_push_keeps_immediate_width():
    short, wide = decode(bytes.fromhex('6a00'), 0), decode(bytes.fromhex('6800000000'), 0)
    assert short.operands == (Imm(0, 1),)
    assert wide.operands == (Imm(0, 4),)
    assert encode(wide.with_operands(Imm(3, 4))) == bytes.fromhex('6803000000')
    with pytest.raises(EncodingUnsupported):
        encode(wide.with_operands(Imm(0x80000000, 4)))


@pytest.mark.parametrize('name', CORPUS_BINARIES)
def test_corpus_instructions_reencode(name):
    mismatches = [(insn.vaddr, insn.raw.hex(), encode(insn).hex())
                  for insn in corpus_program(name).instructions() if encode(insn) != insn.raw]
    assert mismatches == []
