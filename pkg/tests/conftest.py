import json
import os
import sys
from functools import lru_cache

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from hashswap.elf import EHDR, PHDR, SHDR, BinaryImage, load, parse_elf  # noqa: E402

CORPUS = os.path.join(ROOT, 'corpus')
MANIFEST = os.path.join(CORPUS, 'manifest.json')
CORPUS_BINARIES = sorted(os.listdir(os.path.join(CORPUS, 'bin')))

# A small hand-assembled program loaded at 0x401000:
#   0x401000 start:  mov edi, 0x401100; call worker; jmp start
#   0x401020 copy:   byte copy loop (rdi -> rdx, rsi bytes), reached by no call
#   0x401040 worker: push rbx; sub rsp, 0x40; ...; add rsp, 0x40; pop rbx; ret
START = bytes.fromhex('bf00114000' 'e836000000' 'ebf4')
COPY = bytes.fromhex('4885f6' '740f' '8a07' '8802' '48ffc7' '48ffc2' '48ffce' '75f1' 'c3')
WORKER = bytes.fromhex(
    '53'                    # push rbx
    '4883ec40'              # sub rsp, 0x40
    '48897c2408'            # mov [rsp+0x8], rdi
    '488d442410'            # lea rax, [rsp+0x10]
    'c744243007000000'      # mov dword [rsp+0x30], 7
    '8b442430'              # mov eax, [rsp+0x30]
    '488d0d00010000'        # lea rcx, [rip+0x100]
    '83f810'                # cmp eax, 0x10
    '7e05'                  # jle +5
    'c644242000'            # mov byte [rsp+0x20], 0
    '4883c440'              # add rsp, 0x40
    '5b'                    # pop rbx
    'c3'                    # ret
)
SYNTHETIC_BASE = 0x401000
COPY_ENTRY = SYNTHETIC_BASE + 0x20
WORKER_ENTRY = SYNTHETIC_BASE + 0x40


def synthetic_code() -> bytes:
    trap = b'\xcc'
    code = START.ljust(0x20, trap) + COPY.ljust(0x20, trap) + WORKER
    return code.ljust(0x80, trap)


def build_elf(code: bytes, code_vaddr: int = 0x401000, data: bytes = b'', data_vaddr: int = 0x402000,
              entry: int = None, machine: int = 0x3e, elf_type: int = 2) -> bytes:
    """Minimal static ELF64 executable: code at file offset 0x1000, optional
    data at 0x2000, section headers for .text, .data and .shstrtab."""
    names = b'\0.text\0.data\0.shstrtab\0'
    text_name, data_name, strtab_name = 1, 7, 13

    phdrs = [PHDR.pack(1, 4 | 1, 0x1000, code_vaddr, code_vaddr, len(code), len(code), 0x1000)]
    if data:
        phdrs.append(PHDR.pack(1, 4 | 2, 0x2000, data_vaddr, data_vaddr, len(data), len(data), 0x1000))

    body = bytearray(0x1000)
    body[64:64 + len(phdrs) * PHDR.size] = b''.join(phdrs)
    body.extend(code)
    if data:
        body.extend(bytes(0x2000 - len(body)))
        body.extend(data)
    strtab_offset = len(body)
    body.extend(names)
    body.extend(bytes(-len(body) % 8))
    shoff = len(body)

    shdrs = [bytes(SHDR.size),
             SHDR.pack(text_name, 1, 0x2 | 0x4, code_vaddr, 0x1000, len(code), 0, 0, 16, 0)]
    if data:
        shdrs.append(SHDR.pack(data_name, 1, 0x2 | 0x1, data_vaddr, 0x2000, len(data), 0, 0, 16, 0))
    shdrs.append(SHDR.pack(strtab_name, 3, 0, 0, strtab_offset, len(names), 0, 0, 1, 0))
    body.extend(b''.join(shdrs))

    ident = b'\x7fELF\x02\x01\x01'.ljust(16, b'\0')
    body[:EHDR.size] = EHDR.pack(ident, elf_type, machine, 1, code_vaddr if entry is None else entry,
                                 64, shoff, 0, EHDR.size, PHDR.size, len(phdrs), SHDR.size,
                                 len(shdrs), len(shdrs) - 1)
    return bytes(body)


def make_image(code: bytes = None, **kwargs) -> BinaryImage:
    return parse_elf(build_elf(synthetic_code() if code is None else code, **kwargs), '<synthetic>')


@lru_cache(maxsize=None)
def corpus_image(name: str) -> BinaryImage:
    return load(os.path.join(CORPUS, 'bin', name))


@lru_cache(maxsize=None)
def corpus_program(name: str):
    from hashswap.disasm import disassemble
    return disassemble(corpus_image(name))


@pytest.fixture(scope='session')
def manifest():
    with open(MANIFEST) as f:
        return json.load(f)


@pytest.fixture(scope='session')
def fixtures(manifest):
    return {fixture['name']: fixture for fixture in manifest['fixtures']}


@pytest.fixture
def synthetic():
    return make_image()


@pytest.fixture
def printer():
    return corpus_image('md5-printer')


@pytest.fixture
def printer_program():
    return corpus_program('md5-printer')
