"""
Models of the C library routines fixture programs import.

A model runs in place of the PLT call: it reads its arguments from the
machine, performs the memory effects itself, and returns a LibcEffect that
tells the taint engine where every written byte (and the return value) came
from.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple, Union

from hashswap.errors import ExecutionError

if TYPE_CHECKING:
    from hashswap.emulator import Machine

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemSource:
    vaddr: int
    size: int


@dataclass(frozen=True)
class RegSource:
    name: str


Source = Union[MemSource, RegSource]


@dataclass(frozen=True)
class Copy:
    """Byte i of [dst, dst+size) is byte i of [src, src+size)."""

    dst: int
    src: int
    size: int


@dataclass(frozen=True)
class Derive:
    """Every byte of [dst, dst+size) depends on all of ``sources``."""

    dst: int
    size: int
    sources: Tuple[Source, ...] = ()


Write = Union[Copy, Derive]


@dataclass
class LibcEffect:
    writes: List[Write] = field(default_factory=list)
    ret: Optional[int] = None
    ret_sources: Tuple[Source, ...] = ()


@dataclass(frozen=True)
class LibcModel:
    name: str
    behavior: Callable[['Machine'], LibcEffect]
    noreturn: bool = False


# -- formatted output -----------------------------------------------------------

_CONVERSION = re.compile(rb'%([-0 #+]*)(\d*)(?:\.(\d+))?(hh|h|ll|l|z)?([diuxXcsp%])')


def format_string(machine: 'Machine', fmt: bytes, first_arg: int) -> Tuple[bytes, List[Tuple[int, int, Tuple[Source, ...]]]]:
    """Render a printf format; returns the text and (offset, length, sources)
    for every converted chunk. Literal text has no sources."""
    out = bytearray()
    chunks = []
    arg = first_arg
    pos = 0
    for match in _CONVERSION.finditer(fmt):
        out.extend(fmt[pos:match.start()])
        pos = match.end()
        flags, width, precision, length, conv = match.groups()
        if conv == b'%':
            out.extend(b'%')
            continue
        value, source = machine.vararg(arg)
        arg += 1
        size = 8 if length in (b'l', b'll', b'z') or conv == b'p' else 4
        if conv == b's':
            text = machine.memory.read_cstring(value)
            if precision:
                text = text[:int(precision)]
            sources: Tuple[Source, ...] = (MemSource(value, len(text) + 1),)
        else:
            sources = (source,)
            value &= (1 << (size * 8)) - 1
            if length == b'hh':
                value &= 0xff
            elif length == b'h':
                value &= 0xffff
            if conv in (b'd', b'i'):
                bits = 8 if length == b'hh' else 16 if length == b'h' else size * 8
                if value >> (bits - 1):
                    value -= 1 << bits
                text = str(value).encode()
            elif conv == b'u':
                text = str(value).encode()
            elif conv == b'x':
                text = f"{value:x}".encode()
            elif conv == b'X':
                text = f"{value:X}".encode()
            elif conv == b'p':
                text = f"{value:#x}".encode()
            else:
                text = bytes([value & 0xff])
        if width and len(text) < int(width):
            pad = int(width) - len(text)
            if b'-' in flags:
                text = text + b' ' * pad
            elif b'0' in flags and conv != b's':
                sign = text[:1] if text[:1] == b'-' else b''
                text = sign + b'0' * pad + text[len(sign):]
            else:
                text = b' ' * pad + text
        chunks.append((len(out), len(text), sources))
        out.extend(text)
    out.extend(fmt[pos:])
    return bytes(out), chunks


def _derive_chunks(dst: int, chunks, total: int) -> List[Write]:
    writes: List[Write] = []
    covered = 0
    for offset, length, sources in chunks:
        if offset > covered:
            writes.append(Derive(dst + covered, offset - covered))
        writes.append(Derive(dst + offset, length, sources))
        covered = offset + length
    if total > covered:
        writes.append(Derive(dst + covered, total - covered))
    return writes


# -- models --------------------------------------------------------------------

def _strlen(m: 'Machine') -> LibcEffect:
    s = m.arg(0)
    n = len(m.memory.read_cstring(s))
    return LibcEffect(ret=n, ret_sources=(MemSource(s, n + 1),))


def _malloc(m: 'Machine') -> LibcEffect:
    size = m.arg(0)
    base = m.allocate(size)
    return LibcEffect(ret=base)


def _calloc(m: 'Machine') -> LibcEffect:
    count, size = m.arg(0), m.arg(1)
    total = count * size
    base = m.allocate(total)
    m.memory.write(base, bytes(total))
    return LibcEffect([Derive(base, total)], ret=base)


def _realloc(m: 'Machine') -> LibcEffect:
    old, size = m.arg(0), m.arg(1)
    base = m.allocate(size)
    writes: List[Write] = []
    if old:
        previous = m.release(old)
        keep = min(previous.size, size)
        m.memory.write(base, m.memory.read(old, keep))
        writes.append(Copy(base, old, keep))
    return LibcEffect(writes, ret=base)


def _free(m: 'Machine') -> LibcEffect:
    pointer = m.arg(0)
    if pointer:
        m.release(pointer)
    return LibcEffect()


def _memcpy(m: 'Machine') -> LibcEffect:
    dst, src, n = m.arg(0), m.arg(1), m.arg(2)
    m.memory.write(dst, m.memory.read(src, n))
    return LibcEffect([Copy(dst, src, n)], ret=dst, ret_sources=(RegSource('rdi'),))


def _memset(m: 'Machine') -> LibcEffect:
    dst, value, n = m.arg(0), m.arg(1) & 0xff, m.arg(2)
    m.memory.write(dst, bytes([value]) * n)
    return LibcEffect([Derive(dst, n, (RegSource('rsi'),))], ret=dst, ret_sources=(RegSource('rdi'),))


def _strcpy(m: 'Machine') -> LibcEffect:
    dst, src = m.arg(0), m.arg(1)
    text = m.memory.read_cstring(src) + b'\0'
    m.memory.write(dst, text)
    return LibcEffect([Copy(dst, src, len(text))], ret=dst, ret_sources=(RegSource('rdi'),))


def _sprintf(m: 'Machine') -> LibcEffect:
    dst, fmt = m.arg(0), m.arg(1)
    text, chunks = format_string(m, m.memory.read_cstring(fmt), 2)
    m.memory.write(dst, text + b'\0')
    return LibcEffect(_derive_chunks(dst, chunks, len(text) + 1), ret=len(text))


def _printf(m: 'Machine') -> LibcEffect:
    text, _chunks = format_string(m, m.memory.read_cstring(m.arg(0)), 1)
    m.stdout.extend(text)
    return LibcEffect(ret=len(text))


def _puts(m: 'Machine') -> LibcEffect:
    m.stdout.extend(m.memory.read_cstring(m.arg(0)) + b'\n')
    return LibcEffect(ret=1)


def _fputs(m: 'Machine') -> LibcEffect:
    m.stdout.extend(m.memory.read_cstring(m.arg(0)))
    return LibcEffect(ret=1)


def _putchar(m: 'Machine') -> LibcEffect:
    c = m.arg(0) & 0xff
    m.stdout.append(c)
    return LibcEffect(ret=c, ret_sources=(RegSource('rdi'),))


def _write(m: 'Machine') -> LibcEffect:
    fd, buf, n = m.arg(0), m.arg(1), m.arg(2)
    if fd not in (1, 2):
        raise ExecutionError(f"write to unsupported descriptor {fd}")
    if fd == 1:
        m.stdout.extend(m.memory.read(buf, n))
    return LibcEffect(ret=n)


def _read(m: 'Machine') -> LibcEffect:
    fd, buf, n = m.arg(0), m.arg(1), m.arg(2)
    if fd != 0:
        raise ExecutionError(f"read from unsupported descriptor {fd}")
    data = m.read_stdin(n)
    m.memory.write(buf, data)
    return LibcEffect([Derive(buf, len(data))], ret=len(data))


def _exit(m: 'Machine') -> LibcEffect:
    m.exit(m.arg(0) & 0xff)
    return LibcEffect()


def _abort(m: 'Machine') -> LibcEffect:
    m.exit(134)
    return LibcEffect()


def builtin_libc_models() -> List[LibcModel]:
    return [
        LibcModel('strlen', _strlen),
        LibcModel('malloc', _malloc),
        LibcModel('calloc', _calloc),
        LibcModel('realloc', _realloc),
        LibcModel('free', _free),
        LibcModel('memcpy', _memcpy),
        LibcModel('memmove', _memcpy),
        LibcModel('memset', _memset),
        LibcModel('strcpy', _strcpy),
        LibcModel('sprintf', _sprintf),
        LibcModel('printf', _printf),
        LibcModel('puts', _puts),
        LibcModel('fputs', _fputs),
        LibcModel('putchar', _putchar),
        LibcModel('write', _write),
        LibcModel('read', _read),
        LibcModel('exit', _exit, noreturn=True),
        LibcModel('_exit', _exit, noreturn=True),
        LibcModel('abort', _abort, noreturn=True),
    ]


def model_table(models: Optional[List[LibcModel]] = None) -> Dict[str, LibcModel]:
    return {model.name: model for model in (models if models is not None else builtin_libc_models())}
