"""
Phase reports
=============

Identification and taint reports are plain line-oriented text so that
later phases (and people) can read them back. Every report starts with

    # hashswap <version> sha256=<digest of the analysed binary>

and downstream commands refuse a report whose digest does not match the
binary they are given, or which a tool of another major version wrote.
Addresses and offsets are lowercase hex without ``0x``; sizes are decimal
except frame sizes.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from packaging import version

from hashswap import __version__
from hashswap.emulator import layout_named
from hashswap.errors import Diagnostic, HashswapError, ReportMismatch
from hashswap.identify import Identification, IdentifiedPrimitive
from hashswap.taint import HEAP, STACK, STATIC, TaintedBuffer, TaintReport

logger = logging.getLogger(__name__)

IDENTIFY_REPORT = 'identify.txt'
SCOPE_REPORT = 'scope.txt'
HEADER_PREFIX = '# hashswap '


@dataclass(frozen=True)
class ReportHeader:
    version: str
    digest: str

    def render(self) -> str:
        return f"{HEADER_PREFIX}{self.version} sha256={self.digest}"

    @classmethod
    def for_digest(cls, digest: str) -> 'ReportHeader':
        return cls(__version__, digest)


def parse_header(line: str, source: str = '<report>') -> ReportHeader:
    parts = line.strip().split()
    if len(parts) != 4 or parts[:2] != ['#', 'hashswap'] or not parts[3].startswith('sha256='):
        raise ReportMismatch(f"{source}: missing '# hashswap <version> sha256=<hex>' header")
    return ReportHeader(parts[2], parts[3][len('sha256='):])


def check_binding(header: ReportHeader, digest: str, source: str = '<report>'):
    """Refuse reports about another binary or from an incompatible tool."""
    if header.digest != digest:
        raise ReportMismatch(f"{source} describes a binary with sha256 {header.digest[:16]}…, "
                             f"not {digest[:16]}…")
    try:
        written = version.parse(header.version)
    except version.InvalidVersion:
        raise ReportMismatch(f"{source}: unreadable tool version {header.version!r}")
    running = version.parse(__version__)
    if written.major != running.major:
        raise ReportMismatch(f"{source} was written by hashswap {written}, this is {running}")


def _records(text: str, source: str) -> Tuple[ReportHeader, List[Tuple[int, List[str]]]]:
    lines = text.splitlines()
    if not lines:
        raise ReportMismatch(f"{source}: empty report")
    header = parse_header(lines[0], source)
    records = []
    for number, line in enumerate(lines[1:], 2):
        line = line.strip()
        if line and not line.startswith('#'):
            records.append((number, line.split()))
    return header, records


def _hex(text: str, source: str, number: int) -> int:
    try:
        return int(text, 16)
    except ValueError:
        raise HashswapError(f"{source}:{number}: {text!r} is not hex")


def _diagnostic(fields: List[str], source: str, number: int) -> Diagnostic:
    if len(fields) < 3:
        raise HashswapError(f"{source}:{number}: expected 'diagnostic <kind> <vaddr> [detail]'")
    return Diagnostic(fields[1], _hex(fields[2], source, number), ' '.join(fields[3:]))


def _sorted_diagnostics(diagnostics) -> List[Diagnostic]:
    return sorted(set(diagnostics), key=lambda d: (d.vaddr, d.kind, d.detail))


# identification

def render_identification(digest: str, identification: Identification) -> str:
    lines = [ReportHeader.for_digest(digest).render()]
    for primitive in sorted(identification.primitives, key=lambda p: p.entry):
        lines.append(f"identified {primitive.entry:x} {primitive.algorithm} {primitive.layout} "
                     f"{primitive.digest_size}")
        lines.extend(f"callsite {site:x}" for site in sorted(primitive.call_sites))
    for algorithm, vaddr in sorted(identification.detected, key=lambda d: (d[1], d[0])):
        lines.append(f"detected {algorithm} {vaddr:x}")
    lines.extend(d.render() for d in _sorted_diagnostics(identification.diagnostics))
    return '\n'.join(lines) + '\n'


def parse_identification(text: str, source: str = '<identification>') -> Tuple[ReportHeader, Identification]:
    header, records = _records(text, source)
    result = Identification()
    pending: Optional[Dict] = None

    def close():
        if pending is not None:
            result.primitives.append(IdentifiedPrimitive(call_sites=tuple(pending.pop('sites')), **pending))

    for number, fields in records:
        kind = fields[0]
        if kind == 'identified':
            if len(fields) != 5:
                raise HashswapError(f"{source}:{number}: expected 'identified <entry> <algorithm> <layout> <size>'")
            close()
            pending = {'entry': _hex(fields[1], source, number), 'algorithm': fields[2],
                       'layout': layout_named(fields[3]), 'digest_size': int(fields[4]), 'sites': []}
        elif kind == 'callsite':
            if pending is None or len(fields) != 2:
                raise HashswapError(f"{source}:{number}: callsite outside an identified record")
            pending['sites'].append(_hex(fields[1], source, number))
        elif kind == 'detected' and len(fields) == 3:
            result.detected.append((fields[1], _hex(fields[2], source, number)))
        elif kind == 'diagnostic':
            result.diagnostics.append(_diagnostic(fields, source, number))
        else:
            raise HashswapError(f"{source}:{number}: unknown record {kind!r}")
    close()
    return header, result


# taint

def _render_buffer(buffer: TaintedBuffer) -> str:
    if buffer.kind == STACK:
        return f"buffer stack {buffer.location:x} {buffer.offset:x} {buffer.old_size}"
    if buffer.kind == HEAP:
        return f"buffer heap {buffer.location:x} {buffer.old_size}"
    return f"buffer static {buffer.location:x} {buffer.old_size}"


def render_taint(digest: str, reports: Sequence[TaintReport]) -> str:
    lines = [ReportHeader.for_digest(digest).render()]
    for report in sorted(reports, key=lambda r: r.target.entry):
        target = report.target
        lines.append(f"target {target.entry:x} {target.algorithm} {target.digest_size}")
        for buffer in sorted(report.buffers, key=lambda b: (b.kind, b.location, b.offset)):
            lines.append(_render_buffer(buffer))
        lines.extend(f"frame {entry:x} {size:x}" for entry, size in sorted(report.frames))
        lines.extend(d.render() for d in _sorted_diagnostics(report.diagnostics))
    return '\n'.join(lines) + '\n'


def _parse_buffer(fields: List[str], source: str, number: int) -> TaintedBuffer:
    kind = fields[1] if len(fields) > 1 else ''
    if kind == STACK and len(fields) == 5:
        return TaintedBuffer(STACK, _hex(fields[2], source, number), _hex(fields[3], source, number),
                             int(fields[4]))
    if kind in (HEAP, STATIC) and len(fields) == 4:
        return TaintedBuffer(kind, _hex(fields[2], source, number), 0, int(fields[3]))
    raise HashswapError(f"{source}:{number}: malformed buffer record")


def parse_taint(text: str, primitives: Sequence[IdentifiedPrimitive],
                source: str = '<taint>') -> Tuple[ReportHeader, List[TaintReport]]:
    """Taint sections, each bound to the identified primitive it names."""
    header, records = _records(text, source)
    known = {p.entry: p for p in primitives}
    reports: List[TaintReport] = []
    for number, fields in records:
        kind = fields[0]
        if kind == 'target':
            if len(fields) != 4:
                raise HashswapError(f"{source}:{number}: expected 'target <entry> <algorithm> <size>'")
            entry = _hex(fields[1], source, number)
            primitive = known.get(entry)
            if primitive is None or primitive.algorithm != fields[2]:
                raise ReportMismatch(f"{source}:{number}: target {entry:x} is not in the identification report")
            reports.append(TaintReport(primitive))
            continue
        if not reports:
            raise HashswapError(f"{source}:{number}: {kind} record before any target")
        report = reports[-1]
        if kind == 'buffer':
            report.buffers.append(_parse_buffer(fields, source, number))
        elif kind == 'frame' and len(fields) == 3:
            report.frames.append((_hex(fields[1], source, number), _hex(fields[2], source, number)))
        elif kind == 'diagnostic':
            report.diagnostics.append(_diagnostic(fields, source, number))
        else:
            raise HashswapError(f"{source}:{number}: unknown record {kind!r}")
    return header, reports


# files

def write_report(directory: str, name: str, text: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, 'w') as f:
        f.write(text)
    logger.debug(f"wrote {path}")
    return path


def read_report(directory: str, name: str) -> Tuple[str, str]:
    path = os.path.join(directory, name)
    try:
        with open(path) as f:
            return f.read(), path
    except OSError as e:
        raise HashswapError(f"cannot read report {path}: {e}")
