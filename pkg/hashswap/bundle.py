"""
Replacement-hash patch bundles.

A bundle is a text file: header lines (``algorithm``, ``digest_size``,
``align``, one ``entry <layout> <offset>`` per parameter order), then the
position-independent ``code`` and ``data`` payloads as hex. The data blob is
placed at ``align_up(len(code), align)`` and reached rip-relatively from the
code, so the pair must be injected as one contiguous blob.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

from hashswap.elf import BinaryImage, Section, Segment, align_up
from hashswap.emulator import LAYOUTS, layout_named, run_routine
from hashswap.errors import BundleError, ExecutionError, HashswapError
from hashswap.signatures import hash_profile

logger = logging.getLogger(__name__)

DEFAULT_BUNDLE = os.path.join(os.path.dirname(__file__), 'data', 'sha256.bundle')
SELF_TEST_BASE = 0x800000


@dataclass(frozen=True)
class PatchBundle:
    algorithm: str
    digest_size: int
    align: int
    entries: Dict[str, int]
    code: bytes
    data: bytes = b''
    source: str = field(default='', compare=False)

    @property
    def data_offset(self) -> int:
        return align_up(len(self.code), self.align)

    def blob(self) -> bytes:
        if not self.data:
            return self.code
        return self.code + bytes(self.data_offset - len(self.code)) + self.data

    def entry(self, layout: str) -> int:
        try:
            return self.entries[layout]
        except KeyError:
            raise BundleError(f"bundle {self.source or self.algorithm} has no entry for layout {layout}")


def parse_bundle(text: str, source: str = '<bundle>') -> PatchBundle:
    header: Dict[str, str] = {}
    entries: Dict[str, int] = {}
    payload = {'code': [], 'data': []}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, _, value = line.partition(' ')
        value = value.strip()
        if key == 'entry':
            parts = value.split()
            if len(parts) != 2:
                raise BundleError(f"{source}:{number}: expected 'entry <layout> <offset>'")
            try:
                layout_named(parts[0])
                entries[parts[0]] = int(parts[1], 16)
            except (HashswapError, ValueError) as e:
                raise BundleError(f"{source}:{number}: {e}")
        elif key in payload:
            payload[key].append(value)
        elif key in ('algorithm', 'digest_size', 'align'):
            header[key] = value
        else:
            raise BundleError(f"{source}:{number}: unknown bundle field {key!r}")

    missing = [k for k in ('algorithm', 'digest_size', 'align') if k not in header]
    if missing:
        raise BundleError(f"{source}: missing header field(s) {', '.join(missing)}")
    try:
        code = bytes.fromhex(''.join(payload['code']))
        data = bytes.fromhex(''.join(payload['data']))
        digest_size = int(header['digest_size'], 0)
        align = int(header['align'], 0)
    except ValueError as e:
        raise BundleError(f"{source}: {e}")
    if not code:
        raise BundleError(f"{source}: empty code payload")
    if align <= 0 or align & (align - 1):
        raise BundleError(f"{source}: alignment {align} is not a power of two")
    for layout, offset in entries.items():
        if not 0 <= offset < len(code):
            raise BundleError(f"{source}: entry {layout} at {offset:#x} lies outside the code")
    return PatchBundle(header['algorithm'], digest_size, align, entries, code, data, source)


def load_bundle(path: Optional[str] = None) -> PatchBundle:
    path = path or DEFAULT_BUNDLE
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise BundleError(f"cannot read bundle {path}: {e}")
    bundle = parse_bundle(text, path)
    logger.debug(f"loaded {bundle.algorithm} bundle from {path}: {len(bundle.code)} code bytes, "
                 f"{len(bundle.data)} data bytes, {len(bundle.entries)} entries")
    return bundle


def bundle_image(bundle: PatchBundle, base: int = SELF_TEST_BASE) -> BinaryImage:
    """The bundle blob alone, mapped as a one-segment image."""
    blob = bundle.blob()
    return BinaryImage('<bundle>', blob, (Segment(0, base, 0, len(blob), len(blob), 'r-x'),),
                       (Section('.hs.text', base, 0, len(blob), 'code'),), base)


def self_test(bundle: PatchBundle, gas: int = 5_000_000):
    """Run every entry on the profile's test input; each must produce the
    expected digest."""
    profile = hash_profile(bundle.algorithm)
    if profile.digest_size != bundle.digest_size:
        raise BundleError(f"bundle digest size {bundle.digest_size} does not match "
                          f"{bundle.algorithm} ({profile.digest_size})")
    missing = [layout.order for layout in LAYOUTS if layout.order not in bundle.entries]
    if missing:
        raise BundleError(f"bundle lacks entries for {', '.join(missing)}")
    image = bundle_image(bundle)
    for layout in LAYOUTS:
        try:
            output = run_routine(image, SELF_TEST_BASE + bundle.entries[layout.order], layout,
                                 profile.test_input, gas)
        except ExecutionError as e:
            raise BundleError(f"entry {layout} failed: {e}")
        if output[:profile.digest_size] != profile.expected_digest:
            raise BundleError(f"entry {layout} produced {output[:profile.digest_size].hex()}, "
                              f"expected {profile.expected_digest.hex()}")
    logger.info(f"{bundle.algorithm} bundle passed its self test on {len(LAYOUTS)} layouts")
