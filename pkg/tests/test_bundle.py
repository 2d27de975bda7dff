import pytest

from conftest import COPY
from hashswap.bundle import DEFAULT_BUNDLE, bundle_image, load_bundle, parse_bundle, self_test
from hashswap.emulator import LAYOUTS
from hashswap.errors import BundleError


def _bundle_text(code: bytes, data: bytes = b'', digest_size: int = 32, align: int = 16,
                 layouts=None) -> str:
    lines = ['# test bundle', 'algorithm SHA-256', f'digest_size {digest_size}', f'align {align}']
    for layout in layouts if layouts is not None else [l.order for l in LAYOUTS]:
        lines.append(f'entry {layout} 0')
    lines.append(f'code {code.hex()}')
    if data:
        lines.append(f'data {data.hex()}')
    return '\n'.join(lines) + '\n'


def test_default_bundle_passes_self_test():
    bundle = load_bundle()
    assert bundle.source == DEFAULT_BUNDLE
    assert bundle.algorithm == 'SHA-256'
    assert bundle.digest_size == 32
    assert set(bundle.entries) == {layout.order for layout in LAYOUTS}
    self_test(bundle)


def test_blob_places_data_at_alignment():
    bundle = parse_bundle(_bundle_text(COPY, b'\x01\x02'))
    assert bundle.data_offset == 32
    blob = bundle.blob()
    assert blob[:len(COPY)] == COPY
    assert blob[len(COPY):32] == bytes(32 - len(COPY))
    assert blob[32:] == b'\x01\x02'


def test_bundle_image_maps_blob():
    bundle = parse_bundle(_bundle_text(COPY))
    image = bundle_image(bundle, 0x800000)
    assert image.read(0x800000, len(COPY)) == COPY
    assert image.is_code(0x800000)


def test_self_test_rejects_wrong_output():
    bundle = parse_bundle(_bundle_text(COPY))
    with pytest.raises(BundleError, match='produced'):
        self_test(bundle)


def test_self_test_rejects_size_mismatch():
    bundle = parse_bundle(_bundle_text(COPY, digest_size=20))
    with pytest.raises(BundleError, match='digest size'):
        self_test(bundle)


def test_self_test_requires_every_layout():
    bundle = parse_bundle(_bundle_text(COPY, layouts=['ILO']))
    with pytest.raises(BundleError, match='lacks'):
        self_test(bundle)
    with pytest.raises(BundleError):
        bundle.entry('OI')


@pytest.mark.parametrize('text', [
    'algorithm SHA-256\ndigest_size 32\ncode c3\n',
    'algorithm SHA-256\ndigest_size 32\nalign 16\n',
    'algorithm SHA-256\ndigest_size 32\nalign 12\ncode c3\n',
    'algorithm SHA-256\ndigest_size 32\nalign 16\nentry ILO 10\ncode c3\n',
    'algorithm SHA-256\ndigest_size 32\nalign 16\nentry XYZ 0\ncode c3\n',
    'algorithm SHA-256\ndigest_size 32\nalign 16\ncode zz\n',
    'algorithm SHA-256\ndigest_size 32\nalign 16\nversion 2\ncode c3\n',
])
def test_parse_errors(text):
    with pytest.raises(BundleError):
        parse_bundle(text)


def test_missing_file(tmp_path):
    with pytest.raises(BundleError):
        load_bundle(str(tmp_path / 'none.bundle'))
