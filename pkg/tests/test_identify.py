import pytest

from conftest import corpus_image, corpus_program
from hashswap.emulator import layout_named
from hashswap.identify import (
    CODE_IMMEDIATE, DATA_SECTION, _preferred, enumerate_layouts, identify, locate_candidates, scan_constants,
)
from hashswap.signatures import SignatureDB

GAS = 5_000_000


def _identify(name):
    return identify(corpus_image(name), SignatureDB(), GAS, corpus_program(name))


def test_printer_md5():
    result = _identify('md5-printer')
    assert len(result.primitives) == 1
    primitive = result.primitives[0]
    assert primitive.entry == 0x400616
    assert primitive.algorithm == 'MD5'
    assert str(primitive.layout) == 'ILO'
    assert primitive.digest_size == 16
    assert primitive.call_sites == (0x40069a,)
    assert result.detected == []


@pytest.mark.parametrize('name', ['md2-ilo-O0', 'md4-oi-O2', 'sha1-oil-O1', 'rmd160-ilo-O3', 'md5-oil-Os'])
def test_library_fixtures(name, fixtures):
    expected = fixtures[name]['weak_routines'][0]
    found = {(p.entry, p.algorithm, str(p.layout)) for p in _identify(name).primitives}
    assert (int(expected['entry'], 16), expected['algorithm'], expected['layout']) in found


def test_scan_finds_md5_iv_in_code():
    hits = scan_constants(corpus_image('md5-ilo-O2'), SignatureDB(), corpus_program('md5-ilo-O2'))
    md5 = [h for h in hits if h.algorithm == 'MD5']
    assert md5
    assert all(h.container == CODE_IMMEDIATE for h in md5)
    assert 0x4017b0 in {h.vaddr for h in md5}


def test_scan_finds_md5_iv_in_rodata():
    hits = scan_constants(corpus_image('md5-printer'), SignatureDB(), corpus_program('md5-printer'))
    iv = [h for h in hits if h.algorithm == 'MD5' and h.signature.kind == 'IV']
    assert [(h.vaddr, h.container) for h in iv] == [(0x4009d0, DATA_SECTION)]


def test_candidates_include_callers():
    program = corpus_program('md5-printer')
    db = SignatureDB()
    hits = scan_constants(corpus_image('md5-printer'), db, program)
    candidates = {c.entry: c.algorithms for c in locate_candidates(hits, program, db)}
    owner = next(h.routines[0] for h in hits if h.algorithm == 'MD5')
    assert owner in candidates
    assert set(candidates[owner]) >= {'MD4', 'MD5'}
    for caller in program.graph.callers(owner):
        assert caller in candidates


def test_detects_non_hash_constants():
    result = _identify('aes-sbox')
    assert result.primitives == []
    assert ('AES', 0x402020) in result.detected
    hits = scan_constants(corpus_image('aes-sbox'), SignatureDB(), corpus_program('aes-sbox'))
    assert any(h.container == DATA_SECTION and h.algorithm == 'AES' for h in hits)


def test_orphan_constant_is_reported():
    result = _identify('orphan')
    assert result.primitives == []
    assert any(d.kind == 'orphan-hit' and d.vaddr == 0x403020 for d in result.diagnostics)


def test_empty_binary():
    result = _identify('empty')
    assert result.primitives == []
    assert result.detected == []


def test_every_layout_is_tried():
    assert [str(layout) for layout in enumerate_layouts()] == ['ILO', 'IOL', 'LIO', 'LOI', 'OIL', 'OLI', 'IO', 'OI']


@pytest.mark.parametrize('matched,expected', [
    (['ILO'], 'ILO'),
    (['OI', 'OIL'], 'OI'),
    (['IO', 'IOL'], 'IO'),
    (['IO', 'ILO'], None),
    (['ILO', 'IOL'], None),
    (['IO', 'OI'], None),
])
def test_preferred_layout(matched, expected):
    chosen = _preferred([layout_named(name) for name in matched])
    assert (str(chosen) if chosen else None) == expected
