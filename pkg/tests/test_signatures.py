import pytest

from hashswap.errors import ConfigError, InvariantViolation, UnknownAlgorithm
from hashswap.signatures import ConstantSignature, SignatureDB, hash_profile, parse_extension


def test_builtin_database_is_consistent():
    db = SignatureDB()
    db.check()
    assert len(db) > 20
    assert all(sig.builtin for sig in db)


def test_md5_and_md4_are_ambiguous():
    db = SignatureDB()
    assert db.ambiguous_with('MD5') == ['MD4']
    assert db.ambiguous_with('MD4') == ['MD5']
    assert db.plausible('SHA1') == ['SHA1', 'RIPEMD-160']
    assert db.ambiguous_with('AES') == []


def test_weakness():
    db = SignatureDB()
    for algorithm in ('MD2', 'MD4', 'MD5', 'SHA1', 'RIPEMD-160'):
        assert db.is_weak(algorithm)
    assert not db.is_weak('SHA-256')
    assert not db.is_weak('AES')


def test_profiles():
    assert hash_profile('SHA-256').digest_size == 32
    assert hash_profile('RIPEMD-160').digest_size == 20
    assert hash_profile('MD2').block_size == 16
    with pytest.raises(UnknownAlgorithm):
        hash_profile('Whirlpool')


def test_parse_extension():
    text = '''
    # vendor tables
    Tiger SBox 5ac3 d6b1 f0e1
    Whirlpool MagicConstant 1823c6e8  # round constant
    '''
    signatures = parse_extension(text)
    assert [(s.algorithm, s.kind, s.pattern.hex()) for s in signatures] == [
        ('Tiger', 'SBox', '5ac3d6b1f0e1'),
        ('Whirlpool', 'MagicConstant', '1823c6e8'),
    ]
    assert not any(s.builtin for s in signatures)


@pytest.mark.parametrize('line', [
    'Tiger SBox',
    'Tiger Table 5ac3d6b1',
    'Tiger SBox 5ac3zz',
    'Tiger SBox 5ac3d6',
])
def test_parse_extension_rejects(line):
    with pytest.raises(ConfigError):
        parse_extension(line)


def test_extension_duplicate_is_ignored():
    md5_iv = ConstantSignature('Fake', 'IV', bytes.fromhex('0123456789abcdeffedcba9876543210'), builtin=False)
    tiger = ConstantSignature('Tiger', 'SBox', bytes.fromhex('5ac3d6b1f0e1'), builtin=False)
    db = SignatureDB([md5_iv, tiger])
    assert len(db) == len(SignatureDB()) + 1
    assert [s.algorithm for s in db if not s.builtin] == ['Tiger']


def test_one_sided_ambiguity_is_an_invariant_violation():
    lopsided = ConstantSignature('Tiger', 'SBox', bytes.fromhex('5ac3d6b1'), ('Whirlpool',), builtin=False)
    with pytest.raises(InvariantViolation):
        SignatureDB([lopsided])


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        SignatureDB.load(str(tmp_path / 'missing.sig'))


def test_load_file(tmp_path):
    path = tmp_path / 'extra.sig'
    path.write_text('Tiger SBox 5ac3d6b1f0e1\n')
    assert len(SignatureDB.load(str(path))) == len(SignatureDB()) + 1
    assert len(SignatureDB.load(None)) == len(SignatureDB())
