import pytest

from hashswap import refhash
from hashswap.errors import UnknownAlgorithm
from hashswap.signatures import TEST_INPUT, hash_profiles

VECTORS = [
    (refhash.md2, b'', '8350e5a3e24c153df2275c9f80692773'),
    (refhash.md2, b'abc', 'da853b0d3f88d99b30283a69e6ded6bb'),
    (refhash.md4, b'', '31d6cfe0d16ae931b73c59d7e0c089c0'),
    (refhash.md4, b'abc', 'a448017aaf21d8525fc10ae87aa6729d'),
    (refhash.ripemd160, b'', '9c1185a5c5e9fc54612808977ee8f548b2258d31'),
    (refhash.ripemd160, b'abc', '8eb208f7e05d987a9b044a8e98c6b087f15a0bfc'),
]


@pytest.mark.parametrize('func,data,expected', VECTORS)
def test_pure_python_fallbacks(func, data, expected):
    assert func(data).hex() == expected


def test_fallbacks_cross_block_boundaries():
    data = bytes(range(256)) * 3
    assert refhash.md4(data) == refhash.digest('MD4', data)
    assert refhash.ripemd160(data) == refhash.digest('RIPEMD-160', data)


@pytest.mark.parametrize('profile', hash_profiles(), ids=lambda p: p.algorithm)
def test_profiles_agree_with_oracles(profile):
    assert profile.test_input == TEST_INPUT
    digest = refhash.digest(profile.algorithm, TEST_INPUT)
    assert digest == profile.expected_digest
    assert len(digest) == profile.digest_size


def test_unknown_algorithm():
    with pytest.raises(UnknownAlgorithm):
        refhash.digest('SHA-3', b'')


def test_algorithms_listed():
    assert {'MD2', 'MD4', 'MD5', 'SHA1', 'RIPEMD-160', 'SHA-256'} <= set(refhash.algorithms())
