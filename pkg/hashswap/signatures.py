"""
Known-constant signatures and hash profiles.

Patterns are stored as the bytes appear in memory on a little-endian target
(word constants byte-swapped, tables as laid out, curve parameters in the
big-endian order libraries keep them in).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from hashswap.errors import ConfigError, InvariantViolation, UnknownAlgorithm
from hashswap.refhash import MD2_SBOX

logger = logging.getLogger(__name__)

KINDS = ('IV', 'SBox', 'MagicConstant', 'PrimeBasePoint')

TEST_INPUT = b'Hello, world!'


@dataclass(frozen=True)
class ConstantSignature:
    algorithm: str
    kind: str
    pattern: bytes
    ambiguous_with: Tuple[str, ...] = ()
    builtin: bool = field(default=True, compare=False)

    @property
    def immediate_pattern(self) -> bytes:
        """Prefix compared against runs of instruction immediates."""
        return self.pattern[:16]

    @property
    def matches_immediates(self) -> bool:
        return self.kind in ('IV', 'MagicConstant')


@dataclass(frozen=True)
class HashProfile:
    algorithm: str
    digest_size: int
    block_size: int
    test_input: bytes
    expected_digest: bytes
    replaceable: bool = True
    weak: bool = False


def _sig(algorithm: str, kind: str, hexbytes: str, *ambiguous: str) -> ConstantSignature:
    return ConstantSignature(algorithm, kind, bytes.fromhex(hexbytes.replace(' ', '')), tuple(ambiguous))


_BUILTIN = [
    # hash functions
    ConstantSignature('MD2', 'SBox', MD2_SBOX),
    _sig('MD5', 'IV', '0123456789abcdeffedcba9876543210', 'MD4'),
    _sig('MD4', 'MagicConstant', '9979825aa1ebd96e', 'MD5'),
    _sig('SHA1', 'IV', '0123456789abcdeffedcba9876543210f0e1d2c3', 'RIPEMD-160'),
    _sig('RIPEMD-160', 'MagicConstant', 'e68ba25024d14d5cf33e706de9766d7a', 'SHA1'),
    _sig('SHA-256', 'IV', '67e6096a85ae67bb72f36e3c3af54fa57f520e518c68059babd9831f19cde05b', 'BLAKE2s'),
    _sig('BLAKE2s', 'MagicConstant', '47e6086b', 'SHA-256'),
    _sig('SHA-512', 'IV',
         '08c9bcf367e6096a3ba7ca8485ae67bb2bf894fe72f36e3cf1361d5f3af54fa5'
         'd182e6ad7f520e511f6c3e2b8c68059b6bbd41fbabd9831f79217e1319cde05b', 'BLAKE2b'),
    _sig('BLAKE2b', 'MagicConstant', '48c9bdf267e6096a', 'SHA-512'),
    # block ciphers
    _sig('RC2', 'SBox', 'd978f9c419ddb5ed28e9fd794aa0d89d'),
    _sig('RC5', 'MagicConstant', '6b2aed8a6251e1b7'),
    _sig('Blowfish', 'SBox', '886a3f24d308a3852e8a191344737003223809a4d0319f2998fa2e08896c4eec'),
    _sig('DES', 'SBox', '0e040d01020f0b08030a060c05090007'),
    _sig('DES', 'SBox', '00080802000008000200000202080802'),
    _sig('AES', 'SBox', '637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0'),
    # elliptic curves: base point x, then the field prime
    _sig('P-192', 'PrimeBasePoint', '188da80eb03090f67cbf20eb43a18800'),
    _sig('P-192', 'PrimeBasePoint', 'fffffffffffffffffffffffffffffffeffffffffffffffff'),
    _sig('P-224', 'PrimeBasePoint', 'b70e0cbd6bb4bf7f321390b94a03c1d3'),
    _sig('P-224', 'PrimeBasePoint', 'ffffffffffffffffffffffffffffffff000000000000000000000001'),
    _sig('P-256', 'PrimeBasePoint', '6b17d1f2e12c4247f8bce6e563a440f2'),
    _sig('P-256', 'PrimeBasePoint', 'ffffffff00000001000000000000000000000000ffffffffffffffffffffffff'),
    _sig('P-384', 'PrimeBasePoint', 'aa87ca22be8b05378eb1c71ef320ad74'),
    _sig('P-384', 'PrimeBasePoint',
         'fffffffffffffffffffffffffffffffffffffffffffffffffffffffffffffffe'
         'ffffffff0000000000000000ffffffff'),
    _sig('P-521', 'PrimeBasePoint', '00c6858e06b70404e9cd9e3ecb662395'),
    _sig('P-521', 'PrimeBasePoint', '01ff' + 'ff' * 64),
]

_PROFILES = [
    HashProfile('MD2', 16, 16, TEST_INPUT, bytes.fromhex('8cca0e965edd0e223b744f9cedf8e141'), True, True),
    HashProfile('MD4', 16, 64, TEST_INPUT, bytes.fromhex('0abe9ee1f376caa1bcecad9042f16e73'), True, True),
    HashProfile('MD5', 16, 64, TEST_INPUT, bytes.fromhex('6cd3556deb0da54bca060b4c39479839'), True, True),
    HashProfile('SHA1', 20, 64, TEST_INPUT,
                bytes.fromhex('943a702d06f34599aee1f8da8ef9f7296031d699'), True, True),
    HashProfile('RIPEMD-160', 20, 64, TEST_INPUT,
                bytes.fromhex('58262d1fbdbe4530d8865d3518c6d6e41002610f'), True, True),
    HashProfile('SHA-256', 32, 64, TEST_INPUT,
                bytes.fromhex('315f5bdb76d078c43b8ac0064e4a0164612b1fce77c869345bfc94c75894edd3')),
    HashProfile('SHA-512', 64, 128, TEST_INPUT,
                bytes.fromhex('c1527cd893c124773d811911970c8fe6e857d6df5dc9226bd8a160614c0cd963'
                              'a4ddea2b94bb7d36021ef9d865d5cea294a82dd49a0bb269f51f6e7a57f79421')),
    HashProfile('BLAKE2s', 32, 64, TEST_INPUT,
                bytes.fromhex('30d8777f0e178582ec8cd2fcdc18af57c828ee2f89e978df52c8e7af078bd5cf')),
    HashProfile('BLAKE2b', 64, 128, TEST_INPUT,
                bytes.fromhex('a2764d133a16816b5847a737a786f2ece4c148095c5faa73e24b4cc5d666c3e4'
                              '5ec271504e14dc6127ddfce4e144fb23b91a6f7b04b53d695502290722953b0f')),
]


def builtin_signatures() -> List[ConstantSignature]:
    return list(_BUILTIN)


def hash_profile(algorithm: str) -> HashProfile:
    for profile in _PROFILES:
        if profile.algorithm == algorithm:
            return profile
    raise UnknownAlgorithm(f"no hash profile for {algorithm}")


def hash_profiles() -> List[HashProfile]:
    return list(_PROFILES)


def parse_extension(text: str, source: str = '<signatures>') -> List[ConstantSignature]:
    """Signatures from ``<algorithm> <kind> <hex-bytes>`` lines."""
    signatures = []
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ConfigError(f"{source}:{number}: expected '<algorithm> <kind> <hex-bytes>'")
        algorithm, kind, hexbytes = parts[0], parts[1], ''.join(parts[2:])
        if kind not in KINDS:
            raise ConfigError(f"{source}:{number}: unknown signature kind {kind!r}")
        try:
            pattern = bytes.fromhex(hexbytes)
        except ValueError:
            raise ConfigError(f"{source}:{number}: pattern is not hex")
        if len(pattern) < 4:
            raise ConfigError(f"{source}:{number}: patterns need at least 4 bytes")
        signatures.append(ConstantSignature(algorithm, kind, pattern, (), builtin=False))
    return signatures


class SignatureDB:
    """Built-in signatures plus any extensions; immutable once built."""

    def __init__(self, extra: Iterable[ConstantSignature] = ()):
        self.signatures: List[ConstantSignature] = builtin_signatures()
        known = {sig.pattern for sig in self.signatures}
        for sig in extra:
            if sig.pattern in known:
                logger.warning(f"ignoring extension signature for {sig.algorithm}: "
                               f"pattern duplicates an existing one")
                continue
            known.add(sig.pattern)
            self.signatures.append(sig)
        self.check()

    @classmethod
    def load(cls, path: Optional[str] = None) -> 'SignatureDB':
        if path is None:
            return cls()
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read signature file {path}: {e}")
        extra = parse_extension(text, path)
        logger.info(f"loaded {len(extra)} extension signatures from {path}")
        return cls(extra)

    def check(self):
        patterns = [sig.pattern for sig in self.signatures]
        if len(set(patterns)) != len(patterns):
            raise InvariantViolation("signature patterns are not distinct")
        partners: Dict[str, set] = {}
        for sig in self.signatures:
            partners.setdefault(sig.algorithm, set()).update(sig.ambiguous_with)
        for algorithm, others in partners.items():
            for other in others:
                if algorithm not in partners.get(other, ()):
                    raise InvariantViolation(f"{algorithm} lists {other} as ambiguous but not vice versa")

    def ambiguous_with(self, algorithm: str) -> List[str]:
        others = set()
        for sig in self.signatures:
            if sig.algorithm == algorithm:
                others.update(sig.ambiguous_with)
        return sorted(others)

    def plausible(self, algorithm: str) -> List[str]:
        """The algorithm and its ambiguity partners, in a stable order."""
        return [algorithm] + self.ambiguous_with(algorithm)

    def is_weak(self, algorithm: str) -> bool:
        try:
            return hash_profile(algorithm).weak
        except UnknownAlgorithm:
            return False

    def __iter__(self):
        return iter(self.signatures)

    def __len__(self) -> int:
        return len(self.signatures)
