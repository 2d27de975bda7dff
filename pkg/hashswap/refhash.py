"""
Reference hash oracles.

hashlib covers most algorithms, but OpenSSL 3 builds drop MD4 and RIPEMD-160
from the default provider and MD2 has been gone for years, so those three have
pure-Python fallbacks here.
"""

import hashlib
import logging
import struct
from typing import Callable, Dict, List

from hashswap.errors import UnknownAlgorithm

logger = logging.getLogger(__name__)

MASK = 0xffffffff

MD2_SBOX = bytes([
    41, 46, 67, 201, 162, 216, 124, 1, 61, 54, 84, 161, 236, 240, 6, 19,
    98, 167, 5, 243, 192, 199, 115, 140, 152, 147, 43, 217, 188, 76, 130, 202,
    30, 155, 87, 60, 253, 212, 224, 22, 103, 66, 111, 24, 138, 23, 229, 18,
    190, 78, 196, 214, 218, 158, 222, 73, 160, 251, 245, 142, 187, 47, 238, 122,
    169, 104, 121, 145, 21, 178, 7, 63, 148, 194, 16, 137, 11, 34, 95, 33,
    128, 127, 93, 154, 90, 144, 50, 39, 53, 62, 204, 231, 191, 247, 151, 3,
    255, 25, 48, 179, 72, 165, 181, 209, 215, 94, 146, 42, 172, 86, 170, 198,
    79, 184, 56, 210, 150, 164, 125, 182, 118, 252, 107, 226, 156, 116, 4, 241,
    69, 157, 112, 89, 100, 113, 135, 32, 134, 91, 207, 101, 230, 45, 168, 2,
    27, 96, 37, 173, 174, 176, 185, 246, 28, 70, 97, 105, 52, 64, 126, 15,
    85, 71, 163, 35, 221, 81, 175, 58, 195, 92, 249, 206, 186, 197, 234, 38,
    44, 83, 13, 110, 133, 40, 132, 9, 211, 223, 205, 244, 65, 129, 77, 82,
    106, 220, 55, 200, 108, 193, 171, 250, 36, 225, 123, 8, 12, 189, 177, 74,
    120, 136, 149, 139, 227, 99, 232, 109, 233, 203, 213, 254, 59, 0, 29, 57,
    242, 239, 183, 14, 102, 88, 208, 228, 166, 119, 114, 248, 235, 117, 75, 10,
    49, 68, 80, 180, 143, 237, 31, 26, 219, 153, 141, 51, 159, 17, 131, 20,
])


def _rotl(x: int, n: int) -> int:
    x &= MASK
    return ((x << n) | (x >> (32 - n))) & MASK


def _md_pad(data: bytes) -> bytes:
    """Merkle-Damgard padding with a little-endian bit length."""
    length = len(data) * 8
    padded = data + b'\x80' + bytes((55 - len(data)) % 64)
    return padded + struct.pack('<Q', length & 0xffffffffffffffff)


def md2(data: bytes) -> bytes:
    pad = 16 - len(data) % 16
    message = data + bytes([pad]) * pad

    checksum = bytearray(16)
    last = 0
    for block in range(0, len(message), 16):
        for j in range(16):
            checksum[j] ^= MD2_SBOX[message[block + j] ^ last]
            last = checksum[j]
    message += bytes(checksum)

    x = bytearray(48)
    for block in range(0, len(message), 16):
        for j in range(16):
            x[16 + j] = message[block + j]
            x[32 + j] = x[j] ^ message[block + j]
        t = 0
        for j in range(18):
            for k in range(48):
                x[k] ^= MD2_SBOX[t]
                t = x[k]
            t = (t + j) & 0xff
    return bytes(x[:16])


def md4(data: bytes) -> bytes:
    def f(x, y, z):
        return (x & y) | (~x & z)

    def g(x, y, z):
        return (x & y) | (x & z) | (y & z)

    def h(x, y, z):
        return x ^ y ^ z

    state = [0x67452301, 0xefcdab89, 0x98badcfe, 0x10325476]
    message = _md_pad(data)
    for block in range(0, len(message), 64):
        x = struct.unpack('<16I', message[block:block + 64])
        a, b, c, d = state
        for i in range(0, 16, 4):
            a = _rotl(a + f(b, c, d) + x[i], 3)
            d = _rotl(d + f(a, b, c) + x[i + 1], 7)
            c = _rotl(c + f(d, a, b) + x[i + 2], 11)
            b = _rotl(b + f(c, d, a) + x[i + 3], 19)
        for i in range(4):
            a = _rotl(a + g(b, c, d) + x[i] + 0x5a827999, 3)
            d = _rotl(d + g(a, b, c) + x[i + 4] + 0x5a827999, 5)
            c = _rotl(c + g(d, a, b) + x[i + 8] + 0x5a827999, 9)
            b = _rotl(b + g(c, d, a) + x[i + 12] + 0x5a827999, 13)
        for i in (0, 2, 1, 3):
            a = _rotl(a + h(b, c, d) + x[i] + 0x6ed9eba1, 3)
            d = _rotl(d + h(a, b, c) + x[i + 8] + 0x6ed9eba1, 9)
            c = _rotl(c + h(d, a, b) + x[i + 4] + 0x6ed9eba1, 11)
            b = _rotl(b + h(c, d, a) + x[i + 12] + 0x6ed9eba1, 15)
        state = [(s + v) & MASK for s, v in zip(state, (a, b, c, d))]
    return struct.pack('<4I', *state)


_RMD_RL = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15,
    7, 4, 13, 1, 10, 6, 15, 3, 12, 0, 9, 5, 2, 14, 11, 8,
    3, 10, 14, 4, 9, 15, 8, 1, 2, 7, 0, 6, 13, 11, 5, 12,
    1, 9, 11, 10, 0, 8, 12, 4, 13, 3, 7, 15, 14, 5, 6, 2,
    4, 0, 5, 9, 7, 12, 2, 10, 14, 1, 3, 8, 11, 6, 15, 13]
_RMD_RR = [
    5, 14, 7, 0, 9, 2, 11, 4, 13, 6, 15, 8, 1, 10, 3, 12,
    6, 11, 3, 7, 0, 13, 5, 10, 14, 15, 8, 12, 4, 9, 1, 2,
    15, 5, 1, 3, 7, 14, 6, 9, 11, 8, 12, 2, 10, 0, 4, 13,
    8, 6, 4, 1, 3, 11, 15, 0, 5, 12, 2, 13, 9, 7, 10, 14,
    12, 15, 10, 4, 1, 5, 8, 7, 6, 2, 13, 14, 0, 3, 9, 11]
_RMD_SL = [
    11, 14, 15, 12, 5, 8, 7, 9, 11, 13, 14, 15, 6, 7, 9, 8,
    7, 6, 8, 13, 11, 9, 7, 15, 7, 12, 15, 9, 11, 7, 13, 12,
    11, 13, 6, 7, 14, 9, 13, 15, 14, 8, 13, 6, 5, 12, 7, 5,
    11, 12, 14, 15, 14, 15, 9, 8, 9, 14, 5, 6, 8, 6, 5, 12,
    9, 15, 5, 11, 6, 8, 13, 12, 5, 12, 13, 14, 11, 8, 5, 6]
_RMD_SR = [
    8, 9, 9, 11, 13, 15, 15, 5, 7, 7, 8, 11, 14, 14, 12, 6,
    9, 13, 15, 7, 12, 8, 9, 11, 7, 7, 12, 7, 6, 15, 13, 11,
    9, 7, 15, 11, 8, 6, 6, 14, 12, 13, 5, 14, 13, 13, 7, 5,
    15, 5, 8, 11, 14, 14, 6, 14, 6, 9, 12, 9, 12, 5, 15, 8,
    8, 5, 12, 9, 12, 5, 14, 6, 8, 13, 6, 5, 15, 13, 11, 11]
_RMD_KL = [0x00000000, 0x5a827999, 0x6ed9eba1, 0x8f1bbcdc, 0xa953fd4e]
_RMD_KR = [0x50a28be6, 0x5c4dd124, 0x6d703ef3, 0x7a6d76e9, 0x00000000]


def _rmd_f(j: int, x: int, y: int, z: int) -> int:
    if j < 16:
        return x ^ y ^ z
    if j < 32:
        return (x & y) | (~x & z)
    if j < 48:
        return (x | ~y) ^ z
    if j < 64:
        return (x & z) | (y & ~z)
    return x ^ (y | ~z)


def ripemd160(data: bytes) -> bytes:
    state = [0x67452301, 0xefcdab89, 0x98badcfe, 0x10325476, 0xc3d2e1f0]
    message = _md_pad(data)
    for block in range(0, len(message), 64):
        x = struct.unpack('<16I', message[block:block + 64])
        al, bl, cl, dl, el = state
        ar, br, cr, dr, er = state
        for j in range(80):
            t = (_rotl(al + _rmd_f(j, bl, cl, dl) + x[_RMD_RL[j]] + _RMD_KL[j // 16], _RMD_SL[j]) + el) & MASK
            al, el, dl, cl, bl = el, dl, _rotl(cl, 10), bl, t
            t = (_rotl(ar + _rmd_f(79 - j, br, cr, dr) + x[_RMD_RR[j]] + _RMD_KR[j // 16], _RMD_SR[j]) + er) & MASK
            ar, er, dr, cr, br = er, dr, _rotl(cr, 10), br, t
        state = [
            (state[1] + cl + dr) & MASK,
            (state[2] + dl + er) & MASK,
            (state[3] + el + ar) & MASK,
            (state[4] + al + br) & MASK,
            (state[0] + bl + cr) & MASK,
        ]
    return struct.pack('<5I', *state)


def _hashlib(name: str, fallback: Callable[[bytes], bytes] = None) -> Callable[[bytes], bytes]:
    def digest(data: bytes) -> bytes:
        try:
            return hashlib.new(name, data).digest()
        except ValueError:
            if fallback is None:
                raise
            return fallback(data)
    return digest


ORACLES: Dict[str, Callable[[bytes], bytes]] = {
    'MD2': md2,
    'MD4': _hashlib('md4', md4),
    'MD5': _hashlib('md5'),
    'SHA1': _hashlib('sha1'),
    'RIPEMD-160': _hashlib('ripemd160', ripemd160),
    'SHA-256': _hashlib('sha256'),
    'SHA-512': _hashlib('sha512'),
    'BLAKE2s': _hashlib('blake2s'),
    'BLAKE2b': _hashlib('blake2b'),
}


def algorithms() -> List[str]:
    return list(ORACLES)


def digest(algorithm: str, data: bytes) -> bytes:
    """Reference digest of ``data`` under ``algorithm``."""
    try:
        oracle = ORACLES[algorithm]
    except KeyError:
        raise UnknownAlgorithm(f"no reference oracle for {algorithm}")
    return oracle(data)
