"""
Serialized forms of encrypted records: CAPRISE ciphertexts and sealed payloads.

Holds no key material and no decryption code. The store and the server take their record types
from here and never import the key modules.
"""
import struct
from dataclasses import dataclass

import numpy as np

import utils
from utils import InputError, StoreFormatError, VersionMismatch

NONCE_BYTES = 16
CIPHER_MAGIC = b'CPRS'
CIPHER_VERSION = 1
SEALED_VERSION = 1

_CIPHER_HEADER = struct.Struct('<4sBI')
_SEALED_HEADER = struct.Struct('<BBB')


@dataclass(frozen=True, eq=False)
class CipherVector:
    """
    An encrypted embedding: d real ciphertext components plus the nonce that seeded its noise.
    """
    c: np.ndarray
    r: bytes

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 1 or c.shape[0] == 0:
            raise InputError(f"ciphertext must be a non-empty 1-D vector, got shape {c.shape}")
        if len(self.r) != NONCE_BYTES:
            raise InputError(f"nonce must be {NONCE_BYTES} bytes, got {len(self.r)}")
        object.__setattr__(self, 'c', c)

    @property
    def dim(self):
        return self.c.shape[0]

    def __eq__(self, other):
        if not isinstance(other, CipherVector):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def to_bytes(self):
        return (_CIPHER_HEADER.pack(CIPHER_MAGIC, CIPHER_VERSION, self.dim)
                + self.c.astype('<f8').tobytes() + self.r)

    @staticmethod
    def encoded_size(dim):
        return _CIPHER_HEADER.size + 8 * dim + NONCE_BYTES

    @classmethod
    def read_from(cls, reader):
        """
        Parse one ciphertext from a ByteReader positioned at its magic bytes.

        Parameters:
        reader (utils.ByteReader): Reader over a store file or wire frame.

        Returns:
        CipherVector: The parsed ciphertext.

        Raises:
        StoreFormatError: On bad magic or truncation (with the byte offset).
        VersionMismatch: On an unsupported version byte.
        """
        start = reader.offset
        magic, version, dim = reader.unpack(_CIPHER_HEADER.format, 'ciphertext header')
        if magic != CIPHER_MAGIC:
            raise StoreFormatError(f"bad ciphertext magic {magic!r} at offset {start}",
                                   details={'offset': start})
        if version != CIPHER_VERSION:
            raise VersionMismatch(f"unsupported ciphertext version {version} at offset {start}",
                                  details={'offset': start, 'version': version})
        if dim == 0:
            raise StoreFormatError(f"zero-dimensional ciphertext at offset {start}",
                                   details={'offset': start})
        c = np.frombuffer(reader.take(8 * dim, 'ciphertext components'), dtype='<f8')
        r = reader.take(NONCE_BYTES, 'nonce')
        return cls(c.astype(np.float64), r)

    @classmethod
    def from_bytes(cls, data):
        reader = utils.ByteReader(data)
        cv = cls.read_from(reader)
        if reader.remaining:
            raise StoreFormatError(f"trailing bytes after ciphertext at offset {reader.offset}",
                                   details={'offset': reader.offset})
        return cv


@dataclass(frozen=True)
class SealedPayload:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self):
        # version, nonce length, tag length | nonce | tag | ciphertext
        return (_SEALED_HEADER.pack(SEALED_VERSION, len(self.nonce), len(self.tag))
                + self.nonce + self.tag + self.ciphertext)

    @classmethod
    def from_bytes(cls, data, base_offset=0):
        reader = utils.ByteReader(data, base_offset)
        start = reader.offset
        version, nonce_len, tag_len = reader.unpack(_SEALED_HEADER.format, 'payload header')
        if version != SEALED_VERSION:
            raise VersionMismatch(f"unsupported payload version {version} at offset {start}",
                                  details={'offset': start, 'version': version})
        nonce = reader.take(nonce_len, 'payload nonce')
        tag = reader.take(tag_len, 'payload tag')
        return cls(nonce=nonce, ciphertext=reader.rest(), tag=tag)


if __name__ == '__main__':
    rng = np.random.default_rng(0)
    cv = CipherVector(rng.normal(size=4) * 2.0 ** 20, rng.bytes(NONCE_BYTES))
    data = cv.to_bytes()
    print('ciphertext bytes :', len(data), '=', CipherVector.encoded_size(cv.dim))
    print('round trip equal :', CipherVector.from_bytes(data) == cv)
    sealed = SealedPayload(nonce=rng.bytes(12), ciphertext=b'\x8f' * 10, tag=rng.bytes(16))
    print('sealed payload   :', sealed.to_bytes().hex())
