import logging
import threading

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

import utils
from ciphertext_format import SealedPayload
from utils import AuthenticityError, FatalError, InputError, StoreFormatError, VersionMismatch

logger = logging.getLogger(__name__)

PAYLOAD_KEY_BYTES = 32
GCM_NONCE_BYTES = 12
GCM_TAG_BYTES = 16
PAYLOAD_KEY_VERSION = 1
# Random 96-bit nonces stay collision-safe up to 2^32 messages per key
MAX_SEALS_PER_KEY = 2 ** 32


class PayloadKey:
    """
    AES-256-GCM key for document payloads, independent of the scheme key.

    Parameters:
    key (bytes): PAYLOAD_KEY_BYTES random bytes.
    """

    def __init__(self, key):
        if len(key) != PAYLOAD_KEY_BYTES:
            raise InputError(f"payload key must be {PAYLOAD_KEY_BYTES} bytes, got {len(key)}")
        self._key = bytes(key)
        self._seals = 0
        self._lock = threading.Lock()

    def __repr__(self):
        return 'PayloadKey(<secret>)'

    def __eq__(self, other):
        return isinstance(other, PayloadKey) and self._key == other._key

    def __hash__(self):
        return hash(self._key)

    @property
    def key_bytes(self):
        return self._key

    @property
    def seal_count(self):
        return self._seals

    def reserve_seal(self):
        with self._lock:
            if self._seals >= MAX_SEALS_PER_KEY:
                raise FatalError('payload key nonce budget exhausted; generate a new key',
                                 details={'seals': self._seals})
            self._seals += 1

    def to_bytes(self):
        return bytes([PAYLOAD_KEY_VERSION]) + self._key

    @classmethod
    def from_bytes(cls, data):
        reader = utils.ByteReader(data)
        version = reader.unpack('<B', 'payload key version')
        if version != PAYLOAD_KEY_VERSION:
            raise VersionMismatch(f"unsupported payload key version {version}",
                                  details={'version': version})
        key = reader.take(PAYLOAD_KEY_BYTES, 'payload key')
        if reader.remaining:
            raise StoreFormatError(f"trailing bytes in payload key file at offset {reader.offset}",
                                   details={'offset': reader.offset})
        return cls(key)

    def save(self, path):
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            return cls.from_bytes(f.read())


def payload_keygen(nonces=None):
    """
    Generate a fresh payload key.

    Parameters:
    nonces (utils.NonceSource, optional): Randomness source, the system one by default.

    Returns:
    PayloadKey: The new key.
    """
    return PayloadKey((nonces or utils.SYSTEM_NONCES).draw(PAYLOAD_KEY_BYTES))


def seal(key, plaintext, associated_data, nonces=None):
    """
    Encrypt and authenticate a payload.

    Parameters:
    key (PayloadKey): Payload key.
    plaintext (bytes): Document bytes, possibly empty.
    associated_data (bytes): Authenticated but unencrypted context (the record id).
    nonces (utils.NonceSource, optional): Nonce source.

    Returns:
    SealedPayload: Nonce, ciphertext and tag.
    """
    key.reserve_seal()
    nonce = (nonces or utils.SYSTEM_NONCES).draw(GCM_NONCE_BYTES)
    encryptor = Cipher(algorithms.AES(key.key_bytes), modes.GCM(nonce)).encryptor()
    encryptor.authenticate_additional_data(associated_data)
    ciphertext = encryptor.update(plaintext) + encryptor.finalize()
    return SealedPayload(nonce=nonce, ciphertext=ciphertext, tag=encryptor.tag)


def open_payload(key, sealed, associated_data):
    """
    Verify and decrypt a payload.

    Parameters:
    key (PayloadKey): Payload key.
    sealed (SealedPayload): Output of seal.
    associated_data (bytes): The same associated data given to seal.

    Returns:
    bytes: The original plaintext.

    Raises:
    AuthenticityError: On a wrong key, wrong associated data or any tampering.
    """
    if len(sealed.nonce) != GCM_NONCE_BYTES or len(sealed.tag) != GCM_TAG_BYTES:
        raise AuthenticityError('malformed sealed payload',
                                details={'nonce_len': len(sealed.nonce), 'tag_len': len(sealed.tag)})
    try:
        decryptor = Cipher(algorithms.AES(key.key_bytes),
                           modes.GCM(sealed.nonce, sealed.tag)).decryptor()
        decryptor.authenticate_additional_data(associated_data)
        return decryptor.update(sealed.ciphertext) + decryptor.finalize()
    except InvalidTag:
        raise AuthenticityError('payload failed authentication')


if __name__ == '__main__':
    key = payload_keygen()
    ad = utils.record_id_bytes(7)
    sealed = seal(key, b'The quick brown fox', ad)
    print('sealed bytes :', sealed.to_bytes().hex())
    print('opened       :', open_payload(key, sealed, ad))
    try:
        open_payload(key, sealed, utils.record_id_bytes(8))
    except AuthenticityError as e:
        print('wrong record :', e.asdict())
