"""
CAPRISE encryption of embeddings and the ADCPE baseline.

A ciphertext is c = s*e + noise, where the noise is drawn uniformly from a ball whose radius is
a fixed fraction of s*beta. The noise is derived from PRF(K, r) so the holder of (s, K) can
rebuild it from the public nonce r and decrypt. Database ciphertexts use a 3/8 budget and
query ciphertexts a 1/8 budget: every query-to-database comparison whose plaintext margin
exceeds beta survives encryption, while database-to-database comparisons do not.
"""
import logging
import math
import secrets
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

import utils
from ciphertext_format import CipherVector, NONCE_BYTES
from utils import InputError, ParameterError, StoreFormatError, VersionMismatch

logger = logging.getLogger(__name__)

PRF_KEY_BYTES = 32
KEY_FILE_VERSION = 1
DEFAULT_S_RANGE = (2.0 ** 20, 2.0 ** 30)
DEFAULT_BETA = 0.2
MAX_SECURITY_PARAM = 8 * PRF_KEY_BYTES

DB_COEFFICIENT = 3 / 8
QUERY_COEFFICIENT = 1 / 8
ADCPE_COEFFICIENT = 1 / 4

# Largest radial factor below 1.0; keeps the noise bound strict after rounding
_RHO_MAX = 1.0 - 2.0 ** -53
_KEY_FILE = struct.Struct('<Bdd')


@dataclass(frozen=True)
class SchemeKey:
    """
    Secret CAPRISE key.

    Parameters:
    s (float): Positive scaling factor.
    K (bytes): PRF key of PRF_KEY_BYTES bytes.
    beta (float): Plaintext distance margin, shared by a database and its queries.
    """
    s: float
    K: bytes
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.s) and self.s > 0):
            raise ParameterError(f"scaling factor must be a positive real, got {self.s}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ParameterError(f"beta must be a positive real, got {self.beta}")
        if len(self.K) != PRF_KEY_BYTES:
            raise ParameterError(f"PRF key must be {PRF_KEY_BYTES} bytes, got {len(self.K)}")

    def __repr__(self):
        return f"SchemeKey(beta={self.beta}, s=<secret>, K=<secret>)"

    def to_bytes(self):
        return _KEY_FILE.pack(KEY_FILE_VERSION, self.s, self.beta) + self.K

    @classmethod
    def from_bytes(cls, data):
        reader = utils.ByteReader(data)
        version, s, beta = reader.unpack(_KEY_FILE.format, 'key header')
        if version != KEY_FILE_VERSION:
            raise VersionMismatch(f"unsupported key file version {version}",
                                  details={'version': version})
        K = reader.take(PRF_KEY_BYTES, 'PRF key')
        if reader.remaining:
            raise StoreFormatError(f"trailing bytes in key file at offset {reader.offset}",
                                   details={'offset': reader.offset})
        return cls(s=s, K=K, beta=beta)

    def save(self, path):
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            return cls.from_bytes(f.read())


@dataclass(frozen=True)
class NoiseSpec:
    """
    Noise budget of one encryption flavour: the noise norm stays strictly below coefficient*s*beta.
    """
    coefficient: float
    dim: int

    @classmethod
    def database(cls, dim):
        return cls(DB_COEFFICIENT, dim)

    @classmethod
    def query(cls, dim):
        return cls(QUERY_COEFFICIENT, dim)

    @classmethod
    def adcpe(cls, dim):
        return cls(ADCPE_COEFFICIENT, dim)

    def bound(self, key):
        return self.coefficient * key.s * key.beta


def keygen(security_param=128, beta=DEFAULT_BETA, s_range=DEFAULT_S_RANGE):
    """
    Generate a fresh CAPRISE key from the operating system's entropy.

    Parameters:
    security_param (int): Security parameter in bits, at most 8 * PRF_KEY_BYTES.
    beta (float): Distance margin beta > 0.
    s_range (tuple): (lower, upper) interval the scaling factor is drawn from uniformly.

    Returns:
    SchemeKey: The new key.

    Raises:
    ParameterError: On a non-positive beta, an inverted or non-positive range,
    or an unsupported security parameter.
    """
    lo, hi = (float(x) for x in s_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo <= 0 or lo >= hi:
        raise ParameterError(f"invalid scaling range [{lo}, {hi}]",
                             details={'lower': lo, 'upper': hi})
    if not 0 < security_param <= MAX_SECURITY_PARAM:
        raise ParameterError(f"security parameter must be in (0, {MAX_SECURITY_PARAM}] bits")
    if not (math.isfinite(beta) and beta > 0):
        raise ParameterError(f"beta must be a positive real, got {beta}")

    try:
        K = secrets.token_bytes(PRF_KEY_BYTES)
        u = secrets.randbits(53) * 2.0 ** -53
    except OSError as e:
        raise utils.FatalError(f"entropy source failure: {e}")
    s = lo + (hi - lo) * u
    logger.debug('generated scheme key (beta=%g, %d-bit security)', beta, security_param)
    return SchemeKey(s=s, K=K, beta=float(beta))


def prf_stream(K, r, nbytes):
    """
    Keyed pseudorandom byte stream PRF(K, r): AES-256 in counter mode, counter block r.

    Parameters:
    K (bytes): PRF key.
    r (bytes): Nonce of NONCE_BYTES bytes.
    nbytes (int): Stream length.

    Returns:
    bytes: The first nbytes of the stream.
    """
    encryptor = Cipher(algorithms.AES(K), modes.CTR(r)).encryptor()
    return encryptor.update(bytes(nbytes)) + encryptor.finalize()


def _uniform_open0(words):
    # w / 2^64 with 0 mapped to the smallest positive uniform
    u = words.astype(np.float64) * 2.0 ** -64
    u[u == 0.0] = 2.0 ** -64
    return u


def _box_muller(words, d):
    # words holds 2*ceil(d/2) u64 values per row
    u1 = _uniform_open0(words[..., 0::2])
    u2 = _uniform_open0(words[..., 1::2])
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(words.shape, dtype=np.float64)
    z[..., 0::2] = radius * np.cos(angle)
    z[..., 1::2] = radius * np.sin(angle)
    return z[..., :d]


def _unit_interval(word):
    # top 53 bits, so u lies in [0, 1) exactly
    return (word >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def _stream_words(K, r, nwords):
    return np.frombuffer(prf_stream(K, r, 8 * nwords), dtype='<u8').astype(np.uint64)


def _noise_rows(key, nonces, spec):
    """
    Noise vectors for a batch of nonces under one noise budget.

    Parameters:
    key (SchemeKey): The secret key.
    nonces (list of bytes): One nonce per row.
    spec (NoiseSpec): Coefficient and dimension.

    Returns:
    numpy.ndarray: (len(nonces), spec.dim) noise matrix.
    """
    d = spec.dim
    if d < 1:
        raise ParameterError(f"noise dimension must be >= 1, got {d}")
    half = (d + 1) // 2
    block = 2 * half
    words = np.stack([_stream_words(key.K, r, block + 1) for r in nonces])

    n = _box_muller(words[:, :block], d)
    u = _unit_interval(words[:, block])
    norms = np.sqrt(np.einsum('ij,ij->i', n, n))

    for i in np.flatnonzero(norms == 0.0):
        # Degenerate direction: keep extending the same stream until it is usable
        n[i], norms[i] = _resample_direction(key, nonces[i], d, block)

    rho = np.minimum(u ** (1.0 / d), _RHO_MAX)
    scale = spec.bound(key) * rho / norms
    return n * scale[:, None]


def _resample_direction(key, r, d, block):
    attempt = 1
    while True:
        nwords = block + 1 + attempt * block
        tail = _stream_words(key.K, r, nwords)[-block:]
        n = _box_muller(tail[None, :], d)[0]
        norm = math.sqrt(float(np.dot(n, n)))
        if norm > 0.0:
            logger.debug('resampled degenerate noise direction after %d extension(s)', attempt)
            return n, norm
        attempt += 1


def sample_noise(key, r, spec):
    """
    Deterministic noise coefficient*s*beta*(n/|n|)*u^(1/d) derived from PRF(key.K, r).

    Parameters:
    key (SchemeKey): The secret key.
    r (bytes): Nonce.
    spec (NoiseSpec): Noise budget and dimension.

    Returns:
    numpy.ndarray: Noise vector with norm strictly below spec.bound(key).

    Raises:
    ParameterError: If spec.dim < 1.
    """
    if len(r) != NONCE_BYTES:
        raise InputError(f"nonce must be {NONCE_BYTES} bytes, got {len(r)}")
    return _noise_rows(key, [r], spec)[0]


def _draw_nonce(nonce, nonces):
    if nonce is not None:
        if len(nonce) != NONCE_BYTES:
            raise InputError(f"nonce must be {NONCE_BYTES} bytes, got {len(nonce)}")
        return bytes(nonce)
    return (nonces or utils.SYSTEM_NONCES).draw(NONCE_BYTES)


def encrypt(key, e, coefficient, nonce=None, nonces=None):
    """
    Encrypt one embedding under the given noise coefficient.

    Parameters:
    key (SchemeKey): The secret key.
    e (array-like): Plaintext embedding (32-bit or 64-bit reals).
    coefficient (float): DB_COEFFICIENT, QUERY_COEFFICIENT or ADCPE_COEFFICIENT.
    nonce (bytes, optional): Forced nonce (test hook).
    nonces (utils.NonceSource, optional): Nonce source, the system one by default.

    Returns:
    CipherVector: The ciphertext.
    """
    v = utils.as_vector(e, name='plaintext')
    r = _draw_nonce(nonce, nonces)
    noise = sample_noise(key, r, NoiseSpec(coefficient, v.shape[0]))
    return CipherVector(key.s * v + noise, r)


def enc_db(key, e, nonce=None, nonces=None):
    return encrypt(key, e, DB_COEFFICIENT, nonce, nonces)


def enc_q(key, e_q, nonce=None, nonces=None):
    return encrypt(key, e_q, QUERY_COEFFICIENT, nonce, nonces)


def enc_adcpe(key, e, nonce=None, nonces=None):
    return encrypt(key, e, ADCPE_COEFFICIENT, nonce, nonces)


def decrypt(key, cv, coefficient=DB_COEFFICIENT, dim=None):
    """
    Remove the PRF noise and the scaling from a ciphertext.

    A wrong key yields garbage rather than an error; authenticity lives in the payload AEAD.

    Parameters:
    key (SchemeKey): The secret key.
    cv (CipherVector): Ciphertext.
    coefficient (float): Coefficient the ciphertext was produced with.
    dim (int, optional): Expected dimension.

    Returns:
    numpy.ndarray: The plaintext embedding in float64.

    Raises:
    InputError: If dim is given and differs from the ciphertext dimension.
    """
    if dim is not None and cv.dim != dim:
        raise InputError(f"ciphertext has dimension {cv.dim}, expected {dim}",
                         details={'dim': cv.dim, 'expected': dim})
    noise = sample_noise(key, cv.r, NoiseSpec(coefficient, cv.dim))
    return (cv.c - noise) / key.s


def dec_db(key, cv, dim=None):
    return decrypt(key, cv, DB_COEFFICIENT, dim)


def dec_adcpe(key, cv, dim=None):
    return decrypt(key, cv, ADCPE_COEFFICIENT, dim)


def encrypt_batch(key, E, coefficient, nonces=None):
    """
    Encrypt a batch of embeddings, one fresh nonce per row.

    Parameters:
    key (SchemeKey): The secret key.
    E (array-like): (B, d) plaintext matrix.
    coefficient (float): Noise coefficient.
    nonces (utils.NonceSource, optional): Nonce source.

    Returns:
    list of CipherVector: One ciphertext per row.
    """
    M = utils.as_matrix(E, name='plaintext batch')
    if M.shape[0] == 0:
        return []
    source = nonces or utils.SYSTEM_NONCES
    rs = [source.draw(NONCE_BYTES) for _ in range(M.shape[0])]
    C = key.s * M + _noise_rows(key, rs, NoiseSpec(coefficient, M.shape[1]))
    return [CipherVector(c, r) for c, r in zip(C, rs)]


def enc_db_batch(key, E, nonces=None):
    return encrypt_batch(key, E, DB_COEFFICIENT, nonces)


def enc_q_batch(key, E, nonces=None):
    return encrypt_batch(key, E, QUERY_COEFFICIENT, nonces)


def enc_adcpe_batch(key, E, nonces=None):
    return encrypt_batch(key, E, ADCPE_COEFFICIENT, nonces)


def decrypt_batch(key, cvs, coefficient=DB_COEFFICIENT):
    """
    Decrypt a batch of same-dimension ciphertexts.

    Parameters:
    key (SchemeKey): The secret key.
    cvs (list of CipherVector): Ciphertexts.
    coefficient (float): Coefficient they were produced with.

    Returns:
    numpy.ndarray: (len(cvs), d) plaintext matrix.
    """
    if not cvs:
        return np.empty((0, 0))
    d = cvs[0].dim
    if any(cv.dim != d for cv in cvs):
        raise InputError('ciphertexts in a batch must share one dimension')
    C = np.stack([cv.c for cv in cvs])
    noise = _noise_rows(key, [cv.r for cv in cvs], NoiseSpec(coefficient, d))
    return (C - noise) / key.s


def dec_db_batch(key, cvs):
    return decrypt_batch(key, cvs, DB_COEFFICIENT)


if __name__ == '__main__':
    utils.setup_logging('DEBUG')
    key = keygen(beta=0.2)
    rng = np.random.default_rng(0)

    e = np.array([1.0, -2.0, 0.5])
    cv = enc_db(key, e)
    print('round trip :', dec_db(key, cv))
    print('noise/bound:', np.linalg.norm(cv.c - key.s * e) / NoiseSpec.database(3).bound(key))

    # Query-to-database ordering with a margin above beta survives encryption
    e_q = rng.normal(size=64)
    e_q /= np.linalg.norm(e_q)
    near, far = e_q + 0.05 * rng.normal(size=64) / 8, e_q + 0.4 * rng.normal(size=64) / 8
    q = enc_q(key, e_q)
    d_near = np.linalg.norm(q.c - enc_db(key, near).c)
    d_far = np.linalg.norm(q.c - enc_db(key, far).c)
    print('plaintext margin:', np.linalg.norm(e_q - far) - np.linalg.norm(e_q - near))
    print('ordering kept   :', d_near < d_far)
