import logging
import logging.handlers
import math
import os
import secrets
import struct
import threading

import numpy as np
from dotenv import dotenv_values

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'
MAX_RECORD_ID = 2 ** 64 - 1


class PpragError(Exception):
    """
    Base class for every error raised by the retrieval engine.

    Parameters:
    message (str): Human readable description.
    code (str, optional): Machine readable UPPER_SNAKE_CASE category.
    details (dict, optional): JSON-safe context such as record ids or byte offsets.
    """
    code = 'PPRAG_ERROR'
    exit_code = 1

    def __init__(self, message='', *, code=None, details=None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code
        self.details = dict(details or {})

    def asdict(self):
        """
        Convert the error to a dictionary for logs and error frames.

        Returns:
        dict: code, message and details with sorted detail keys.
        """
        return {
            'code': self.code,
            'message': self.message,
            'details': {k: self.details[k] for k in sorted(self.details)},
        }


class ParameterError(PpragError):
    code = 'PARAMETER_ERROR'
    exit_code = 2


class InputError(PpragError):
    code = 'INPUT_ERROR'
    exit_code = 3


class IngestRejected(PpragError):
    code = 'INGEST_REJECTED'
    exit_code = 4

    @property
    def ids(self):
        return list(self.details.get('ids', []))


class StoreFormatError(PpragError):
    code = 'STORE_FORMAT'
    exit_code = 5

    @property
    def offset(self):
        return self.details.get('offset')


class VersionMismatch(PpragError):
    code = 'VERSION_MISMATCH'
    exit_code = 6


class AuthenticityError(PpragError):
    code = 'AUTHENTICITY'
    exit_code = 7


class TransportError(PpragError):
    code = 'TRANSPORT'
    exit_code = 8


class RemoteError(PpragError):
    code = 'REMOTE_ERROR'
    exit_code = 9


class ConfigError(PpragError):
    code = 'CONFIG_ERROR'
    exit_code = 10


class FatalError(PpragError):
    code = 'FATAL'
    exit_code = 11


# Error classes by code, used to rebuild errors received over the wire
ERRORS_BY_CODE = {cls.code: cls for cls in (
    ParameterError, InputError, IngestRejected, StoreFormatError, VersionMismatch,
    AuthenticityError, TransportError, RemoteError, ConfigError, FatalError)}


def setup_logging(level='INFO', log_file=None):
    """
    Install console (and optionally rotating file) handlers on the root logger.

    Parameters:
    level (str or int): Logging level for the console handler.
    log_file (str, optional): Path of a rotating log file that receives warnings and errors.

    Returns:
    logging.Logger: The configured root logger.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    root.addHandler(console_handler)

    if log_file:
        file_handler = logging.handlers.RotatingFileHandler(
            log_file, maxBytes=10 * 1024 * 1024, backupCount=5)
        file_handler.setLevel(logging.WARNING)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    return root


def read_config_file(path):
    """
    Read a plain key=value configuration file.

    Parameters:
    path (str): Path of the file, lines of key=value with '#' comments.

    Returns:
    dict: Lower-cased keys mapped to their string values (empty values dropped).

    Raises:
    ConfigError: If the file does not exist or cannot be read.
    """
    if not os.path.isfile(path):
        raise ConfigError(f"config file '{path}' not found", details={'path': str(path)})
    try:
        values = dotenv_values(path)
    except OSError as e:
        raise ConfigError(f"config file '{path}' unreadable: {e}", details={'path': str(path)})
    return {key.lower(): value for key, value in values.items() if value not in (None, '')}


class NonceSource:
    """
    Thread-safe source of uniformly random byte strings from the operating system.
    """
    seeded = False

    def draw(self, length):
        """
        Draw a fresh random byte string.

        Parameters:
        length (int): Number of bytes.

        Returns:
        bytes: Random bytes.

        Raises:
        FatalError: If the entropy source fails.
        """
        try:
            return secrets.token_bytes(length)
        except OSError as e:
            raise FatalError(f"entropy source failure: {e}")


class SeededNonceSource(NonceSource):
    """
    Reproducible nonce source for seeded experiments and tests. Never use it for real data.

    Parameters:
    seed (int): Seed of the underlying numpy generator.
    """
    seeded = True

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def draw(self, length):
        with self._lock:
            return self._rng.bytes(length)


def nonce_source(seed=None):
    """
    Pick the system nonce source, or a seeded one when a seed is given.

    Parameters:
    seed (int, optional): Seed for reproducible runs.

    Returns:
    NonceSource: The nonce source.
    """
    if seed is None:
        return NonceSource()
    logger.debug('using seeded nonce source (seed=%d)', seed)
    return SeededNonceSource(seed)


SYSTEM_NONCES = NonceSource()


def as_vector(e, dim=None, name='vector'):
    """
    Convert an embedding to a finite float64 numpy vector.

    Parameters:
    e (array-like): The embedding (32-bit or 64-bit reals).
    dim (int, optional): Expected dimension.
    name (str): Name used in error messages.

    Returns:
    numpy.ndarray: 1-D float64 copy of the embedding.

    Raises:
    InputError: If the input is not 1-D, is empty, has the wrong dimension or holds non-finite values.
    """
    v = np.asarray(e, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise InputError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise InputError(f"{name} has dimension {v.shape[0]}, expected {dim}",
                         details={'dim': int(v.shape[0]), 'expected': int(dim)})
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} has non-finite components")
    return v.copy()


def as_matrix(E, name='matrix'):
    """
    Convert a batch of embeddings to a finite float64 (B, d) matrix.

    Parameters:
    E (array-like): Batch of embeddings, one per row.
    name (str): Name used in error messages.

    Returns:
    numpy.ndarray: 2-D float64 array.
    """
    M = np.asarray(E, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] == 0:
        raise InputError(f"{name} must be a (B, d) matrix with d >= 1, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InputError(f"{name} has non-finite components")
    return M


def unit_normalize(e, name='vector'):
    """
    Scale a vector to unit L2 norm.

    Parameters:
    e (array-like): Nonzero vector.
    name (str): Name used in error messages.

    Returns:
    numpy.ndarray: Unit-norm float64 vector.

    Raises:
    InputError: If the vector is zero.
    """
    v = as_vector(e, name=name)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not math.isfinite(norm):
        raise InputError(f"{name} is the zero vector and cannot be normalized")
    return v / norm


def check_record_id(record_id):
    """
    Check that a record id fits the u64 range of the store formats.

    Raises:
    InputError: If the id is not an integer in [0, 2^64 - 1].
    """
    if isinstance(record_id, bool) or not isinstance(record_id, (int, np.integer)) \
            or not 0 <= record_id <= MAX_RECORD_ID:
        raise InputError(f"record id {record_id!r} outside the u64 range",
                         details={'id': str(record_id)})
    return int(record_id)


def record_id_bytes(record_id):
    # u64 LE, also the AEAD associated data of a record
    return struct.pack('<Q', check_record_id(record_id))


class ByteReader:
    """
    Sequential little-endian reader that reports the byte offset of any truncation.

    Parameters:
    data (bytes): Buffer to read.
    base_offset (int): Offset of data[0] inside the enclosing file or frame.
    """

    def __init__(self, data, base_offset=0):
        self._data = memoryview(data)
        self._pos = 0
        self._base = base_offset

    @property
    def offset(self):
        return self._base + self._pos

    @property
    def remaining(self):
        return len(self._data) - self._pos

    def take(self, n, what='data'):
        if n < 0 or self._pos + n > len(self._data):
            raise StoreFormatError(
                f"truncated {what}: need {n} bytes at offset {self.offset}, {self.remaining} left",
                details={'offset': self.offset})
        chunk = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return chunk

    def unpack(self, fmt, what='field'):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return values[0] if len(values) == 1 else values

    def rest(self):
        return self.take(self.remaining, 'tail')
