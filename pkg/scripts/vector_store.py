"""
Server-side encrypted vector store.

Holds ciphertext embeddings and sealed payloads and answers exact top-k' queries by L2 distance in
ciphertext space. Nothing here touches key material: the store only ever sees CipherVectors,
SealedPayloads and record ids.
"""
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

import utils
from ciphertext_format import CipherVector, SealedPayload
from utils import IngestRejected, InputError, ParameterError, StoreFormatError, VersionMismatch

logger = logging.getLogger(__name__)

STORE_MAGIC = b'PPRG'
STORE_VERSION = 1
MAX_RECORD_ID = utils.MAX_RECORD_ID
BLOCK_ROWS = 4096

_HEADER = struct.Struct('<4sBIQ')
_COUNT_OFFSET = 9


@dataclass(frozen=True)
class StoredRecord:
    id: int
    embedding: CipherVector
    payload: SealedPayload

    def to_bytes(self):
        payload = self.payload.to_bytes()
        return (struct.pack('<Q', self.id) + self.embedding.to_bytes()
                + struct.pack('<I', len(payload)) + payload)

    @classmethod
    def read_from(cls, reader):
        record_id = reader.unpack('<Q', 'record id')
        embedding = CipherVector.read_from(reader)
        length = reader.unpack('<I', 'payload length')
        start = reader.offset
        payload = SealedPayload.from_bytes(reader.take(length, 'payload'), base_offset=start)
        return cls(record_id, embedding, payload)


@dataclass(frozen=True)
class SearchHit:
    id: int
    distance: float
    record: StoredRecord


class _Snapshot:
    # Immutable view of the store; replaced wholesale by each ingest
    __slots__ = ('ids', 'matrix', 'records', 'positions')

    def __init__(self, ids, matrix, records, positions):
        self.ids = ids
        self.matrix = matrix
        self.records = records
        self.positions = positions


def _write_all(f, data):
    view = memoryview(data)
    while view:
        view = view[f.write(view):]


def _write_count(f, count):
    f.seek(_COUNT_OFFSET)
    _write_all(f, struct.pack('<Q', count))


def _empty_snapshot(dim):
    return _Snapshot(np.empty(0, dtype=np.uint64), np.empty((0, dim)), (), {})


class StoreIndex:
    """
    Append-only store of StoredRecords with exact brute-force search.

    Parameters:
    dim (int): Ciphertext dimension, fixed at creation.
    path (str, optional): Store file; when set, every ingest is appended and flushed to it.
    workers (int): Threads used to scan record shards during search.
    """

    def __init__(self, dim, path=None, workers=1):
        if dim < 1:
            raise ParameterError(f"store dimension must be >= 1, got {dim}")
        self._dim = int(dim)
        self._path = path
        self._workers = max(1, int(workers))
        self._write_lock = threading.Lock()
        self._snapshot = _empty_snapshot(self._dim)

    @property
    def dim(self):
        return self._dim

    @property
    def count(self):
        return len(self._snapshot.records)

    @property
    def path(self):
        return self._path

    @property
    def records(self):
        return self._snapshot.records

    def get(self, record_id):
        snapshot = self._snapshot
        position = snapshot.positions.get(record_id)
        return None if position is None else snapshot.records[position]

    def _validate(self, snapshot, records):
        problems = {}
        seen = set()
        for record in records:
            rid = record.id
            if not (isinstance(rid, (int, np.integer)) and 0 <= rid <= MAX_RECORD_ID):
                problems[rid] = 'id outside the u64 range'
            elif record.embedding.dim != self._dim:
                problems[rid] = f'dimension {record.embedding.dim} != store dimension {self._dim}'
            elif rid in snapshot.positions or rid in seen:
                problems[rid] = 'duplicate id'
            seen.add(rid)
        return problems

    def ingest(self, records):
        """
        Append records atomically: either all are accepted or none.

        Parameters:
        records (sequence of StoredRecord): New records.

        Returns:
        StoreIndex: This store, updated.

        Raises:
        IngestRejected: Listing every offending id when a dimension or id check fails.
        """
        records = list(records)
        if not records:
            return self

        with self._write_lock:
            snapshot = self._snapshot
            problems = self._validate(snapshot, records)
            if problems:
                ids = list(problems)
                logger.warning('rejected ingest of %d records: %d offending ids',
                               len(records), len(ids))
                raise IngestRejected(
                    f"ingest rejected for record id(s) {ids[:10]}: {problems[ids[0]]}",
                    details={'ids': [int(i) for i in ids],
                             'reasons': {str(i): problems[i] for i in ids}})

            if self._path is not None:
                self._append_to_file(records, snapshot)

            new_ids = np.fromiter((r.id for r in records), dtype=np.uint64, count=len(records))
            new_rows = np.stack([r.embedding.c for r in records])
            positions = dict(snapshot.positions)
            base = len(snapshot.records)
            for offset, record in enumerate(records):
                positions[record.id] = base + offset
            self._snapshot = _Snapshot(
                np.concatenate([snapshot.ids, new_ids]),
                np.concatenate([snapshot.matrix, new_rows]),
                snapshot.records + tuple(records),
                positions)

        logger.info('ingested %d records (store count %d)', len(records), self.count)
        return self

    def _append_to_file(self, records, snapshot):
        if not os.path.exists(self._path):
            self._write_file(self._path, snapshot.records, self._dim)
        # Unbuffered: nothing may be left to flush after a rollback
        with open(self._path, 'r+b', buffering=0) as f:
            end = f.seek(0, os.SEEK_END)
            try:
                for record in records:
                    _write_all(f, record.to_bytes())
                _write_count(f, len(snapshot.records) + len(records))
                os.fsync(f.fileno())
            except BaseException:
                logger.error('append to %s failed; truncating back to %d bytes', self._path, end)
                f.truncate(end)
                _write_count(f, len(snapshot.records))
                os.fsync(f.fileno())
                raise

    def _squared_distances(self, matrix, q):
        m = matrix.shape[0]
        blocks = [(start, min(start + BLOCK_ROWS, m)) for start in range(0, m, BLOCK_ROWS)]

        def scan(bounds):
            start, stop = bounds
            diff = matrix[start:stop] - q
            return np.einsum('ij,ij->i', diff, diff)

        if self._workers > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self._workers) as pool:
                parts = list(pool.map(scan, blocks))
        else:
            parts = [scan(bounds) for bounds in blocks]
        return np.concatenate(parts)

    def topk_search(self, query, k_prime):
        """
        Exact top-k' search by L2 distance in ciphertext space.

        Parameters:
        query (CipherVector): Encrypted (perturbed) query.
        k_prime (int): Number of hits wanted, >= 1.

        Returns:
        list of SearchHit: min(k_prime, count) hits by ascending distance, ties by ascending id.
        """
        if k_prime < 1:
            raise ParameterError(f"k' must be >= 1, got {k_prime}", details={'k_prime': k_prime})
        if query.dim != self._dim:
            raise InputError(f"query has dimension {query.dim}, store has {self._dim}",
                             details={'dim': query.dim, 'expected': self._dim})

        snapshot = self._snapshot
        m = len(snapshot.records)
        if m == 0:
            return []

        d2 = self._squared_distances(snapshot.matrix, query.c)
        k = min(int(k_prime), m)
        if k < m:
            kth = np.partition(d2, k - 1)[k - 1]
            candidates = np.flatnonzero(d2 <= kth)
        else:
            candidates = np.arange(m)
        order = candidates[np.lexsort((snapshot.ids[candidates], d2[candidates]))][:k]

        logger.debug('search k\'=%d over %d records', k, m)
        return [SearchHit(int(snapshot.ids[i]), float(np.sqrt(d2[i])), snapshot.records[i])
                for i in order]

    @staticmethod
    def _write_file(path, records, dim=None):
        if dim is None:
            dim = records[0].embedding.dim if records else 0
        tmp = f'{path}.tmp'
        with open(tmp, 'wb') as f:
            f.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, dim, len(records)))
            for record in records:
                f.write(record.to_bytes())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def persist(self, path=None):
        """
        Write the whole store to a file (atomically, through a temporary file).

        Parameters:
        path (str, optional): Target file, the bound store file by default.

        Returns:
        str: The path written.
        """
        path = path or self._path
        if path is None:
            raise ParameterError('no store path to persist to')
        with self._write_lock:
            self._write_file(path, self._snapshot.records, self._dim)
        logger.info('persisted %d records to %s', self.count, path)
        return path

    @classmethod
    def load(cls, path, workers=1, bind=True):
        """
        Load a store file.

        Parameters:
        path (str): Store file.
        workers (int): Search threads.
        bind (bool): Keep appending later ingests to the same file.

        Returns:
        StoreIndex: The loaded store.

        Raises:
        StoreFormatError: On bad magic, truncation or trailing bytes (with byte offset).
        VersionMismatch: On an unsupported store version.
        """
        with open(path, 'rb') as f:
            data = f.read()
        reader = utils.ByteReader(data)
        magic, version, dim, count = reader.unpack(_HEADER.format, 'store header')
        if magic != STORE_MAGIC:
            raise StoreFormatError(f"bad store magic {magic!r} at offset 0", details={'offset': 0})
        if version != STORE_VERSION:
            raise VersionMismatch(f"unsupported store version {version}",
                                  details={'offset': 4, 'version': version})
        if dim == 0:
            raise StoreFormatError('store header declares dimension 0', details={'offset': 5})

        records = []
        for _ in range(count):
            start = reader.offset
            record = StoredRecord.read_from(reader)
            if record.embedding.dim != dim:
                raise StoreFormatError(
                    f"record at offset {start} has dimension {record.embedding.dim}, header says {dim}",
                    details={'offset': start})
            records.append(record)
        if reader.remaining:
            raise StoreFormatError(f"trailing bytes after {count} records at offset {reader.offset}",
                                   details={'offset': reader.offset})

        store = cls(dim, path=None, workers=workers)
        try:
            store.ingest(records)
        except IngestRejected as e:
            raise StoreFormatError(f"store file {path} holds duplicate record ids {e.ids[:10]}",
                                   details={'ids': e.ids})
        if bind:
            store._path = path
        logger.info('loaded %d records (dim %d) from %s', count, dim, path)
        return store

    @classmethod
    def open_or_create(cls, path, dim, workers=1):
        if os.path.exists(path):
            store = cls.load(path, workers=workers)
            if store.dim != dim:
                raise InputError(f"store {path} has dimension {store.dim}, expected {dim}")
            return store
        store = cls(dim, path=path, workers=workers)
        cls._write_file(path, (), dim)
        return store


def ingest(store, records):
    return store.ingest(records)


def topk_search(store, query, k_prime):
    return store.topk_search(query, k_prime)


def persist(store, path=None):
    return store.persist(path)


def load(path, workers=1):
    return StoreIndex.load(path, workers=workers)


if __name__ == '__main__':
    import scheme_core
    import payload_crypto

    utils.setup_logging()
    rng = np.random.default_rng(1)
    key = scheme_core.keygen(beta=0.05)
    pkey = payload_crypto.payload_keygen()

    E = rng.normal(size=(1000, 32))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    store = StoreIndex(32)
    store.ingest(StoredRecord(i, cv, payload_crypto.seal(pkey, b'doc %d' % i, utils.record_id_bytes(i)))
                 for i, cv in enumerate(scheme_core.enc_db_batch(key, E)))

    q = E[0] + 0.01 * rng.normal(size=32)
    hits = store.topk_search(scheme_core.enc_q(key, q / np.linalg.norm(q)), 5)
    print('top-5 ids           :', [h.id for h in hits])
    print('plaintext top-5 ids :', list(np.argsort(np.linalg.norm(E - q / np.linalg.norm(q), axis=1))[:5]))
