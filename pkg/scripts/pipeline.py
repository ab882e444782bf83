"""
Client side of the private retrieval flow.

Phase 1 encrypts embeddings and seals document texts before anything reaches the store, Phase 2
perturbs and encrypts a query, asks the store for an expanded top-k' and reranks the decrypted
candidates locally, Phase 3 assembles the prompt handed to a generator.
"""
import hashlib
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
from sklearn.neighbors import NearestNeighbors

import geometry_dp
import payload_crypto
import scheme_core
import utils
from geometry_dp import PerturbationParams
from utils import AuthenticityError, IngestRejected, InputError, ParameterError
from vector_store import StoredRecord, StoreIndex

logger = logging.getLogger(__name__)

EMPTY_CONTEXT_NOTICE = 'No relevant context was retrieved.'
PROMPT_SEPARATOR = '-' * 40
_BIN_HEADER = struct.Struct('<IQ')


@dataclass(frozen=True, eq=False)
class Document:
    id: int
    text: bytes
    embedding: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class RetrievedDocument:
    id: int
    embedding: np.ndarray
    text: bytes
    distance: float


@dataclass(frozen=True)
class RetrievalResult:
    query_text: str
    documents: list
    k: int
    k_prime: int
    plan: Optional[geometry_dp.ExpansionPlan] = None

    @property
    def ids(self):
        return [doc.id for doc in self.documents]


@dataclass(frozen=True)
class UploadReport:
    count: int
    bytes: int
    rejected: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.rejected


@dataclass(frozen=True)
class ClientContext:
    """
    Everything one client session needs: both keys, the store and the query defaults.

    Parameters:
    scheme_key (scheme_core.SchemeKey): Embedding encryption key.
    payload_key (payload_crypto.PayloadKey): Document sealing key.
    store: A vector_store.StoreIndex or a net_service.RemoteStore.
    dim (int): Session embedding dimension.
    k (int): Default number of results.
    radius (float): Default perturbation radius.
    seed (int, optional): Makes query perturbations reproducible. Nonces always come from the
        operating system unless a nonce source is passed explicitly.
    mapping (str): Radius to angle mapping used for k', 'chord' or 'tangent'.
    """
    scheme_key: scheme_core.SchemeKey
    payload_key: payload_crypto.PayloadKey
    store: object
    dim: int
    k: int = 5
    radius: float = 0.0
    seed: Optional[int] = None
    mapping: str = 'chord'
    nonces: utils.NonceSource = field(default=None, repr=False)
    perturb_rng: np.random.Generator = field(default=None, repr=False)
    rng_lock: object = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.scheme_key is None or self.payload_key is None:
            raise ParameterError('both the scheme key and the payload key are required')
        if self.dim < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.dim}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        PerturbationParams(self.radius)
        if self.nonces is None:
            object.__setattr__(self, 'nonces', utils.SYSTEM_NONCES)
        if self.perturb_rng is None:
            object.__setattr__(self, 'perturb_rng', np.random.default_rng(self.seed))


class Embedder(Protocol):
    dim: int

    def embed(self, text): ...


class Generator(Protocol):
    def generate(self, prompt): ...


class EchoGenerator:
    """Stand-in generator that returns the prompt unchanged."""

    def generate(self, prompt):
        return prompt


class HashEmbedder:
    """
    Deterministic mock embedder: a unit vector seeded by the SHA-256 of the text.

    Parameters:
    dim (int): Embedding dimension.
    """

    def __init__(self, dim):
        if dim < 1:
            raise ParameterError(f"embedding dimension must be >= 1, got {dim}")
        self.dim = dim

    def embed(self, text):
        if isinstance(text, str):
            text = text.encode('utf-8')
        seed = int.from_bytes(hashlib.sha256(text).digest()[:8], 'little')
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)


class FileEmbedder:
    """
    Looks up precomputed embeddings by exact text.

    Parameters:
    vectors (dict): Text bytes mapped to embedding vectors.
    """

    def __init__(self, vectors):
        self._vectors = {self._key(t): utils.as_vector(v, name='embedding') for t, v in vectors.items()}
        dims = {v.shape[0] for v in self._vectors.values()}
        if len(dims) > 1:
            raise InputError(f"precomputed embeddings have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @staticmethod
    def _key(text):
        return text.encode('utf-8') if isinstance(text, str) else bytes(text)

    @classmethod
    def from_documents(cls, documents):
        return cls({doc.text: doc.embedding for doc in documents if doc.embedding is not None})

    def embed(self, text):
        try:
            return self._vectors[self._key(text)].copy()
        except KeyError:
            raise InputError('no precomputed embedding for the given text')


def _embedding_of(doc, embedder, where):
    if doc.embedding is not None:
        return doc
    if embedder is None:
        raise InputError(f"{where}: document {doc.id} has no embedding and no embedder was given")
    return Document(doc.id, doc.text, embedder.embed(doc.text))


def load_documents(path, format='jsonl', texts_path=None, embedder=None):
    """
    Read documents from a JSON-lines file or a raw binary vector file plus a texts file.

    Parameters:
    path (str): jsonl file with one {"id", "text", "embedding"} object per line, or the binary vector
    file (dim u32 LE, count u64 LE, then count*dim f32 LE values).
    format (str): 'jsonl' or 'bin'.
    texts_path (str, optional): For 'bin', one text per line; line i belongs to vector i and id i.
    embedder (Embedder, optional): Fills in embeddings missing from jsonl records.

    Returns:
    list of Document: Documents in file order.
    """
    if format == 'jsonl':
        documents = []
        with open(path, encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    record_id = int(obj['id'])
                    text = obj['text'].encode('utf-8')
                except (ValueError, KeyError, TypeError, AttributeError) as e:
                    raise InputError(f"{path}:{lineno}: malformed document record ({e})",
                                     details={'line': lineno})
                embedding = obj.get('embedding')
                if embedding is not None:
                    embedding = utils.as_vector(embedding, name=f'embedding on line {lineno}')
                documents.append(_embedding_of(Document(record_id, text, embedding), embedder,
                                               f'{path}:{lineno}'))
        logger.info('loaded %d documents from %s', len(documents), path)
        return documents

    if format == 'bin':
        if texts_path is None:
            raise InputError('binary document files need a texts file')
        with open(path, 'rb') as f:
            reader = utils.ByteReader(f.read())
        dim, count = reader.unpack(_BIN_HEADER.format, 'vector file header')
        values = np.frombuffer(reader.take(4 * dim * count, 'vectors'), dtype='<f4')
        with open(texts_path, encoding='utf-8') as f:
            texts = [line.rstrip('\n') for line in f]
        if len(texts) < count:
            raise InputError(f"{texts_path} has {len(texts)} lines for {count} vectors")
        E = values.reshape(count, dim).astype(np.float64)
        documents = [Document(i, texts[i].encode('utf-8'), E[i]) for i in range(count)]
        logger.info('loaded %d documents (dim %d) from %s', count, dim, path)
        return documents

    raise ParameterError(f"unknown document format '{format}'")


def write_documents_bin(documents, path, texts_path):
    E = np.stack([doc.embedding for doc in documents]).astype('<f4')
    with open(path, 'wb') as f:
        f.write(_BIN_HEADER.pack(E.shape[1], E.shape[0]))
        f.write(E.tobytes())
    with open(texts_path, 'w', encoding='utf-8') as f:
        for doc in documents:
            f.write(doc.text.decode('utf-8').replace('\n', ' ') + '\n')


def open_store(endpoint, dim, workers=1, timeout=None):
    """
    Open a local store file, or connect to a remote store when endpoint is 'host:port'.
    """
    import net_service

    host, sep, port = str(endpoint).rpartition(':')
    if sep and port.isdigit() and not os.path.exists(endpoint):
        return net_service.RemoteStore(endpoint, timeout=timeout or net_service.DEFAULT_TIMEOUT)
    return StoreIndex.open_or_create(endpoint, dim, workers=workers)


def phase1_upload(ctx, documents, embedder=None):
    """
    Encrypt and upload documents.

    Parameters:
    ctx (ClientContext): Session.
    documents (sequence of Document): Documents to upload.
    embedder (Embedder, optional): Used for documents that carry no embedding.

    Returns:
    UploadReport: Accepted count, bytes sent and the reason for every rejected id.

    Raises:
    InputError: If there are no documents.
    """
    documents = list(documents)
    if not documents:
        raise InputError('nothing to upload')

    rejected = {}
    prepared = []
    for doc in documents:
        try:
            utils.check_record_id(doc.id)
            doc = _embedding_of(doc, embedder, 'upload')
            prepared.append((doc, utils.unit_normalize(
                utils.as_vector(doc.embedding, ctx.dim, name=f'embedding of document {doc.id}'))))
        except InputError as e:
            rejected[doc.id] = e.message

    records = []
    if prepared:
        E = np.stack([e for _, e in prepared])
        ciphertexts = scheme_core.enc_db_batch(ctx.scheme_key, E, nonces=ctx.nonces)
        for (doc, _), cv in zip(prepared, ciphertexts):
            sealed = payload_crypto.seal(ctx.payload_key, doc.text, utils.record_id_bytes(doc.id),
                                         nonces=ctx.nonces)
            records.append(StoredRecord(doc.id, cv, sealed))

    sent = 0
    while records:
        try:
            ctx.store.ingest(records)
        except IngestRejected as e:
            bad = set(e.ids)
            if not bad:
                raise
            reasons = e.details.get('reasons', {})
            for rid in bad:
                rejected[rid] = reasons.get(str(rid), e.message)
            remaining = [r for r in records if r.id not in bad]
            if len(remaining) == len(records):
                raise
            records = remaining
            continue
        sent = sum(len(r.to_bytes()) for r in records)
        break

    if rejected:
        logger.warning('phase 1: %d of %d documents rejected', len(rejected), len(documents))
    logger.info('phase 1: uploaded %d records (%d bytes)', len(records), sent)
    return UploadReport(count=len(records), bytes=sent, rejected=rejected)


def phase2_query(ctx, query_embedding, k=None, radius=None, query_text=''):
    """
    Private top-k retrieval.

    Parameters:
    ctx (ClientContext): Session.
    query_embedding (array-like): Query embedding of the session dimension.
    k (int, optional): Results wanted, ctx.k by default.
    radius (float, optional): Perturbation radius in [0, 1), ctx.radius by default.
    query_text (str): Carried into the result for Phase 3.

    Returns:
    RetrievalResult: At most k documents, closest first, ranked against the unperturbed query.

    Raises:
    AuthenticityError: If a retrieved payload fails authentication; details name the record.
    """
    k = ctx.k if k is None else int(k)
    radius = ctx.radius if radius is None else float(radius)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}", details={'k': k})
    params = PerturbationParams(radius)
    e_q = utils.unit_normalize(utils.as_vector(query_embedding, ctx.dim, name='query embedding'),
                               name='query embedding')

    m = ctx.store.count
    if m == 0:
        logger.warning('phase 2: store is empty')
        return RetrievalResult(query_text, [], k, 0)
    if k > m:
        logger.warning('phase 2: k=%d exceeds the store size, clamped to %d', k, m)
        k = m

    with ctx.rng_lock:
        perturbed = geometry_dp.perturb_query(e_q, params, rng=ctx.perturb_rng)
    plan = geometry_dp.plan_for_radius(k, m, ctx.dim, radius, mapping=ctx.mapping)
    encrypted = scheme_core.enc_q(ctx.scheme_key, perturbed, nonces=ctx.nonces)
    hits = ctx.store.topk_search(encrypted, plan.k_prime)
    logger.info("phase 2: k=%d k'=%d over m=%d, %d candidates returned", k, plan.k_prime, m, len(hits))
    if not hits:
        return RetrievalResult(query_text, [], k, plan.k_prime, plan)

    for hit in hits:
        if hit.record.embedding.dim != ctx.dim:
            raise InputError(f"record {hit.id} has dimension {hit.record.embedding.dim}",
                             details={'record_id': hit.id})
    candidates = scheme_core.dec_db_batch(ctx.scheme_key, [hit.record.embedding for hit in hits])
    ids = np.array([hit.id for hit in hits], dtype=np.uint64)
    diff = candidates - e_q
    distances = np.sqrt(np.einsum('ij,ij->i', diff, diff))
    order = np.lexsort((ids, distances))[:k]

    documents = []
    for i in order:
        hit = hits[i]
        try:
            text = payload_crypto.open_payload(ctx.payload_key, hit.record.payload,
                                               utils.record_id_bytes(hit.id))
        except AuthenticityError as e:
            raise AuthenticityError(f"payload of record {hit.id} failed authentication",
                                    details={**e.details, 'record_id': hit.id})
        documents.append(RetrievedDocument(hit.id, candidates[i], text, float(distances[i])))
    return RetrievalResult(query_text, documents, k, plan.k_prime, plan)


def _passage_text(doc):
    text = doc.text if isinstance(doc, RetrievedDocument) else doc
    return text.decode('utf-8', errors='replace') if isinstance(text, bytes) else str(text)


def phase3_prompt(query_text, retrieved_documents):
    """
    Assemble the generator prompt: the query, a separator, then numbered passages.

    Parameters:
    query_text (str): User question.
    retrieved_documents (list): RetrievedDocuments, or raw texts.

    Returns:
    str: The prompt; byte-identical for identical inputs.
    """
    lines = [f'Question: {query_text}', PROMPT_SEPARATOR]
    if not retrieved_documents:
        lines.append(EMPTY_CONTEXT_NOTICE)
    else:
        lines.append('Context:')
        for i, doc in enumerate(retrieved_documents, start=1):
            lines.append(f'[{i}] {_passage_text(doc)}')
    return '\n'.join(lines) + '\n'


def answer(ctx, query_text, embedder, k=None, radius=None, generator=None):
    """
    Run Phase 2 and Phase 3 for a text query.

    Returns:
    tuple: (RetrievalResult, prompt, generator output).
    """
    result = phase2_query(ctx, embedder.embed(query_text), k, radius, query_text=query_text)
    prompt = phase3_prompt(query_text, result.documents)
    return result, prompt, (generator or EchoGenerator()).generate(prompt)


def plaintext_topk(documents, query_embedding, k):
    """
    Brute-force plaintext top-k on unit-normalised embeddings, the reference ranking.

    Parameters:
    documents (sequence of Document): Documents with embeddings.
    query_embedding (array-like): Query embedding.
    k (int): Results wanted (clamped to the number of documents).

    Returns:
    list of tuple: (id, distance) pairs, closest first.
    """
    if not documents:
        return []
    E = np.stack([utils.unit_normalize(doc.embedding) for doc in documents])
    q = utils.unit_normalize(query_embedding, name='query embedding')
    nn = NearestNeighbors(n_neighbors=min(int(k), len(documents)), algorithm='brute').fit(E)
    distances, indices = nn.kneighbors(q[None, :])
    return [(documents[i].id, float(d)) for d, i in zip(distances[0], indices[0])]


if __name__ == '__main__':
    utils.setup_logging()
    dim = 64
    embedder = HashEmbedder(dim)
    docs = [Document(i, f'passage number {i}'.encode(), embedder.embed(f'passage number {i}'))
            for i in range(200)]

    ctx = ClientContext(scheme_core.keygen(beta=0.05), payload_crypto.payload_keygen(),
                        StoreIndex(dim), dim, k=3, radius=0.02)
    print(phase1_upload(ctx, docs))
    result, prompt, _ = answer(ctx, 'passage number 42', embedder)
    print(prompt)
    print('oracle:', plaintext_topk(docs, embedder.embed('passage number 42'), 3))
