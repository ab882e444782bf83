"""
Desk-scale experiments: vector-analysis attack success rate, database ordering flips, encryption
throughput, k' expansion tables and end-to-end recall.

Every experiment takes a seed; with a seed, keys, nonces and synthetic data all come from seeded
generators and the results are reproducible run to run.
"""
import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.neighbors import NearestNeighbors

import geometry_dp
import payload_crypto
import pipeline
import scheme_core
import utils
from utils import ParameterError
from vector_store import StoreIndex

logger = logging.getLogger(__name__)

SCHEMES = ('caprise', 'adcpe', 'plaintext')

# k' for m = 100000 as published, keyed by (n, r, k)
PUBLISHED_KPRIME = {
    (768, 0.033, 5): 258, (768, 0.033, 10): 571, (768, 0.033, 15): 673, (768, 0.033, 20): 928,
    (768, 0.02, 5): 58, (768, 0.02, 10): 108, (768, 0.02, 15): 170, (768, 0.02, 20): 203,
    (1536, 0.033, 5): 982, (1536, 0.033, 10): 1492, (1536, 0.033, 15): 2077, (1536, 0.033, 20): 2603,
    (1536, 0.02, 5): 145, (1536, 0.02, 10): 245, (1536, 0.02, 15): 388, (1536, 0.02, 20): 501,
}


@dataclass(frozen=True)
class AsrReport:
    dim: int
    m: int
    k: int
    trials: int
    beta: float
    asr_caprise: float = None
    asr_adcpe: float = None
    asr_plain: float = None
    seed: int = None


@dataclass(frozen=True)
class FlipReport:
    dim: int
    margin_factor: float
    trials: int
    flips: int
    pairing: str
    beta: float

    @property
    def rate(self):
        return self.flips / self.trials


@dataclass(frozen=True)
class ThroughputReport:
    dim: int
    batch: int
    repeats: int
    enc_db_per_s: float
    enc_q_per_s: float
    dec_db_per_s: float
    method: str = 'one warmup run, then the median of timed runs'

    @property
    def enc_db_elements_per_s(self):
        return self.enc_db_per_s * self.dim


@dataclass(frozen=True)
class RecallReport:
    n: int
    m: int
    k: int
    radius: float
    queries: int
    k_prime: int
    recall: float
    worst_query: float
    per_query: list = field(default_factory=list, repr=False)


def random_unit_vectors(rng, count, dim):
    """Uniform points on the unit sphere in R^dim, as normalised Gaussians."""
    X = rng.standard_normal((count, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def experiment_key(rng, beta, s_range=scheme_core.DEFAULT_S_RANGE):
    """
    Scheme key drawn from a seeded generator, for reproducible experiments only.
    """
    lo, hi = s_range
    return scheme_core.SchemeKey(s=float(rng.uniform(lo, hi)), K=rng.bytes(scheme_core.PRF_KEY_BYTES),
                                 beta=float(beta))


def _encrypt_database(scheme, key, E, nonces):
    if scheme == 'caprise':
        return np.stack([cv.c for cv in scheme_core.enc_db_batch(key, E, nonces=nonces)])
    if scheme == 'adcpe':
        return np.stack([cv.c for cv in scheme_core.enc_adcpe_batch(key, E, nonces=nonces)])
    if scheme == 'plaintext':
        return E.copy()
    raise ParameterError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")


def _topk_excluding_self(X, sqnorms, queries, k):
    # squared distances from each query row to every row, the query itself pushed to the end
    D = sqnorms[queries, None] + sqnorms[None, :] - 2.0 * (X[queries] @ X.T)
    D[np.arange(len(queries)), queries] = np.inf
    part = np.argpartition(D, k - 1, axis=1)[:, :k]
    return [set(row) for row in part]


def _overlap(X_plain, X_cipher, queries, k):
    # ciphertexts are rescaled so the expanded distance form stays well conditioned
    scale = np.max(np.abs(X_cipher))
    Xc = X_cipher / scale if scale > 1.0 else X_cipher
    truth = _topk_excluding_self(X_plain, np.einsum('ij,ij->i', X_plain, X_plain), queries, k)
    guess = _topk_excluding_self(Xc, np.einsum('ij,ij->i', Xc, Xc), queries, k)
    return [len(t & g) / k for t, g in zip(truth, guess)]


def run_asr(dim, m, k, trials, scheme=SCHEMES, beta=scheme_core.DEFAULT_BETA, seed=None,
            workers=1, chunk=64):
    """
    Vector-analysis attack: rank the database around one of its own vectors using only ciphertext
    distances, and measure the top-k overlap with the plaintext ranking.

    Parameters:
    dim (int): Embedding dimension.
    m (int): Database size.
    k (int): Neighbours compared per trial.
    trials (int): Number of database vectors used as attack queries.
    scheme (str or tuple): One of 'caprise', 'adcpe', 'plaintext', or several.
    beta (float): Scheme margin.
    seed (int, optional): Seed for data, key and nonces.
    workers (int): Threads over trial chunks.
    chunk (int): Trials per chunk.

    Returns:
    AsrReport: Mean overlap fraction per scheme requested.
    """
    if m <= k:
        raise ParameterError(f"need m > k, got m={m}, k={k}", details={'m': m, 'k': k})
    if trials < 1 or k < 1:
        raise ParameterError('trials and k must be positive')
    schemes = (scheme,) if isinstance(scheme, str) else tuple(scheme)

    rng = np.random.default_rng(seed)
    E = random_unit_vectors(rng, m, dim)
    key = experiment_key(rng, beta)
    queries = rng.choice(m, size=trials, replace=trials > m)
    nonces = utils.nonce_source(None if seed is None else seed + 1)
    chunks = [queries[i:i + chunk] for i in range(0, trials, chunk)]

    rates = {}
    for name in schemes:
        C = _encrypt_database(name, key, E, nonces)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda q: _overlap(E, C, q, k), chunks))
        else:
            parts = [_overlap(E, C, q, k) for q in chunks]
        rates[name] = float(np.mean([x for part in parts for x in part]))
        logger.info('ASR %s dim=%d m=%d k=%d: %.4f', name, dim, m, k, rates[name])

    return AsrReport(dim, m, k, trials, beta, asr_caprise=rates.get('caprise'),
                     asr_adcpe=rates.get('adcpe'), asr_plain=rates.get('plaintext'), seed=seed)


def run_flip_rate(dim=2, margin_factor=1.01, trials=100000, beta=scheme_core.DEFAULT_BETA,
                  seed=None, pairing='db', spread=1.0):
    """
    Count ordering flips on triples whose plaintext distances differ by margin_factor * beta.

    Each trial draws e_1 on the unit sphere and a unit direction u, sets e_2 = e_1 + a*u and
    e_3 = e_1 - (a + margin_factor*beta)*u with a = spread*beta, encrypts all three afresh and checks
    whether e_2 still encrypts closer to e_1 than e_3 does.

    Parameters:
    dim (int): Dimension.
    margin_factor (float): Plaintext margin in units of beta, > 1.
    trials (int): Number of triples.
    beta (float): Scheme margin.
    seed (int, optional): Seed.
    pairing (str): 'db' encrypts e_1 with enc_db (database to database), 'query' encrypts it with
    enc_q (query to database, where no flip can happen).
    spread (float): a in units of beta.

    Returns:
    FlipReport: Trials and observed flips.
    """
    if margin_factor <= 1:
        raise ParameterError(f"margin factor must exceed 1, got {margin_factor}")
    if pairing not in ('db', 'query'):
        raise ParameterError(f"pairing must be 'db' or 'query', got '{pairing}'")

    rng = np.random.default_rng(seed)
    key = experiment_key(rng, beta)
    nonces = utils.nonce_source(None if seed is None else seed + 1)

    e1 = random_unit_vectors(rng, trials, dim)
    u = random_unit_vectors(rng, trials, dim)
    a = spread * beta
    e2 = e1 + a * u
    e3 = e1 - (a + margin_factor * beta) * u

    first = scheme_core.enc_q_batch if pairing == 'query' else scheme_core.enc_db_batch
    c1 = np.stack([cv.c for cv in first(key, e1, nonces=nonces)])
    c2 = np.stack([cv.c for cv in scheme_core.enc_db_batch(key, e2, nonces=nonces)])
    c3 = np.stack([cv.c for cv in scheme_core.enc_db_batch(key, e3, nonces=nonces)])

    d12 = np.linalg.norm(c1 - c2, axis=1)
    d13 = np.linalg.norm(c1 - c3, axis=1)
    flips = int(np.count_nonzero(d12 >= d13))
    logger.info('flip rate dim=%d margin=%.3f pairing=%s: %d / %d', dim, margin_factor, pairing,
                flips, trials)
    return FlipReport(dim, margin_factor, trials, flips, pairing, beta)


def _median_rate(fn, count, repeats):
    fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return count / statistics.median(timings)


def run_throughput(dims=(192, 384, 768, 1536), batch=1000, repeats=5, seed=None):
    """
    Single-threaded vectors per second for enc_db, enc_q and dec_db.

    Parameters:
    dims (sequence of int): Embedding dimensions.
    batch (int): Vectors per timed run.
    repeats (int): Timed runs per operation, at least 5.
    seed (int, optional): Seed for data and key.

    Returns:
    list of ThroughputReport: One report per dimension.
    """
    repeats = max(5, int(repeats))
    rng = np.random.default_rng(seed)
    key = experiment_key(rng, scheme_core.DEFAULT_BETA)
    reports = []
    for dim in dims:
        E = random_unit_vectors(rng, batch, dim)
        cvs = scheme_core.enc_db_batch(key, E)
        report = ThroughputReport(
            dim, batch, repeats,
            enc_db_per_s=_median_rate(lambda: scheme_core.enc_db_batch(key, E), batch, repeats),
            enc_q_per_s=_median_rate(lambda: scheme_core.enc_q_batch(key, E), batch, repeats),
            dec_db_per_s=_median_rate(lambda: scheme_core.dec_db_batch(key, cvs), batch, repeats))
        logger.info('throughput dim=%d: enc_db %.0f/s enc_q %.0f/s dec_db %.0f/s', dim,
                    report.enc_db_per_s, report.enc_q_per_s, report.dec_db_per_s)
        reports.append(report)
    return reports


def run_kprime_table(ns=(768, 1536), rs=(0.033, 0.02), ks=(5, 10, 15, 20), m=100000,
                     mapping='chord'):
    """
    k' for every (n, r, k) combination.

    Returns:
    list of dict: Rows with n, r, k, delta_alpha, k_prime, ratio and the published k' when known.
    """
    rows = []
    for n in ns:
        for r in rs:
            for k in ks:
                plan = geometry_dp.plan_for_radius(k, m, n, r, mapping=mapping)
                rows.append({
                    'n': n, 'r': r, 'k': k, 'm': m,
                    'delta_alpha': plan.delta_alpha,
                    'k_prime': plan.k_prime,
                    'ratio': plan.ratio,
                    'published_k_prime': PUBLISHED_KPRIME.get((n, r, k), ''),
                })
    return rows


def run_recall(n=64, m=10000, k=10, radius=0.02, queries=1000, beta=0.02, seed=None):
    """
    End-to-end recall@k of private retrieval against plaintext brute force on uniform sphere data.

    Returns:
    RecallReport: Mean and worst per-query recall, and the k' used.
    """
    rng = np.random.default_rng(seed)
    E = random_unit_vectors(rng, m, n)
    Q = random_unit_vectors(rng, queries, n)
    ctx = pipeline.ClientContext(
        experiment_key(rng, beta), payload_crypto.PayloadKey(rng.bytes(payload_crypto.PAYLOAD_KEY_BYTES)),
        StoreIndex(n), n, k=k, radius=radius, seed=seed,
        nonces=utils.nonce_source(None if seed is None else seed + 1))
    pipeline.phase1_upload(ctx, [pipeline.Document(i, b'', E[i]) for i in range(m)])

    oracle = NearestNeighbors(n_neighbors=k, algorithm='brute').fit(E)
    _, truth = oracle.kneighbors(Q)

    per_query = []
    k_prime = k
    for q, expected in zip(Q, truth):
        result = pipeline.phase2_query(ctx, q)
        k_prime = result.k_prime
        per_query.append(len(set(result.ids) & set(int(i) for i in expected)) / k)
    report = RecallReport(n, m, k, radius, queries, k_prime, float(np.mean(per_query)),
                          float(np.min(per_query)), per_query)
    logger.info("recall@%d n=%d m=%d r=%g k'=%d: %.4f", k, n, m, radius, k_prime, report.recall)
    return report


def report_rows(reports):
    rows = []
    for report in reports:
        row = asdict(report)
        row.pop('per_query', None)
        for name in ('rate', 'enc_db_elements_per_s'):
            if hasattr(type(report), name):
                row[name] = getattr(report, name)
        rows.append(row)
    return rows


def write_csv(rows, path):
    """
    Write dict rows to a CSV file with a header row.
    """
    if not rows:
        raise ParameterError('no rows to write')
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def append_manifest(path, record):
    """
    Append one JSON object per line describing a run: experiment name, parameters, seed.
    """
    line = dict(record)
    line.setdefault('timestamp', time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime()))
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(line, sort_keys=True, default=str) + '\n')
    return path


if __name__ == '__main__':
    utils.setup_logging()
    for row in run_kprime_table():
        print(f"{row['n']:<5} {row['r']:<6} {row['k']:<3} k'={row['k_prime']:<5} "
              f"published={row['published_k_prime']:<5} ratio={row['ratio']:.1f}")
    print(run_asr(32, 2000, 10, 50, seed=0))
    print(run_flip_rate(trials=20000, seed=0))
    print(run_throughput(dims=(768,), batch=500, seed=0))
    print('deg(delta_alpha) at r=0.033:', math.degrees(geometry_dp.delta_alpha_of_radius(0.033)))
