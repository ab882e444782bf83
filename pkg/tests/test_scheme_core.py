import struct

import numpy as np
import pytest
from scipy import stats

import scheme_core
import utils
from ciphertext_format import CipherVector
from eval_harness import random_unit_vectors
from scheme_core import NoiseSpec, SchemeKey
from utils import InputError, ParameterError, StoreFormatError, VersionMismatch

COEFFICIENTS = {
    'database': scheme_core.DB_COEFFICIENT,
    'query': scheme_core.QUERY_COEFFICIENT,
    'adcpe': scheme_core.ADCPE_COEFFICIENT,
}


def noise_norms(key, count, dim, coefficient, seed):
    source = utils.SeededNonceSource(seed)
    rows = scheme_core._noise_rows(key, [source.draw(16) for _ in range(count)],
                                   NoiseSpec(coefficient, dim))
    return np.linalg.norm(rows, axis=1)


def test_keygen_range_and_key_length():
    key = scheme_core.keygen(128, beta=0.2, s_range=(2.0 ** 20, 2.0 ** 30))
    assert 2.0 ** 20 <= key.s <= 2.0 ** 30
    assert len(key.K) == 32
    assert key.beta == 0.2


def test_keygen_draws_distinct_keys():
    assert scheme_core.keygen().K != scheme_core.keygen().K


@pytest.mark.parametrize('s_range', [(5.0, 3.0), (0.0, 3.0), (-1.0, 3.0), (3.0, 3.0)])
def test_keygen_rejects_bad_range(s_range):
    with pytest.raises(ParameterError):
        scheme_core.keygen(128, beta=0.2, s_range=s_range)


def test_keygen_rejects_bad_beta_and_security_param():
    with pytest.raises(ParameterError):
        scheme_core.keygen(beta=0.0)
    with pytest.raises(ParameterError):
        scheme_core.keygen(security_param=512)


def test_key_repr_hides_secrets(key):
    assert 'secret' in repr(key)
    assert key.K.hex() not in repr(key)


def test_key_file_round_trip(tmp_path, key):
    path = tmp_path / 'scheme.key'
    key.save(str(path))
    data = path.read_bytes()
    assert len(data) == 1 + 8 + 8 + 32
    assert struct.unpack('<Bdd', data[:17]) == (1, key.s, key.beta)
    assert SchemeKey.load(str(path)) == key


def test_key_file_version_mismatch(key):
    data = bytearray(key.to_bytes())
    data[0] = 9
    with pytest.raises(VersionMismatch):
        SchemeKey.from_bytes(bytes(data))
    with pytest.raises(StoreFormatError):
        SchemeKey.from_bytes(key.to_bytes()[:-1])


def test_prf_stream_is_deterministic_and_extendable(key):
    r = bytes(16)
    assert scheme_core.prf_stream(key.K, r, 64) == scheme_core.prf_stream(key.K, r, 64)
    assert scheme_core.prf_stream(key.K, r, 64)[:32] == scheme_core.prf_stream(key.K, r, 32)
    assert scheme_core.prf_stream(key.K, b'\x01' + bytes(15), 32) != scheme_core.prf_stream(key.K, r, 32)


def test_sample_noise_is_deterministic(key):
    r = bytes(range(16))
    spec = NoiseSpec.database(768)
    a = scheme_core.sample_noise(key, r, spec)
    b = scheme_core.sample_noise(key, r, spec)
    assert a.tobytes() == b.tobytes()


def test_sample_noise_rejects_zero_dimension(key):
    with pytest.raises(ParameterError):
        scheme_core.sample_noise(key, bytes(16), NoiseSpec(scheme_core.DB_COEFFICIENT, 0))


@pytest.mark.parametrize('flavour', sorted(COEFFICIENTS))
@pytest.mark.parametrize('dim', [1, 2, 8, 768])
def test_noise_bounds_are_strict(scheme_key, flavour, dim):
    coefficient = COEFFICIENTS[flavour]
    norms = noise_norms(scheme_key, 2000, dim, coefficient, seed=dim)
    assert np.all(norms < coefficient * scheme_key.s * scheme_key.beta)


@pytest.mark.slow
@pytest.mark.parametrize('flavour', sorted(COEFFICIENTS))
def test_noise_bounds_over_many_encryptions(flavour):
    key = scheme_core.SchemeKey(s=2.0 ** 30, K=bytes(32), beta=0.2)
    coefficient = COEFFICIENTS[flavour]
    norms = noise_norms(key, 100000, 4, coefficient, seed=7)
    assert np.all(norms < coefficient * key.s * key.beta)


def test_noise_is_uniform_in_the_ball(key):
    dim = 8
    bound = NoiseSpec.database(dim).bound(key)
    norms = noise_norms(key, 20000, dim, scheme_core.DB_COEFFICIENT, seed=99)
    assert stats.kstest((norms / bound) ** dim, 'uniform').pvalue > 0.01


@pytest.mark.slow
def test_noise_is_uniform_in_the_ball_large_sample(key):
    dim = 8
    bound = NoiseSpec.database(dim).bound(key)
    norms = noise_norms(key, 100000, dim, scheme_core.DB_COEFFICIENT, seed=100)
    assert stats.kstest((norms / bound) ** dim, 'uniform').pvalue > 0.01


@pytest.mark.parametrize('dim', [8, 768, 1536])
def test_round_trip(scheme_key, rng, dim):
    E = rng.standard_normal((1000, dim))
    D = scheme_core.dec_db_batch(scheme_key, scheme_core.enc_db_batch(scheme_key, E))
    assert np.all(np.abs(D - E) <= 1e-6 * np.abs(E) + 1e-12)


def test_single_vector_round_trip(scheme_key):
    e = np.array([1.0, -2.0, 0.5])
    assert np.allclose(scheme_core.dec_db(scheme_key, scheme_core.enc_db(scheme_key, e)), e,
                       rtol=1e-6, atol=0)
    assert np.allclose(scheme_core.dec_adcpe(scheme_key, scheme_core.enc_adcpe(scheme_key, e)), e,
                       rtol=1e-6, atol=0)


def test_float32_input_is_accepted(key):
    e = np.float32([0.25, -0.5, 1.0])
    assert np.allclose(scheme_core.dec_db(key, scheme_core.enc_db(key, e)), e, rtol=1e-6)


def test_decrypt_with_wrong_nonce_differs(key):
    e = np.array([1.0, -2.0, 0.5])
    cv = scheme_core.enc_db(key, e)
    altered = CipherVector(cv.c, bytes(b ^ 0xFF for b in cv.r))
    assert not np.allclose(scheme_core.dec_db(key, altered), e, rtol=1e-3)


def test_decrypt_dimension_mismatch(key):
    with pytest.raises(InputError):
        scheme_core.dec_db(key, scheme_core.enc_db(key, [1.0, 2.0]), dim=3)


def test_non_finite_input_is_rejected(key):
    with pytest.raises(InputError):
        scheme_core.enc_db(key, [1.0, np.inf])
    with pytest.raises(InputError):
        scheme_core.enc_db_batch(key, [[1.0, np.nan]])


def test_zero_vector_ciphertext_is_pure_noise(scheme_key):
    cv = scheme_core.enc_db(scheme_key, np.zeros(16))
    assert np.linalg.norm(cv.c) < 3 * scheme_key.s * scheme_key.beta / 8


def test_query_encryption_is_randomised(key):
    e = np.ones(4) / 2
    a, b = scheme_core.enc_q(key, e), scheme_core.enc_q(key, e)
    assert a.r != b.r
    assert not np.array_equal(a.c, b.c)
    assert np.linalg.norm(a.c - key.s * e) < key.s * key.beta / 8


def test_noise_does_not_depend_on_the_plaintext(scheme_key, rng):
    nonce = bytes(range(16, 32))
    e1, e2 = rng.standard_normal(32), rng.standard_normal(32)
    n1 = scheme_core.enc_db(scheme_key, e1, nonce=nonce).c - scheme_key.s * e1
    n2 = scheme_core.enc_db(scheme_key, e2, nonce=nonce).c - scheme_key.s * e2
    assert np.allclose(n1, n2, rtol=0, atol=1e-9 * scheme_key.s)


def test_batch_matches_single_encryption(key, rng):
    E = rng.standard_normal((20, 12))
    batch = scheme_core.enc_db_batch(key, E, nonces=utils.SeededNonceSource(3))
    source = utils.SeededNonceSource(3)
    for e, cv in zip(E, batch):
        single = scheme_core.enc_db(key, e, nonces=source)
        assert single.r == cv.r
        assert np.allclose(single.c, cv.c, rtol=1e-12, atol=0)


def test_empty_batch(key):
    assert scheme_core.enc_db_batch(key, np.empty((0, 4))) == []


def make_triples(rng, count, dim, beta):
    # ||e_q - e_1|| < ||e_q - e_2|| - beta, margin just above beta for some triples
    e_q = random_unit_vectors(rng, count, dim)
    a = rng.uniform(0.0, 1.0, count)
    b = a + beta * (1.0 + 1e-6) + rng.uniform(0.0, 0.5, count) * (rng.random(count) < 0.5)
    e_1 = e_q + a[:, None] * random_unit_vectors(rng, count, dim)
    e_2 = e_q + b[:, None] * random_unit_vectors(rng, count, dim)
    return e_q, e_1, e_2


def ordering_violations(key, rng, count, dim, query_enc, db_enc, chunk=5000):
    violations = 0
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        e_q, e_1, e_2 = make_triples(rng, n, dim, key.beta)
        q = np.stack([cv.c for cv in query_enc(key, e_q)])
        c1 = np.stack([cv.c for cv in db_enc(key, e_1)])
        c2 = np.stack([cv.c for cv in db_enc(key, e_2)])
        violations += int(np.count_nonzero(np.linalg.norm(q - c1, axis=1) >= np.linalg.norm(q - c2, axis=1)))
    return violations


@pytest.mark.parametrize('dim', [2, 64, 768])
def test_query_to_database_ordering_is_preserved(scheme_key, rng, dim):
    assert ordering_violations(scheme_key, rng, 5000, dim, scheme_core.enc_q_batch,
                               scheme_core.enc_db_batch) == 0


@pytest.mark.slow
@pytest.mark.parametrize('dim', [2, 64, 768])
def test_query_to_database_ordering_over_many_triples(rng, dim):
    key = scheme_core.SchemeKey(s=2.0 ** 30, K=bytes(range(32)), beta=0.2)
    assert ordering_violations(key, rng, 100000, dim, scheme_core.enc_q_batch,
                               scheme_core.enc_db_batch) == 0


@pytest.mark.parametrize('dim', [2, 64])
def test_adcpe_preserves_ordering_between_any_ciphertexts(scheme_key, rng, dim):
    assert ordering_violations(scheme_key, rng, 5000, dim, scheme_core.enc_adcpe_batch,
                               scheme_core.enc_adcpe_batch) == 0


def test_ciphertext_serialization(key):
    cv = scheme_core.enc_db(key, [1.0, 2.0, 3.0])
    data = cv.to_bytes()
    assert data[:4] == b'CPRS'
    assert data[4] == 1
    assert struct.unpack('<I', data[5:9]) == (3,)
    assert len(data) == CipherVector.encoded_size(3) == 9 + 24 + 16
    assert data[-16:] == cv.r
    assert CipherVector.from_bytes(data) == cv


def test_ciphertext_parse_errors(key):
    data = scheme_core.enc_db(key, [1.0, 2.0]).to_bytes()
    with pytest.raises(StoreFormatError) as info:
        CipherVector.from_bytes(b'XXXX' + data[4:])
    assert info.value.offset == 0
    with pytest.raises(VersionMismatch):
        CipherVector.from_bytes(data[:4] + b'\x02' + data[5:])
    with pytest.raises(StoreFormatError) as info:
        CipherVector.from_bytes(data[:-3])
    assert info.value.offset == len(data) - 16
    with pytest.raises(StoreFormatError):
        CipherVector.from_bytes(data + b'\x00')


def test_cipher_vector_validation():
    with pytest.raises(InputError):
        CipherVector(np.zeros(3), b'short')
    with pytest.raises(InputError):
        CipherVector(np.zeros((2, 2)), bytes(16))
