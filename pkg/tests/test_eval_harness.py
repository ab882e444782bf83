import csv
import json

import numpy as np
import pytest

import eval_harness
from utils import ParameterError


def test_random_unit_vectors(rng):
    X = eval_harness.random_unit_vectors(rng, 50, 7)
    assert X.shape == (50, 7)
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0)


def test_experiment_key_is_seeded():
    a = eval_harness.experiment_key(np.random.default_rng(3), 0.2)
    b = eval_harness.experiment_key(np.random.default_rng(3), 0.2)
    assert a == b
    assert 2.0 ** 20 <= a.s <= 2.0 ** 30


def test_plaintext_attack_recovers_everything():
    report = eval_harness.run_asr(16, 500, 5, 40, scheme='plaintext', seed=1)
    assert report.asr_plain == 1.0
    assert report.asr_caprise is None


def test_asr_needs_more_vectors_than_neighbours():
    with pytest.raises(ParameterError):
        eval_harness.run_asr(16, 10, 10, 5, seed=0)
    with pytest.raises(ParameterError):
        eval_harness.run_asr(16, 100, 5, 5, scheme='rot13', seed=0)


def test_caprise_leaks_less_than_adcpe():
    report = eval_harness.run_asr(32, 2000, 10, 300, scheme=('caprise', 'adcpe'), seed=11)
    assert report.asr_caprise < report.asr_adcpe < 1.0


def test_asr_falls_as_beta_grows():
    rates = [eval_harness.run_asr(32, 1000, 10, 200, scheme='caprise', beta=beta, seed=5).asr_caprise
             for beta in (0.05, 0.2, 0.8)]
    assert all(later <= earlier + 0.02 for earlier, later in zip(rates, rates[1:]))
    assert rates[-1] < rates[0]


def test_parallel_asr_matches_serial():
    serial = eval_harness.run_asr(16, 800, 5, 100, scheme='caprise', seed=2)
    parallel = eval_harness.run_asr(16, 800, 5, 100, scheme='caprise', seed=2, workers=4, chunk=16)
    assert parallel.asr_caprise == serial.asr_caprise


@pytest.mark.slow
@pytest.mark.parametrize('dim', [32, 128, 768])
def test_asr_ordering_at_scale(dim):
    report = eval_harness.run_asr(dim, 10000, 10, 200, seed=dim)
    assert report.asr_plain == 1.0
    assert report.asr_caprise < report.asr_adcpe


def test_flips_happen_just_above_beta():
    report = eval_harness.run_flip_rate(margin_factor=1.01, trials=20000, seed=0)
    assert report.flips >= 10
    assert report.pairing == 'db'


@pytest.mark.slow
def test_flips_at_full_scale():
    report = eval_harness.run_flip_rate(dim=2, margin_factor=1.01, trials=100000, seed=0)
    assert report.trials == 100000
    assert report.flips >= 10
    assert report.rate > 0


def test_flips_become_rarer_with_margin():
    near = eval_harness.run_flip_rate(margin_factor=1.01, trials=20000, seed=1)
    far = eval_harness.run_flip_rate(margin_factor=1.3, trials=20000, seed=1)
    assert near.rate > far.rate


def test_no_flips_at_wide_margin():
    assert eval_harness.run_flip_rate(margin_factor=1.6, trials=20000, seed=2).flips == 0


def test_query_pairing_never_flips():
    assert eval_harness.run_flip_rate(margin_factor=1.01, trials=20000, seed=3, pairing='query').flips == 0


def test_flip_rate_validation():
    with pytest.raises(ParameterError):
        eval_harness.run_flip_rate(margin_factor=1.0)
    with pytest.raises(ParameterError):
        eval_harness.run_flip_rate(pairing='adcpe')


def test_seeded_experiments_repeat():
    assert eval_harness.run_flip_rate(trials=2000, seed=9) == eval_harness.run_flip_rate(trials=2000, seed=9)
    assert eval_harness.run_asr(16, 300, 5, 30, seed=9) == eval_harness.run_asr(16, 300, 5, 30, seed=9)
    recall = [eval_harness.run_recall(n=8, m=200, k=3, radius=0.1, queries=10, seed=9) for _ in range(2)]
    assert recall[0] == recall[1]


def test_throughput_report_shape():
    reports = eval_harness.run_throughput(dims=(16, 32), batch=50, repeats=1, seed=0)
    assert [r.dim for r in reports] == [16, 32]
    for report in reports:
        assert report.repeats == 5
        assert report.enc_db_per_s > 0 and report.enc_q_per_s > 0 and report.dec_db_per_s > 0
        assert report.enc_db_elements_per_s == report.enc_db_per_s * report.dim


@pytest.mark.bench
def test_throughput_at_768():
    report, = eval_harness.run_throughput(dims=(768,), batch=1000, seed=0)
    assert report.enc_db_per_s >= 1000
    assert report.dec_db_per_s >= report.enc_db_per_s / 2


def test_kprime_table():
    rows = eval_harness.run_kprime_table()
    assert len(rows) == 16
    for row in rows:
        assert row['k_prime'] >= row['k']
        assert row['published_k_prime'] == eval_harness.PUBLISHED_KPRIME[(row['n'], row['r'], row['k'])]


def test_kprime_table_zero_radius():
    rows = eval_harness.run_kprime_table(ns=(768,), rs=(0.0,))
    assert [row['k_prime'] for row in rows] == [5, 10, 15, 20]
    assert all(row['published_k_prime'] == '' for row in rows)


def test_kprime_table_tangent_mapping_is_wider():
    chord = eval_harness.run_kprime_table(ns=(768,), rs=(0.033,), ks=(5,))[0]
    tangent = eval_harness.run_kprime_table(ns=(768,), rs=(0.033,), ks=(5,), mapping='tangent')[0]
    assert tangent['delta_alpha'] > chord['delta_alpha']
    assert tangent['k_prime'] >= chord['k_prime']


def test_recall_report():
    report = eval_harness.run_recall(n=16, m=500, k=5, radius=0.0, queries=20, beta=1e-6, seed=6)
    assert report.recall == 1.0
    assert report.worst_query == 1.0
    assert report.k_prime == 5
    assert len(report.per_query) == 20


def test_csv_and_manifest(tmp_path):
    reports = [eval_harness.run_flip_rate(trials=500, seed=s) for s in (0, 1)]
    rows = eval_harness.report_rows(reports)
    assert 'rate' in rows[0]
    path = eval_harness.write_csv(rows, str(tmp_path / 'flips.csv'))
    with open(path, newline='') as f:
        read = list(csv.DictReader(f))
    assert [int(r['trials']) for r in read] == [500, 500]
    assert float(read[0]['rate']) == pytest.approx(reports[0].rate)

    manifest = str(tmp_path / 'runs.jsonl')
    eval_harness.append_manifest(manifest, {'experiment': 'flip', 'seed': 0})
    eval_harness.append_manifest(manifest, {'experiment': 'flip', 'seed': 1})
    lines = [json.loads(line) for line in open(manifest)]
    assert [line['seed'] for line in lines] == [0, 1]
    assert all('timestamp' in line for line in lines)


def test_write_csv_rejects_empty(tmp_path):
    with pytest.raises(ParameterError):
        eval_harness.write_csv([], str(tmp_path / 'empty.csv'))


@pytest.mark.bench
def test_throughput_per_element_holds_up_with_dimension():
    small, large = eval_harness.run_throughput(dims=(192, 1536), batch=500, seed=0)
    assert large.enc_db_elements_per_s >= small.enc_db_elements_per_s / 2
