import json
import logging

import numpy as np
import pytest

import eval_harness
import geometry_dp
import payload_crypto
import pipeline
from pipeline import ClientContext, Document
from utils import AuthenticityError, InputError, ParameterError, StoreFormatError
from vector_store import StoredRecord, StoreIndex

DIM = 32


@pytest.fixture
def embedder():
    return pipeline.HashEmbedder(DIM)


@pytest.fixture
def documents(embedder):
    texts = ['Passage %03d about encrypted retrieval and private prompts.' % i for i in range(100)]
    return [Document(i, t.encode(), embedder.embed(t)) for i, t in enumerate(texts)]


@pytest.fixture
def ctx(key_factory, payload_key, tmp_path):
    store = StoreIndex.open_or_create(str(tmp_path / 'client.pprg'), DIM)
    return ClientContext(key_factory(beta=1e-6), payload_key, store, DIM, k=5, seed=3)


class RecordingStore:
    """Store stub with a fixed size that records the k' it is asked for."""

    def __init__(self, count):
        self.count = count
        self.requests = []

    def topk_search(self, query, k_prime):
        self.requests.append((query, k_prime))
        return []


def byte_windows(data, width=8):
    return {data[i:i + width] for i in range(len(data) - width + 1)}


def test_upload_keeps_plaintext_off_the_store(ctx, documents):
    report = pipeline.phase1_upload(ctx, documents)
    assert report.ok
    assert report.count == ctx.store.count == 100
    assert report.bytes > 0

    stored = open(ctx.store.path, 'rb').read()
    for doc in documents:
        for window in byte_windows(doc.text):
            assert window not in stored
        unit = doc.embedding / np.linalg.norm(doc.embedding)
        assert unit.astype('<f4')[:2].tobytes() not in stored
        assert unit.astype('<f8')[:1].tobytes() not in stored


def test_upload_requires_documents(ctx):
    with pytest.raises(InputError):
        pipeline.phase1_upload(ctx, [])


def test_duplicate_upload_is_reported(ctx, documents):
    pipeline.phase1_upload(ctx, documents[:10])
    report = pipeline.phase1_upload(ctx, documents[5:15])
    assert sorted(report.rejected) == [5, 6, 7, 8, 9]
    assert report.count == 5
    assert ctx.store.count == 15


def test_wrong_dimension_is_reported_per_document(ctx, documents):
    odd = Document(500, b'short vector', np.ones(DIM - 1))
    report = pipeline.phase1_upload(ctx, documents[:3] + [odd])
    assert list(report.rejected) == [500]
    assert report.count == 3


def test_out_of_range_ids_are_reported_per_document(ctx, documents):
    negative = Document(-1, b'negative id', documents[0].embedding)
    huge = Document(2 ** 64, b'id past u64', documents[1].embedding)
    report = pipeline.phase1_upload(ctx, documents[2:5] + [negative, huge])
    assert sorted(report.rejected) == [-1, 2 ** 64]
    assert 'u64' in report.rejected[-1]
    assert report.count == 3
    assert ctx.store.count == 3


def test_seeded_sessions_never_reuse_nonces(key_factory, payload_key, embedder):
    key = key_factory()
    sealed = []
    for text in (b'first session  A', b'second session B'):
        store = StoreIndex(DIM)
        ctx = ClientContext(key, payload_key, store, DIM, seed=1)
        pipeline.phase1_upload(ctx, [Document(0, text, embedder.embed('same vector'))])
        sealed.append(store.get(0))
    first, second = sealed
    assert first.payload.nonce != second.payload.nonce
    assert first.embedding.r != second.embedding.r
    assert not np.array_equal(first.embedding.c, second.embedding.c)

    # the seed still fixes the query perturbation
    a = ClientContext(key, payload_key, StoreIndex(DIM), DIM, seed=1)
    b = ClientContext(key, payload_key, StoreIndex(DIM), DIM, seed=1)
    assert a.perturb_rng.random() == b.perturb_rng.random()


def test_documents_without_embeddings_use_the_embedder(ctx, embedder):
    report = pipeline.phase1_upload(ctx, [Document(1, b'no vector yet')], embedder=embedder)
    assert report.count == 1
    report = pipeline.phase1_upload(ctx, [Document(2, b'no embedder either')])
    assert report.count == 0
    assert 'no embedding' in report.rejected[2]


def test_zero_radius_matches_plaintext_oracle(ctx, documents, embedder):
    pipeline.phase1_upload(ctx, documents)
    for text in ('Passage 042 about encrypted retrieval and private prompts.', 'unrelated question'):
        query = embedder.embed(text)
        result = pipeline.phase2_query(ctx, query, k=5, radius=0.0, query_text=text)
        assert result.k_prime == 5
        assert result.ids == [rid for rid, _ in pipeline.plaintext_topk(documents, query, 5)]


def test_rerank_uses_the_unperturbed_query(ctx, documents, embedder):
    pipeline.phase1_upload(ctx, documents)
    query = embedder.embed('a question about prompts')
    result = pipeline.phase2_query(ctx, query, k=5, radius=0.3)
    unit = query / np.linalg.norm(query)
    by_id = {doc.id: doc for doc in documents}
    distances = [doc.distance for doc in result.documents]
    assert distances == sorted(distances)
    assert len(result.documents) == 5
    for doc in result.documents:
        expected = np.linalg.norm(by_id[doc.id].embedding / np.linalg.norm(by_id[doc.id].embedding) - unit)
        assert doc.distance == pytest.approx(expected, abs=1e-9)
        assert doc.text == by_id[doc.id].text


def test_rerank_picks_the_best_candidates(key_factory, payload_key, documents, embedder):
    store = StoreIndex(DIM)
    ctx = ClientContext(key_factory(beta=1e-6), payload_key, store, DIM, seed=1)
    pipeline.phase1_upload(ctx, documents)
    query = embedder.embed('candidate restriction')
    result = pipeline.phase2_query(ctx, query, k=3, radius=0.2)

    # the final top-k is the plaintext top-k of the candidate set the store returned
    replay = ClientContext(ctx.scheme_key, payload_key, store, DIM, seed=1)
    unit = query / np.linalg.norm(query)
    perturbed = geometry_dp.perturb_query(unit, geometry_dp.PerturbationParams(0.2), rng=replay.perturb_rng)
    plan = geometry_dp.plan_for_radius(3, 100, DIM, 0.2)
    hits = store.topk_search(pipeline.scheme_core.enc_q(ctx.scheme_key, perturbed), plan.k_prime)
    candidates = [doc for doc in documents if doc.id in {h.id for h in hits}]
    assert result.ids == [rid for rid, _ in pipeline.plaintext_topk(candidates, query, 3)]


def test_k_larger_than_store_is_clamped(ctx, documents, caplog):
    pipeline.phase1_upload(ctx, documents[:4])
    with caplog.at_level(logging.WARNING, logger='pipeline'):
        result = pipeline.phase2_query(ctx, documents[0].embedding, k=10)
    assert result.k == 4
    assert len(result.documents) == 4
    assert 'clamped' in caplog.text


def test_empty_store_returns_nothing(ctx, documents):
    result = pipeline.phase2_query(ctx, documents[0].embedding)
    assert result.documents == []


def test_query_validation(ctx, documents):
    pipeline.phase1_upload(ctx, documents[:4])
    with pytest.raises(ParameterError):
        pipeline.phase2_query(ctx, documents[0].embedding, k=0)
    with pytest.raises(ParameterError):
        pipeline.phase2_query(ctx, documents[0].embedding, radius=1.5)
    with pytest.raises(InputError):
        pipeline.phase2_query(ctx, np.ones(DIM + 1))


def test_k_prime_sent_to_the_store(key, payload_key):
    store = RecordingStore(100000)
    ctx = ClientContext(key, payload_key, store, 768, k=5, radius=0.033, seed=0)
    result = pipeline.phase2_query(ctx, np.ones(768))
    (query, k_prime), = store.requests
    assert k_prime == result.k_prime == geometry_dp.plan_for_radius(5, 100000, 768, 0.033).k_prime
    published = eval_harness.PUBLISHED_KPRIME[(768, 0.033, 5)]
    assert published / 2.2 <= k_prime <= 2 * published
    assert query.dim == 768


def test_tampered_payload_names_the_record(ctx, documents):
    pipeline.phase1_upload(ctx, documents[:2])
    first, second = ctx.store.records
    swapped = StoreIndex(DIM)
    swapped.ingest([StoredRecord(first.id, first.embedding, second.payload), second])
    bad = ClientContext(ctx.scheme_key, ctx.payload_key, swapped, DIM, k=2)
    with pytest.raises(AuthenticityError) as info:
        pipeline.phase2_query(bad, documents[0].embedding)
    assert info.value.details['record_id'] == first.id
    assert str(first.id) in info.value.message


def test_wrong_payload_key_fails_authentication(ctx, documents):
    pipeline.phase1_upload(ctx, documents[:3])
    other = ClientContext(ctx.scheme_key, payload_crypto.payload_keygen(), ctx.store, DIM, k=1)
    with pytest.raises(AuthenticityError):
        pipeline.phase2_query(other, documents[0].embedding)


def test_prompt_without_context():
    prompt = pipeline.phase3_prompt('What is beta?', [])
    assert prompt == 'Question: What is beta?\n' + pipeline.PROMPT_SEPARATOR + '\n' + pipeline.EMPTY_CONTEXT_NOTICE + '\n'


def test_prompt_with_context_is_deterministic():
    prompt = pipeline.phase3_prompt('What is beta?', [b'Beta is the margin.', 'Second passage'])
    assert 'What is beta?' in prompt
    assert '[1] Beta is the margin.' in prompt
    assert '[2] Second passage' in prompt
    assert pipeline.EMPTY_CONTEXT_NOTICE not in prompt
    assert prompt == pipeline.phase3_prompt('What is beta?', [b'Beta is the margin.', 'Second passage'])


def test_answer_with_echo_generator(ctx, documents, embedder):
    pipeline.phase1_upload(ctx, documents)
    text = 'Passage 007 about encrypted retrieval and private prompts.'
    result, prompt, output = pipeline.answer(ctx, text, embedder, k=2)
    assert output == prompt
    assert result.ids[0] == 7
    assert text in prompt


def test_hash_embedder():
    embedder = pipeline.HashEmbedder(16)
    a, b = embedder.embed('hello'), embedder.embed(b'hello')
    assert a.tobytes() == b.tobytes()
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.allclose(a, embedder.embed('hello!'))


def test_file_embedder(documents):
    embedder = pipeline.FileEmbedder.from_documents(documents)
    assert embedder.dim == DIM
    assert np.array_equal(embedder.embed(documents[3].text.decode()), documents[3].embedding)
    with pytest.raises(InputError):
        embedder.embed('never seen')


def test_load_jsonl(tmp_path, embedder):
    path = tmp_path / 'docs.jsonl'
    path.write_text(json.dumps({'id': 1, 'text': 'with vector', 'embedding': [0.5] * DIM}) + '\n\n'
                    + json.dumps({'id': 2, 'text': 'without vector'}) + '\n')
    docs = pipeline.load_documents(str(path), embedder=embedder)
    assert [d.id for d in docs] == [1, 2]
    assert np.allclose(docs[0].embedding, 0.5)
    assert np.array_equal(docs[1].embedding, embedder.embed('without vector'))


def test_load_jsonl_reports_bad_line(tmp_path):
    path = tmp_path / 'docs.jsonl'
    path.write_text('{"id": 1, "text": "fine", "embedding": [1.0]}\n{"text": "no id"}\n')
    with pytest.raises(InputError) as info:
        pipeline.load_documents(str(path))
    assert info.value.details['line'] == 2


def test_binary_documents_round_trip(tmp_path, documents):
    vectors, texts = str(tmp_path / 'docs.bin'), str(tmp_path / 'docs.txt')
    pipeline.write_documents_bin(documents[:10], vectors, texts)
    loaded = pipeline.load_documents(vectors, 'bin', texts_path=texts)
    assert [d.id for d in loaded] == list(range(10))
    assert [d.text for d in loaded] == [d.text for d in documents[:10]]
    assert np.allclose(loaded[4].embedding, documents[4].embedding, atol=1e-6)
    with pytest.raises(InputError):
        pipeline.load_documents(vectors, 'bin')
    with open(vectors, 'r+b') as f:
        f.truncate(20)
    with pytest.raises(StoreFormatError):
        pipeline.load_documents(vectors, 'bin', texts_path=texts)


def test_client_context_validation(key, payload_key):
    with pytest.raises(ParameterError):
        ClientContext(key, None, StoreIndex(4), 4)
    with pytest.raises(ParameterError):
        ClientContext(key, payload_key, StoreIndex(4), 4, radius=1.0)


def test_recall_on_uniform_sphere_data():
    report = eval_harness.run_recall(n=64, m=2000, k=10, radius=0.02, queries=100, seed=4)
    assert report.recall >= 0.95
    assert report.k_prime >= 10


@pytest.mark.slow
def test_recall_at_acceptance_scale():
    report = eval_harness.run_recall(n=64, m=10000, k=10, radius=0.02, queries=1000, seed=8)
    assert report.recall >= 0.95
