import numpy as np
import pytest

from corpustune.embedding import (
    ExternalEmbedder,
    ReferenceEmbedder,
    distance,
    featurize,
    tokenize,
)
from corpustune.errors import (
    DegenerateEmbeddingError,
    PreconditionError,
    TransportError,
    UnembeddableTextError,
)


def random_texts(rng, n, vocab_size=500, words=8):
    vocab = [f"w{i}" for i in range(vocab_size)]
    return [" ".join(vocab[rng.integers(vocab_size)] for _ in range(words))
            for _ in range(n)]


class TestFeaturize:
    def test_repeated_token_structure(self):
        idx, vals = featurize("alpha alpha", hash_dim=2 ** 15, seed=0)
        # unigram "alpha" (count 2) and the bigram "alpha alpha" (count 1)
        assert len(idx) == 2
        assert np.linalg.norm(vals) == pytest.approx(1.0, abs=1e-6)
        assert sorted(abs(v) for v in vals) == pytest.approx(
            [1 / np.sqrt(5), 2 / np.sqrt(5)], abs=1e-6)

    def test_identical_texts_identical_features(self):
        a = featurize("the quick brown fox", 2 ** 12, seed=3)
        b = featurize("the quick brown fox", 2 ** 12, seed=3)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_seed_changes_hashing(self):
        a = featurize("the quick brown fox", 2 ** 12, seed=3)
        b = featurize("the quick brown fox", 2 ** 12, seed=4)
        assert not np.array_equal(a[0], b[0])

    def test_empty_text_is_unembeddable(self):
        for text in ("", "   ", "\t\n"):
            with pytest.raises(UnembeddableTextError):
                featurize(text, 2 ** 10, seed=0)

    def test_lowercasing_and_whitespace_normalization(self):
        a = featurize("Hello   World", 2 ** 12, seed=0)
        b = featurize("hello world", 2 ** 12, seed=0)
        assert np.array_equal(a[0], b[0])

    def test_collision_rate_below_15_percent(self):
        hash_dim = 2 ** 15
        words = [f"vocabword{i}" for i in range(10_000)]
        buckets = set()
        for w in words:
            idx, _ = featurize(w, hash_dim, seed=0)
            buckets.add(int(idx[0]))
        collision_rate = 1.0 - len(buckets) / len(words)
        assert collision_rate < 0.15

    def test_tokenize_keeps_hyphenated_runs(self):
        assert tokenize("Top-Class00-T3, really?") == ["top-class00-t3", "really"]


class TestReferenceEmbedder:
    def test_embed_is_bit_reproducible(self):
        m = ReferenceEmbedder.initialize(seed=5, hash_dim=2 ** 12, out_dim=32)
        a = m.embed("growth of revenue this quarter")
        b = m.embed("growth of revenue this quarter")
        assert a.tobytes() == b.tobytes()

    def test_unit_norm_on_1000_random_texts(self):
        rng = np.random.default_rng(0)
        m = ReferenceEmbedder.initialize(seed=1, hash_dim=2 ** 12, out_dim=24)
        vecs = m.embed_many(random_texts(rng, 1000))
        norms = np.linalg.norm(vecs, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-6)
        assert vecs.dtype == np.float32

    def test_identity_projection_reproduces_features(self):
        dim = 64
        m = ReferenceEmbedder(tag="ident", weights=np.eye(dim, dtype=np.float32),
                              seed=9)
        text = "quarterly filing details"
        idx, vals = featurize(text, dim, seed=9)
        dense = np.zeros(dim, dtype=np.float32)
        dense[idx] = vals
        assert m.embed(text) == pytest.approx(dense, abs=1e-6)

    def test_zero_projection_is_degenerate(self):
        m = ReferenceEmbedder(tag="z", weights=np.zeros((8, 64), dtype=np.float32),
                              seed=0)
        with pytest.raises(DegenerateEmbeddingError):
            m.embed("anything at all here")

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        m = ReferenceEmbedder.initialize(tag="bi-enc(3)", seed=11,
                                         hash_dim=2 ** 10, out_dim=16)
        path = tmp_path / "model.ckpt"
        m.save(path)
        loaded = ReferenceEmbedder.load(path)
        assert loaded.tag == "bi-enc(3)"
        assert loaded.seed == 11
        assert loaded.weights.tobytes() == m.weights.tobytes()
        text = "same text embeds the same"
        assert loaded.embed(text).tobytes() == m.embed(text).tobytes()

    def test_with_weights_shares_feature_space(self):
        m = ReferenceEmbedder.initialize(seed=2, hash_dim=2 ** 10, out_dim=16)
        m2 = m.with_weights(m.weights * 2.0, tag="scaled")
        # scaling the projection does not change the normalized embedding
        t = "scale invariance of normalization"
        assert m.embed(t) == pytest.approx(m2.embed(t), abs=1e-6)


class TestDistance:
    def test_self_distance_zero(self):
        u = np.array([1.0, 0.0, 0.0], dtype=np.float32)
        assert distance(u, u) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_is_one(self):
        u = np.array([1.0, 0.0], dtype=np.float32)
        v = np.array([0.0, 1.0], dtype=np.float32)
        assert distance(u, v) == pytest.approx(1.0)

    def test_antipodal_is_two(self):
        u = np.array([0.6, 0.8], dtype=np.float32)
        assert distance(u, -u) == pytest.approx(2.0, abs=1e-6)

    def test_dim_mismatch_raises(self):
        with pytest.raises(PreconditionError):
            distance(np.zeros(3), np.zeros(4))

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            u = rng.normal(size=16)
            u /= np.linalg.norm(u)
            v = rng.normal(size=16)
            v /= np.linalg.norm(v)
            d_uv, d_vu = distance(u, v), distance(v, u)
            assert d_uv == pytest.approx(d_vu, abs=1e-12)
            assert -1e-9 <= d_uv <= 2.0 + 1e-9

    def test_cosine_and_euclidean_rankings_agree_on_unit_vectors(self):
        rng = np.random.default_rng(8)
        q = rng.normal(size=12)
        q /= np.linalg.norm(q)
        others = [rng.normal(size=12) for _ in range(20)]
        others = [v / np.linalg.norm(v) for v in others]
        by_cosine = sorted(range(20), key=lambda i: distance(q, others[i]))
        by_euclid = sorted(range(20), key=lambda i: np.linalg.norm(q - others[i]))
        assert by_cosine == by_euclid


class TestExternalEmbedder:
    def test_wire_contract_and_renormalization(self, stub_server):
        def embed_route(body):
            assert body["model"] == "remote-x"
            # deliberately unnormalized vectors
            return {"vectors": [[float(len(t)), 2.0, 0.0] for t in body["texts"]]}

        stub_server.routes["/v1/embed"] = embed_route
        client = ExternalEmbedder(tag="bi-enc(0)", endpoint=stub_server.url,
                                  model_name="remote-x", batch_size=2)
        vecs = client.embed_many(["abc", "defgh", "ij", "k", "lmnop"])
        assert vecs.shape == (5, 3)
        assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
        # batching is transparent: 5 texts at batch_size 2 -> 3 requests
        assert len([r for r in stub_server.requests if r[0] == "/v1/embed"]) == 3
        assert client.dim == 3

    def test_retries_then_succeeds(self, stub_server):
        stub_server.routes["/v1/embed"] = lambda body: {
            "vectors": [[1.0, 0.0] for _ in body["texts"]]}
        stub_server.fail_next["/v1/embed"] = 2
        client = ExternalEmbedder(tag="t", endpoint=stub_server.url,
                                  model_name="m", retries=3, backoff_s=0.01)
        vecs = client.embed_many(["hello"])
        assert vecs.shape == (1, 2)

    def test_transport_error_after_retry_budget(self, stub_server):
        stub_server.routes["/v1/embed"] = lambda body: {"vectors": []}
        stub_server.fail_next["/v1/embed"] = 99
        client = ExternalEmbedder(tag="t", endpoint=stub_server.url,
                                  model_name="m", retries=1, backoff_s=0.01)
        with pytest.raises(TransportError):
            client.embed_many(["hello"])

    def test_zero_vector_from_endpoint_is_degenerate(self, stub_server):
        stub_server.routes["/v1/embed"] = lambda body: {
            "vectors": [[0.0, 0.0] for _ in body["texts"]]}
        client = ExternalEmbedder(tag="t", endpoint=stub_server.url, model_name="m")
        with pytest.raises(DegenerateEmbeddingError):
            client.embed_many(["hello"])

    def test_empty_text_rejected_before_any_request(self, stub_server):
        client = ExternalEmbedder(tag="t", endpoint=stub_server.url, model_name="m")
        with pytest.raises(UnembeddableTextError):
            client.embed_many([" "])
        assert stub_server.requests == []
