"""Tests for the text-feature knowledge base, reasoning tokens and description providers."""

from __future__ import annotations

import numpy as np
import pytest

from thermotrack.model.crm import (
    KnowledgeBase,
    RetrievalResult,
    cross_attention,
    kb_feature,
    propagate_reasoning,
    refine_search,
    temporal_augment,
    temporal_gate,
)
from thermotrack.model.provider import (
    FrameRef,
    MockProvider,
    ProviderError,
    RemoteProvider,
    clip_words,
    encode_png,
    format_prompt,
    generate_description,
)
from thermotrack.numeric import DegenerateVectorError, Tape, Tensor, cosine_similarity
from thermotrack.params import ParameterStore
from thermotrack.selftest import reduced_config


@pytest.fixture(scope="module")
def cfg():
    return reduced_config()


@pytest.fixture(scope="module")
def store(cfg):
    return ParameterStore.initialize(cfg, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(21)


class TestKnowledgeBase:
    def test_empty_base_accepts_anything(self):
        kb = KnowledgeBase(capacity=2, threshold=1.0)
        decision = kb.insert(np.array([1.0, 2.0]))
        assert decision.inserted
        assert decision.max_similarity is None
        assert len(kb) == 1

    def test_duplicate_rejected_at_threshold_one(self, rng):
        kb = KnowledgeBase(capacity=4, threshold=1.0)
        v = rng.normal(size=6)
        kb.insert(v, frame=0)
        decision = kb.insert(v.copy(), frame=5)
        assert not decision.inserted
        assert decision.max_similarity == pytest.approx(1.0)
        assert len(kb) == 1

    def test_fifo_eviction(self):
        e1, e2, e3 = np.eye(3)
        kb = KnowledgeBase(capacity=2, threshold=1.0)
        kb.insert(e1, frame=0)
        kb.insert(e2, frame=1)
        decision = kb.insert(e3, frame=2)
        assert decision.inserted
        np.testing.assert_array_equal(decision.evicted.vector.data, e1)
        assert [e.inserted_at for e in kb.entries] == [1, 2]
        assert len(kb) == 2

    def test_similarity_just_below_threshold_inserts(self):
        kb = KnowledgeBase(capacity=4, threshold=0.8)
        kb.insert(np.array([1.0, 0.0]))
        below = np.array([0.8, 0.6 + 1e-9])
        assert cosine_similarity(below, [1.0, 0.0]) < 0.8
        assert kb.insert(below).inserted

    def test_self_similarity_is_exactly_one(self, rng):
        for _ in range(20):
            v = rng.normal(size=64) * rng.uniform(1e-3, 1e3)
            assert cosine_similarity(v, v) == 1.0

    def test_low_threshold_blocks_similar(self):
        kb = KnowledgeBase(capacity=4, threshold=0.5)
        kb.insert(np.array([1.0, 0.0]))
        assert not kb.insert(np.array([1.0, 0.1])).inserted
        assert kb.insert(np.array([0.0, 1.0])).inserted

    def test_zero_feature_rejected(self):
        with pytest.raises(DegenerateVectorError):
            KnowledgeBase().insert(np.zeros(3))

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            KnowledgeBase(capacity=0)

    def test_retrieve_exact_match_first(self, rng):
        kb = KnowledgeBase(capacity=8, threshold=1.0)
        vectors = rng.normal(size=(5, 4))
        for t, v in enumerate(vectors):
            kb.insert(v, frame=t)
        hits = kb.retrieve(vectors[3], k=2)
        assert len(hits) == 2
        assert hits.frames[0] == 3
        assert hits.similarities[0] == pytest.approx(1.0)
        assert hits.similarities[0] >= hits.similarities[1]

    def test_retrieve_more_than_stored(self, rng):
        kb = KnowledgeBase(capacity=8, threshold=1.0)
        for t in range(3):
            kb.insert(rng.normal(size=4), frame=t)
        assert sorted(kb.retrieve(rng.normal(size=4), k=10).frames) == [0, 1, 2]

    def test_retrieve_matches_exhaustive_scan(self, rng):
        kb = KnowledgeBase(capacity=8, threshold=1.0)
        vectors = rng.normal(size=(8, 5))
        for t, v in enumerate(vectors):
            kb.insert(v, frame=t)
        q = rng.normal(size=5)
        sims = vectors @ q / (np.linalg.norm(vectors, axis=1) * np.linalg.norm(q))
        assert kb.retrieve(q, k=2).frames == np.argsort(-sims)[:2].tolist()

    def test_ties_prefer_newer(self):
        kb = KnowledgeBase(capacity=4, threshold=2.0)
        v = np.array([1.0, 0.0])
        kb.insert(v, frame=0)
        kb.insert(2 * v, frame=1)
        assert kb.retrieve(v, k=1).frames == [1]

    def test_empty_retrieval(self):
        assert len(KnowledgeBase().retrieve(np.ones(3), k=2)) == 0

    def test_dump(self):
        kb = KnowledgeBase(capacity=2)
        kb.insert(np.array([1.0, 0.0]), frame=4)
        assert kb.dump() == [{"inserted_at_frame": 4, "vector": [1.0, 0.0]}]


class TestRefineSearch:
    def test_empty_retrieval_is_identity(self, store, rng):
        x = Tensor(rng.normal(size=(16, 8)))
        assert refine_search(x, RetrievalResult(), store, Tape(enabled=False)) is x

    def test_single_key_returns_value_projection(self, store, rng):
        x = rng.normal(size=(16, 8))
        v = rng.normal(size=8)
        hits = RetrievalResult(features=[Tensor(v)], similarities=np.ones(1), frames=[0])
        out = refine_search(x, hits, store, Tape(enabled=False)).data
        projected = v @ store["crm.refine.wv"].data
        np.testing.assert_allclose(out - x, np.tile(projected, (16, 1)), rtol=1e-12, atol=1e-14)

    def test_cross_attention_rows_mix_values(self, rng):
        c = 4
        eye = np.eye(c)
        keys = rng.normal(size=(3, c))
        out = cross_attention(rng.normal(size=(5, c)), keys, eye, eye, eye, Tape(enabled=False))
        lo, hi = keys.min(axis=0), keys.max(axis=0)
        assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)


class TestPropagateReasoning:
    def test_zero_guidance_gives_zero(self, cfg, store, rng):
        params = store.copy()
        for name in ("w1", "b1", "w2", "b2"):
            params[f"crm.guide.{name}"].data[...] = 0.0
        parts = [rng.normal(size=(k, 8)) for k in (1, 1, 4)]
        out = propagate_reasoning(*parts, params, cfg.encoder, Tape(enabled=False))
        np.testing.assert_array_equal(out.data, np.zeros((1, 8)))

    def test_text_free_matches_zero_text(self, cfg, store, rng):
        r, z = rng.normal(size=(1, 8)), rng.normal(size=(4, 8))
        tape = Tape(enabled=False)
        free = propagate_reasoning(r, None, z, store, cfg.encoder, tape)
        zero = propagate_reasoning(r, np.zeros((1, 8)), z, store, cfg.encoder, tape)
        np.testing.assert_array_equal(free.data, zero.data)

    def test_template_permutation_invariant(self, cfg, store, rng):
        r, h, z = (rng.normal(size=(k, 8)) for k in (1, 1, 4))
        tape = Tape(enabled=False)
        a = propagate_reasoning(r, h, z, store, cfg.encoder, tape)
        b = propagate_reasoning(r, h, z[::-1], store, cfg.encoder, tape)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-14)


class TestTemporalGate:
    def test_zero_preactivation_halves(self, rng):
        x = rng.normal(size=(6, 4))
        x_tilde, gate = temporal_gate(x, np.zeros((1, 4)), Tape(enabled=False))
        np.testing.assert_array_equal(gate, np.full(6, 0.5))
        np.testing.assert_array_equal(x_tilde.data, 0.5 * x)

    def test_saturation(self):
        x = np.ones((2, 4))
        x_tilde, gate = temporal_gate(x, np.full((1, 4), 1e3), Tape(enabled=False))
        np.testing.assert_allclose(gate, 1.0)
        np.testing.assert_allclose(x_tilde.data, x)

    def test_augment_shapes(self, store, rng):
        result = temporal_augment(
            rng.normal(size=(1, 8)), rng.normal(size=(16, 8)), store, Tape(enabled=False)
        )
        assert result.reasoning.shape == (1, 8)
        assert result.search.shape == (16, 8)
        assert np.all((result.gate > 0) & (result.gate < 1))

    def test_carries_propagated_token(self, store, rng):
        r_next = Tensor(rng.normal(size=(1, 8)))
        result = temporal_augment(r_next, rng.normal(size=(16, 8)), store, Tape(enabled=False))
        assert result.reasoning is r_next
        assert not np.array_equal(result.refined.data, r_next.data)

    def test_add_mode(self, store, rng):
        r_next, x_bar = rng.normal(size=(1, 8)), rng.normal(size=(16, 8))
        tape = Tape(enabled=False)
        result = temporal_augment(r_next, x_bar, store, tape, mode="add")
        np.testing.assert_allclose(result.search.data, x_bar + result.refined.data, rtol=1e-12)
        np.testing.assert_array_equal(result.gate, np.ones(16))

    def test_unknown_mode(self, store, rng):
        with pytest.raises(ValueError, match="temporal mode"):
            temporal_augment(np.ones((1, 8)), np.ones((4, 8)), store, Tape(), mode="mamba")


class TestKbFeature:
    def test_modalities_project_differently(self, cfg, store):
        tape = Tape(enabled=False)
        text = Tensor(np.random.default_rng(0).normal(size=(1, 8)))
        rgb = kb_feature(text, "rgb", store, tape)
        tir = kb_feature(text, "tir", store, tape)
        assert rgb.shape == tir.shape == (8,)
        assert not np.array_equal(rgb.data, tir.data)


class TestProviders:
    @pytest.fixture()
    def frame(self):
        return FrameRef(index=0, image=np.zeros((3, 32, 32)))

    def test_mock_answers_ground_truth(self, frame):
        provider = MockProvider(["a red square moving right"])
        result = generate_description(provider, frame, (4, 4, 8, 8))
        assert result.ok
        assert result.text == "a red square moving right"
        assert provider.calls == [0]

    def test_mock_is_deterministic(self, frame):
        provider = MockProvider(["a red square moving right"])
        a = generate_description(provider, frame, (4, 4, 8, 8))
        b = generate_description(provider, frame, (4, 4, 8, 8))
        assert a == b

    def test_failure_keeps_previous(self, frame):
        provider = MockProvider(["unused"], fail_on=[0])
        result = generate_description(provider, frame, (4, 4, 8, 8), previous="old text")
        assert not result.ok
        assert result.text == "old text"
        assert "frame 0" in result.error

    def test_box_outside_frame_rejected(self, frame):
        with pytest.raises(ValueError, match="not within"):
            generate_description(MockProvider(["x"]), frame, (30, 30, 8, 8))

    def test_long_answers_are_clipped(self, frame):
        words = " ".join(f"w{i}" for i in range(30))
        result = generate_description(MockProvider([words]), frame, (0, 0, 4, 4))
        assert len(result.text.split()) == 20
        assert clip_words("a  b   c", 2) == "a b"

    def test_prompt_carries_corners(self):
        prompt = format_prompt((10, 20, 5, 6))
        assert "(10, 20, 15, 26)" in prompt
        assert "20 words" in prompt

    def test_png_round_trip(self):
        import base64
        import io

        from PIL import Image

        image = np.zeros((3, 4, 5))
        image[0] = 1.0
        decoded = Image.open(io.BytesIO(base64.b64decode(encode_png(image))))
        assert decoded.size == (5, 4)
        assert np.asarray(decoded)[0, 0].tolist() == [255, 0, 0]

    def test_remote_failure_is_provider_error(self, frame):
        provider = RemoteProvider("http://127.0.0.1:9/describe", timeout=0.2)
        with pytest.raises(ProviderError):
            provider.describe(frame, (0, 0, 4, 4), "prompt")

    def test_remote_failure_keeps_previous(self, frame):
        provider = RemoteProvider("http://127.0.0.1:9/describe", timeout=0.2)
        result = generate_description(provider, frame, (0, 0, 4, 4), previous="kept")
        assert result.text == "kept"
        assert not result.ok
