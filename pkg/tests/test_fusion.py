"""Tests for token selection, channel exchange and modality fusion."""

from __future__ import annotations

import numpy as np
import pytest

from thermotrack.model.fusion import (
    STEP_ORDER,
    ExchangePlan,
    channel_relevance,
    exchange_channels,
    fuse_modalities,
    plan_exchange,
    prune_search,
    retained_count,
    score_search_tokens,
    select_tokens,
    template_center,
)
from thermotrack.numeric import Tape, Tensor
from thermotrack.params import ParameterStore
from thermotrack.selftest import reduced_config, selection_oracle

BOUNDARIES = (0, 1, 2, 18, 82)


@pytest.fixture()
def rng():
    return np.random.default_rng(11)


class TestScoreSearchTokens:
    def test_uniform_attention(self):
        attn = np.full((82, 82), 1.0 / 82)
        scores = score_search_tokens(attn, BOUNDARIES)
        assert len(scores) == 64
        np.testing.assert_allclose(scores.reasoning, 1 / 82)
        np.testing.assert_allclose(scores.text, 1 / 82)
        np.testing.assert_allclose(scores.template, 4 / 82)
        np.testing.assert_allclose(scores.search, 64 / 82)
        np.testing.assert_allclose(scores.total, 70 / 82)

    def test_delta_row_on_reasoning(self):
        attn = np.full((82, 82), 1.0 / 82)
        attn[18] = 0.0
        attn[18, 0] = 1.0
        scores = score_search_tokens(attn, BOUNDARIES)
        assert scores.reasoning[0] == 1.0
        assert scores.text[0] == scores.template[0] == scores.search[0] == 0.0
        assert scores.total[0] == 1.0

    def test_terms_subset(self):
        attn = np.full((82, 82), 1.0 / 82)
        scores = score_search_tokens(attn, BOUNDARIES, terms=("search",))
        np.testing.assert_allclose(scores.total, 64 / 82)

    def test_bad_boundaries(self):
        with pytest.raises(ValueError, match="partition"):
            score_search_tokens(np.eye(10), BOUNDARIES)

    def test_template_center_is_middle_block(self):
        assert template_center(4).tolist() == [5, 6, 9, 10]
        assert template_center(2).tolist() == [0]
        assert template_center(3).tolist() == [0, 1, 3, 4]


class TestSelectTokens:
    def test_keep_all(self):
        assert select_tokens(np.array([0.3, 0.1, 0.2]), 1.0).kept_indices.tolist() == [0, 1, 2]

    def test_hand_example(self):
        kept = select_tokens(np.array([3.0, 1.0, 2.0, 5.0]), 0.5).kept_indices
        assert kept.tolist() == [0, 3]

    def test_ties_keep_lowest_indices(self):
        assert select_tokens(np.ones(7), 0.5).kept_indices.tolist() == [0, 1, 2, 3]

    def test_retained_count_has_no_float_overshoot(self):
        assert retained_count(10, 0.7) == 7
        assert retained_count(64, 0.85) == 55

    @pytest.mark.parametrize("gamma", [0.0, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError):
            select_tokens(np.ones(4), gamma)

    def test_matches_sort_oracle(self, rng):
        for _ in range(50):
            scores = rng.integers(0, 5, size=int(rng.integers(4, 40))).astype(float)
            gamma = float(rng.uniform(0.05, 1.0))
            got = set(select_tokens(scores, gamma).kept_indices.tolist())
            assert got == selection_oracle(scores, gamma)

    def test_prune_freezes_dropped_tokens(self, rng):
        from thermotrack.model.encoder import build_sequence

        tape = Tape(enabled=False)
        parts = [Tensor(rng.normal(size=(k, 3))) for k in (1, 1, 4, 6)]
        seq = build_sequence(*parts, tape)
        pruned = prune_search(seq, np.array([1, 4]), tape)
        assert pruned.boundaries == (0, 1, 2, 6, 8)
        assert pruned.search_index.tolist() == [1, 4]
        np.testing.assert_array_equal(pruned.frozen[[0, 2, 3, 5]], parts[3].data[[0, 2, 3, 5]])
        np.testing.assert_array_equal(pruned.frozen[[1, 4]], 0.0)

        again = prune_search(pruned, np.array([1]), tape)
        assert again.search_index.tolist() == [4]
        np.testing.assert_array_equal(again.frozen[1], parts[3].data[1])


class TestChannelRelevance:
    def test_zero_projections(self, rng):
        f = rng.normal(size=(6, 4))
        s = channel_relevance(f, f, np.zeros((4, 4)), np.zeros((4, 4)))
        np.testing.assert_array_equal(s.data, np.zeros((4, 4)))

    def test_orthonormal_columns_give_identity(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
        s = channel_relevance(q, q, np.eye(4), np.eye(4))
        np.testing.assert_allclose(s.data, np.eye(4), atol=1e-12)

    def test_token_count_mismatch(self):
        from thermotrack.numeric import DimensionError

        with pytest.raises(DimensionError):
            channel_relevance(np.ones((3, 2)), np.ones((4, 2)), np.eye(2), np.eye(2))


class TestPlanExchange:
    def test_hand_example(self):
        means = np.array([0.1, 0.9, 0.5, 0.5])
        plan = plan_exchange(np.tile(means[:, None], (1, 4)), 0.5)
        assert plan.channel_indices.tolist() == [1, 2]

    def test_sigma_bounds(self, rng):
        s = rng.normal(size=(5, 5))
        assert plan_exchange(s, 0.0).channel_indices.tolist() == []
        assert plan_exchange(s, 1.0).channel_indices.tolist() == [0, 1, 2, 3, 4]

    def test_half_rounds_up(self):
        assert len(plan_exchange(np.eye(5), 0.5).channel_indices) == 3


class TestExchangeChannels:
    def test_empty_plan(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x, y = exchange_channels(a, b, ExchangePlan(np.array([], dtype=int), 0.0))
        np.testing.assert_array_equal(x.data, a)
        np.testing.assert_array_equal(y.data, b)

    def test_involution(self, rng):
        a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        plan = ExchangePlan(np.array([0, 2, 5]), 0.5)
        x, y = exchange_channels(*exchange_channels(a, b, plan), plan)
        np.testing.assert_array_equal(x.data, a)
        np.testing.assert_array_equal(y.data, b)

    def test_full_swap(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x, y = exchange_channels(a, b, ExchangePlan(np.arange(4), 1.0))
        np.testing.assert_array_equal(x.data, b)
        np.testing.assert_array_equal(y.data, a)

    def test_preserves_channel_multiset(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x, y = exchange_channels(a, b, ExchangePlan(np.array([1]), 0.25))
        before = np.sort(np.concatenate([a, b], axis=0), axis=0)
        after = np.sort(np.concatenate([x.data, y.data], axis=0), axis=0)
        np.testing.assert_array_equal(before, after)

    def test_out_of_range_plan(self, rng):
        a = rng.normal(size=(2, 3))
        with pytest.raises(ValueError, match="distinct channels"):
            exchange_channels(a, a, ExchangePlan(np.array([3]), 0.5))


class TestFuseModalities:
    @pytest.fixture(scope="class")
    def store(self):
        return ParameterStore.initialize(reduced_config(), seed=5)

    def test_zero_mlp_is_identity(self, store, rng):
        params = store.copy()
        for name in ("w1", "b1", "w2", "b2"):
            params[f"fusion.layer1.mlp.{name}"].data[...] = 0.0
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        x, y = fuse_modalities(a, b, params, 1, Tape(enabled=False))
        np.testing.assert_array_equal(x.data, a)
        np.testing.assert_array_equal(y.data, b)

    def test_swap_equivariance(self, store, rng):
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        tape = Tape(enabled=False)
        x, y = fuse_modalities(a, b, store, 1, tape)
        y2, x2 = fuse_modalities(b, a, store, 1, tape)
        np.testing.assert_allclose(x.data, x2.data, rtol=1e-12)
        np.testing.assert_allclose(y.data, y2.data, rtol=1e-12)


class TestAdaptiveFusion:
    def test_step_order(self):
        assert STEP_ORDER == ("selection", "relevance", "exchange", "fuse")

    def test_desk_defaults_keep_55_search_tokens(self):
        from thermotrack.config import TrackerConfig
        from thermotrack.model.network import FrameInputs, TrackerNet

        cfg = TrackerConfig().validate()
        net = TrackerNet(ParameterStore.initialize(cfg), cfg)
        rng = np.random.default_rng(0)
        inputs = FrameInputs(
            template_rgb=rng.random((3, 32, 32)),
            template_tir=rng.random((3, 32, 32)),
            search_rgb=rng.random((3, 64, 64)),
            search_tir=rng.random((3, 64, 64)),
        )
        tape = Tape(enabled=False)
        text = net.encode_text("a red square", tape)
        result = net.forward(inputs, text, net.initial_reasoning(), tape)
        assert result.tokens_kept == 55
        assert [r.layer for r in result.fusion] == [2, 4, 6, 8]
        assert all(r.kept == 55 for r in result.fusion)
        assert all(len(r.exchanged) == 32 for r in result.fusion)
        assert result.maps.I.shape == (8, 8)

    def test_selection_only_at_first_fusion_layer(self):
        from thermotrack.model.network import FrameInputs, TrackerNet

        cfg = reduced_config(gamma=0.5)
        net = TrackerNet(ParameterStore.initialize(cfg, seed=1), cfg)
        rng = np.random.default_rng(1)
        inputs = FrameInputs(*(rng.random((3, e, e)) for e in (8, 8, 16, 16)))
        tape = Tape(enabled=False)
        result = net.forward(inputs, net.encode_text("", tape), net.initial_reasoning(), tape)
        assert [(r.layer, r.kept) for r in result.fusion] == [(1, 8), (2, 8)]
        assert result.maps.I.shape == (4, 4)
