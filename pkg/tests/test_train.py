"""Tests for sample building, AdamW and the training loop."""

from __future__ import annotations

import numpy as np
import pytest

from thermotrack.config import TrackerConfig
from thermotrack.harness.synthetic import TargetSpec, gen_sequence
from thermotrack.harness.tracker import run_tracker
from thermotrack.harness.train import AdamW, build_sample, sample_loss, train
from thermotrack.io.runlog import read_jsonl
from thermotrack.model.network import TrackerNet
from thermotrack.numeric import Tape
from thermotrack.params import ParameterStore
from thermotrack.selftest import reduced_config


@pytest.fixture(scope="module")
def cfg():
    return reduced_config()


@pytest.fixture(scope="module")
def dataset():
    return [gen_sequence(TargetSpec(size=8, speed=1.0), length=6, edge=32, seed=s) for s in (0, 1)]


class TestAdamW:
    def test_first_step(self):
        store = ParameterStore({"w": np.array([1.0, -2.0]), "frozen": np.array([3.0])})
        store["w"].grad = np.array([0.5, -4.0])
        lr, wd, eps = 0.1, 0.01, 1e-8
        AdamW(store, lr=lr, weight_decay=wd, eps=eps).step()
        want = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * np.array([0.5, -4.0]) / (
            np.array([0.5, 4.0]) + eps
        )
        np.testing.assert_allclose(store["w"].data, want, rtol=1e-12)
        assert store["frozen"].data.tolist() == [3.0]

    def test_zero_grad(self):
        store = ParameterStore({"w": np.ones(2)})
        store["w"].grad = np.ones(2)
        AdamW(store).zero_grad()
        assert store["w"].grad is None


class TestBuildSample:
    def test_shapes_and_target(self, dataset, cfg):
        sample = build_sample(dataset[0], np.random.default_rng(0), cfg, augment=False)
        enc = cfg.encoder
        assert sample.inputs.template_rgb.shape == (3, enc.template_edge, enc.template_edge)
        assert sample.inputs.search_tir.shape == (3, enc.search_edge, enc.search_edge)
        assert 0 <= sample.target.x <= enc.grid
        assert 0 < sample.target.w <= 1
        t0, t1 = sample.frames
        assert sample.description == dataset[0].descriptions[t0]
        assert abs(t1 - t0) <= cfg.augment.max_frame_gap

    def test_seeded(self, dataset, cfg):
        a = build_sample(dataset[1], np.random.default_rng(4), cfg)
        b = build_sample(dataset[1], np.random.default_rng(4), cfg)
        np.testing.assert_array_equal(a.inputs.search_rgb, b.inputs.search_rgb)
        assert a.target == b.target

    def test_loss_is_finite(self, dataset, cfg):
        net = TrackerNet(ParameterStore.initialize(cfg, seed=0), cfg)
        sample = build_sample(dataset[0], np.random.default_rng(0), cfg)
        loss = sample_loss(net, sample, Tape())
        assert np.isfinite(loss.total.item())
        assert loss.cls > 0


class TestTrain:
    def test_zero_steps_leaves_params(self, dataset, cfg):
        start = ParameterStore.initialize(cfg, seed=9)
        result = train(dataset, cfg, steps=0, params=start)
        assert result.losses == []
        assert np.isnan(result.initial_loss)
        for name, value in start.snapshot().items():
            np.testing.assert_array_equal(result.params[name].data, value)

    def test_does_not_mutate_starting_params(self, dataset, cfg):
        start = ParameterStore.initialize(cfg, seed=9)
        before = start.snapshot()
        train(dataset, cfg, steps=1, params=start)
        for name, value in before.items():
            np.testing.assert_array_equal(start[name].data, value)

    def test_deterministic(self, dataset, cfg):
        a = train(dataset, cfg, steps=2)
        b = train(dataset, cfg, steps=2)
        assert a.losses == b.losses
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_batch_records(self, dataset, cfg):
        result = train(dataset, cfg, steps=2, batch_size=2, fixed_batch=True)
        assert [r["step"] for r in result.losses] == [0, 1]
        rec = result.losses[0]
        w = cfg.loss_weights
        assert rec["loss"] == pytest.approx(rec["cls"] + w.iou * rec["iou"] + w.l1 * rec["l1"])

    def test_log_file(self, dataset, cfg, tmp_path):
        path = tmp_path / "train.jsonl"
        train(dataset, cfg, steps=2, log_path=path)
        records = read_jsonl(path)
        assert records[0]["type"] == "header"
        assert records[0]["sequences"] == [s.name for s in dataset]
        assert [r["type"] for r in records[1:]] == ["step", "step"]

    def test_empty_dataset(self, cfg):
        with pytest.raises(ValueError, match="empty"):
            train([], cfg, steps=1)

    def test_bad_batch_size(self, dataset, cfg):
        with pytest.raises(ValueError, match="batch_size"):
            train(dataset, cfg, steps=1, batch_size=0)


def test_jittered_crops_move_the_target(dataset, cfg):
    rng = np.random.default_rng(0)
    centers = {
        (round(s.target.x, 6), round(s.target.y, 6))
        for s in (build_sample(dataset[0], rng, cfg, augment=True) for _ in range(8))
    }
    assert len(centers) > 1


def _mean_loss(params, samples, cfg):
    net = TrackerNet(params.copy(), cfg)
    tape = Tape(enabled=False)
    return np.mean([sample_loss(net, s, tape, training=False).total.item() for s in samples])


@pytest.mark.slow
def test_desk_scale_overfit():
    """Jittered crops of one sequence are learned well enough to track it."""
    cfg = TrackerConfig().validate()
    seq = gen_sequence(TargetSpec(size=16, speed=1.0), length=20, edge=128, seed=0)
    rng = np.random.default_rng(1)
    held = [build_sample(seq, rng, cfg, augment=True) for _ in range(8)]
    start = ParameterStore.initialize(cfg, seed=cfg.seed)

    result = train([seq], cfg, steps=300, batch_size=2, augment=True)

    assert _mean_loss(result.params, held, cfg) <= 0.5 * _mean_loss(start, held, cfg)
    log = run_tracker(seq, TrackerNet(result.params, cfg), cfg)
    assert np.mean([f["iou"] for f in log.frames]) >= 0.5
