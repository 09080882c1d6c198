"""Tests for the frame-by-frame tracking loop."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from thermotrack.harness.synthetic import TargetSpec, gen_sequence
from thermotrack.harness.tracker import mask_words, run_tracker
from thermotrack.io.runlog import RunLog
from thermotrack.model.network import TrackerNet
from thermotrack.model.provider import MockProvider
from thermotrack.params import ParameterStore
from thermotrack.selftest import reduced_config


@pytest.fixture(scope="module")
def seq():
    return gen_sequence(TargetSpec(size=8, speed=1.0), length=7, edge=32, seed=5, misalign=True)


def _net(**overrides):
    cfg = reduced_config(**overrides)
    return TrackerNet(ParameterStore.initialize(cfg, seed=0), cfg)


class TestMaskWords:
    def test_zero_ratio_is_identity(self):
        assert mask_words("a red square", 0.0, seed=0, frame=3) == "a red square"

    def test_drops_rounded_count_in_order(self):
        words = "a red square moving right".split()
        out = mask_words(" ".join(words), 0.4, seed=1, frame=2).split()
        assert len(out) == 3
        assert [w for w in words if w in out] == out

    def test_deterministic_per_seed_and_frame(self):
        text = "a blue square moving left in the dark"
        assert mask_words(text, 0.5, 7, 4) == mask_words(text, 0.5, 7, 4)


class TestRunTracker:
    def test_frame_zero_is_the_initial_box(self, seq):
        log = run_tracker(seq, _net())
        first = log.frames[0]
        assert first["pred"] == seq.gt_boxes[0].tolist()
        assert first["score"] is None
        assert first["iou"] == 1.0
        assert len(log.frames) == len(seq)

    def test_header_and_init_event(self, seq):
        log = run_tracker(seq, _net())
        assert log.header["sequence"] == seq.name
        assert log.header["fusion_order"] == ["selection", "relevance", "exchange", "fuse"]
        init = log.events[0]
        assert init["kind"] == "init"
        assert init["description"] == seq.descriptions[0]
        assert init["kb_inserted"] == {"rgb": True, "tir": True}

    def test_same_inputs_give_identical_logs(self, seq):
        assert run_tracker(seq, _net()).dumps() == run_tracker(seq, _net()).dumps()

    def test_never_looks_ahead(self, seq):
        full = run_tracker(seq, _net())
        short = run_tracker(seq.truncated(4), _net())
        assert short.frames == full.frames[:4]

    def test_next_frame_starts_from_propagated_token(self, seq, monkeypatch):
        net = _net()
        calls = []
        forward = net.forward

        def recording(inputs, text, reasoning, tape, **kwargs):
            result = forward(inputs, text, reasoning, tape, **kwargs)
            calls.append((reasoning, result.reasoning))
            return result

        monkeypatch.setattr(net, "forward", recording)
        run_tracker(seq, net, max_frames=4)
        assert len(calls) == 3
        for (_, produced), (received, _) in zip(calls, calls[1:]):
            for m in ("rgb", "tir"):
                np.testing.assert_array_equal(received[m].data, produced[m].data)

    def test_max_frames(self, seq):
        log = run_tracker(seq, _net(), max_frames=3)
        assert [f["frame"] for f in log.frames] == [0, 1, 2]

    def test_unreachable_threshold_never_updates(self, seq):
        log = run_tracker(seq, _net(update_threshold=1.01))
        assert [e["kind"] for e in log.events] == ["init"]

    def test_updates_follow_interval(self, seq):
        log = run_tracker(seq, _net(update_threshold=0.0, update_interval=2))
        updates = [e["frame"] for e in log.events if e["kind"] == "reference_update"]
        assert updates == [2, 4, 6]

    def test_provider_failure_keeps_description(self, seq):
        net = _net(update_threshold=0.0, update_interval=1)
        provider = MockProvider(seq.descriptions, fail_on=[2])
        log = run_tracker(seq, net, provider=provider)
        failed = next(e for e in log.events if e["frame"] == 2)
        assert not failed["description_ok"]
        assert "error" in failed
        assert failed["description"] == log.events[1]["description"]
        assert log.frames[3]["description_used"] == seq.descriptions[1]
        assert provider.calls == list(range(1, len(seq)))

    def test_knowledge_base_stays_bounded(self, seq):
        net = _net(update_threshold=0.0, update_interval=1, kb_size=2)
        log = run_tracker(seq, net)
        sizes = [f["kb_size"][m] for f in log.frames for m in ("rgb", "tir")]
        assert max(sizes) <= 2
        assert min(sizes) >= 1

    def test_summary_matches_records(self, seq):
        log = run_tracker(seq, _net())
        assert log.summary == log.compute_summary().to_dict()
        assert set(log.summary) == {"PR", "SR", "NPR", "MPR", "MSR"}

    def test_round_trip_through_file(self, seq, tmp_path):
        log = run_tracker(seq, _net())
        back = RunLog.read(log.write(tmp_path / "run.jsonl"))
        assert back.dumps() == log.dumps()
        np.testing.assert_array_equal(back.predictions(), log.predictions())

    def test_encoder_mismatch(self, seq):
        net = _net()
        other = reduced_config(encoder=replace(net.cfg.encoder, channels=4))
        with pytest.raises(ValueError, match="encoder"):
            run_tracker(seq, net, other)
