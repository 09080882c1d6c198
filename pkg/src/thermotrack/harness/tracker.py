"""Frame-by-frame tracking loop."""

from __future__ import annotations

import numpy as np

from thermotrack.config import TrackerConfig
from thermotrack.harness import stage_timer
from thermotrack.harness.crops import crop_window, extract, frame_box
from thermotrack.harness.metrics import center_error, iou
from thermotrack.harness.synthetic import SequenceRecord
from thermotrack.io.runlog import RunLog
from thermotrack.model.crm import GATE_SQUASH
from thermotrack.model.encoder import tokenize
from thermotrack.model.fusion import STEP_ORDER
from thermotrack.model.head import decode_bbox
from thermotrack.model.network import MODALITIES, FrameInputs, TrackerNet
from thermotrack.model.provider import (
    DescriptionProvider,
    FrameRef,
    MockProvider,
    generate_description,
)
from thermotrack.numeric import Tape, Tensor


def mask_words(description: str, ratio: float, seed: int, frame: int) -> str:
    """Drop ``round(ratio * n)`` words, chosen deterministically per (seed, frame)."""
    words = tokenize(description)
    drop = int(round(ratio * len(words)))
    if drop == 0:
        return description
    rng = np.random.default_rng([seed, frame])
    gone = set(rng.choice(len(words), size=drop, replace=False).tolist())
    return " ".join(w for i, w in enumerate(words) if i not in gone)


class _Context:
    """Mutable per-run state: references, description and memory."""

    def __init__(self, net: TrackerNet, cfg: TrackerConfig):
        self.net = net
        self.cfg = cfg
        self.memory = net.new_memory()
        self.reasoning = {m: net.params["reasoning.init"].detach() for m in MODALITIES}
        self.template: dict[str, np.ndarray] = {}
        self.description = ""
        self.text: Tensor | None = None
        self.query: dict[str, Tensor] = {}

    def set_template(self, seq: SequenceRecord, t: int, box) -> None:
        enc = self.cfg.encoder
        window = crop_window(box, self.cfg.template_factor, seq.edge, enc.template_edge)
        self.template = {m: extract(seq.images(m)[t], window) for m in MODALITIES}

    def set_description(self, description: str, frame: int) -> dict[str, bool]:
        """Encode ``description`` and offer its features to both knowledge bases."""
        self.description = description
        tape = Tape(enabled=False)
        masked = mask_words(description, self.cfg.text_mask_ratio, self.cfg.seed, frame)
        self.text = self.net.encode_text(masked, tape)
        self.query = self.net.text_features(self.text, tape)
        return {m: self.memory[m].insert(self.query[m], frame=frame).inserted for m in MODALITIES}


def run_tracker(
    seq: SequenceRecord,
    net: TrackerNet,
    cfg: TrackerConfig | None = None,
    provider: DescriptionProvider | None = None,
    *,
    max_frames: int | None = None,
    timings: dict | None = None,
) -> RunLog:
    """Track the target of ``seq`` from its first ground-truth box.

    Frame 0 sets the template crops and the first description and is
    reported at the initial box. Every later frame is cropped around the
    previous prediction and never looks ahead. When the peak score reaches
    ``update_threshold`` and at least ``update_interval`` frames passed since
    the last update, the template crops are refreshed at the prediction and a
    new description is requested; each refresh is logged as an event.

    Parameters
    ----------
    seq : SequenceRecord
    net : TrackerNet
    cfg : TrackerConfig, optional
        Defaults to ``net.cfg``.
    provider : DescriptionProvider, optional
        Defaults to a :class:`MockProvider` over ``seq.descriptions``.
    max_frames : int, optional
        Stop after this many frames.
    timings : dict, optional
        Receives accumulated seconds per stage.

    Returns
    -------
    RunLog
    """
    cfg = cfg or net.cfg
    enc = cfg.encoder
    if enc != net.cfg.encoder:
        msg = "tracker config encoder does not match the network's"
        raise ValueError(msg)
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    if n < 1:
        msg = "sequence has no frames"
        raise ValueError(msg)
    provider = provider or MockProvider(seq.descriptions)

    ctx = _Context(net, cfg)
    box = np.asarray(seq.gt_boxes[0], dtype=float)
    ctx.set_template(seq, 0, box)
    inserted = ctx.set_description(seq.descriptions[0], 0)

    log = RunLog(
        header={
            "sequence": seq.name,
            "seed": seq.seed,
            "frames": n,
            "config": cfg.to_dict(),
            "fusion_order": list(STEP_ORDER),
            "gate_squash": GATE_SQUASH,
        }
    )
    log.events.append(
        {"frame": 0, "kind": "init", "description": ctx.description, "kb_inserted": inserted}
    )

    def record(t: int, pred: np.ndarray, score: float | None, kept: int) -> None:
        gt = seq.gt_boxes[t]
        alt = None if seq.gt_boxes_alt is None else seq.gt_boxes_alt[t]
        log.frames.append(
            {
                "frame": t,
                "pred": [float(v) for v in pred],
                "gt": [float(v) for v in gt],
                "gt_alt": None if alt is None else [float(v) for v in alt],
                "iou": iou(pred, gt),
                "center_error": center_error(pred, gt),
                "score": score,
                "kb_size": {m: len(ctx.memory[m]) for m in MODALITIES},
                "tokens_kept": kept,
                "description_used": ctx.description,
            }
        )

    record(0, box, None, enc.num_search)
    last_update = 0
    for t in range(1, n):
        with stage_timer(timings, "crop"):
            window = crop_window(box, cfg.search_factor, seq.edge, enc.search_edge)
            search = {m: extract(seq.images(m)[t], window) for m in MODALITIES}
            inputs = FrameInputs(
                template_rgb=ctx.template["rgb"],
                template_tir=ctx.template["tir"],
                search_rgb=search["rgb"],
                search_tir=search["tir"],
            )
        with stage_timer(timings, "forward"):
            result = net.forward(
                inputs,
                ctx.text,
                ctx.reasoning,
                Tape(enabled=False),
                memory=ctx.memory,
                query=ctx.query,
            )
        box = frame_box(window, decode_bbox(result.maps), enc.patch, seq.edge)
        ctx.reasoning = {m: result.reasoning[m].detach() for m in MODALITIES}
        score = result.maps.max_score
        record(t, box, score, result.tokens_kept)

        if score >= cfg.update_threshold and t - last_update >= cfg.update_interval:
            last_update = t
            with stage_timer(timings, "update"):
                ctx.set_template(seq, t, box)
                answer = generate_description(
                    provider, FrameRef(t, seq.rgb[t]), box, previous=ctx.description
                )
                event = {
                    "frame": t,
                    "kind": "reference_update",
                    "score": score,
                    "template": True,
                    "description_ok": answer.ok,
                    "description": answer.text,
                }
                if answer.ok:
                    event["kb_inserted"] = ctx.set_description(answer.text, t)
                else:
                    event["error"] = answer.error
                log.events.append(event)

    log.summary = log.compute_summary(cfg.pr_threshold, cfg.npr_threshold).to_dict()
    return log
