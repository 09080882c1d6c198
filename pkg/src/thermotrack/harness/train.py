"""Training: sample builder, AdamW and the optimization loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from rich.console import Console

from thermotrack.config import TrackerConfig
from thermotrack.harness import stage_timer
from thermotrack.harness.crops import crop_window, extract, grayscale, grid_box, rotate
from thermotrack.harness.synthetic import SequenceRecord
from thermotrack.io.runlog import write_jsonl
from thermotrack.model.head import BBox, LossBreakdown, detection_loss
from thermotrack.model.network import MODALITIES, FrameInputs, TrackerNet
from thermotrack.numeric import Tape
from thermotrack.params import ParameterStore

console = Console(stderr=True)


class AdamW:
    """Adam with decoupled weight decay over a :class:`ParameterStore`.

    Each step first shrinks every parameter by ``lr * weight_decay`` and then
    applies the bias-corrected moment update. Parameters without a gradient
    are left untouched, including their decay.
    """

    def __init__(
        self,
        params: ParameterStore,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainingSample:
    """One (template, search, description, target) tuple."""

    inputs: FrameInputs
    description: str
    target: BBox
    sequence: str = ""
    frames: tuple[int, int] = (0, 0)


def build_sample(
    seq: SequenceRecord,
    rng: np.random.Generator,
    cfg: TrackerConfig,
    augment: bool = True,
) -> TrainingSample:
    """Draw a frame pair from ``seq`` and crop it as the tracker would.

    The template frame ``t0`` is uniform over the sequence and the search
    frame lies within ``max_frame_gap`` of it. With ``augment``, the search
    window is shifted and rescaled, template crops are rotated and RGB crops
    are occasionally turned gray.
    """
    enc, aug = cfg.encoder, cfg.augment
    n = len(seq)
    t0 = int(rng.integers(n))
    lo, hi = max(0, t0 - aug.max_frame_gap), min(n - 1, t0 + aug.max_frame_gap)
    t1 = int(rng.integers(lo, hi + 1))

    shift, scale, angle, gray = (0.0, 0.0), 1.0, 0.0, False
    if augment:
        shift = tuple(rng.uniform(-aug.translation, aug.translation, size=2) / cfg.search_factor)
        scale = math.exp(rng.uniform(-aug.scale, aug.scale))
        angle = rng.uniform(-aug.rotation_deg, aug.rotation_deg)
        gray = bool(rng.random() < aug.grayscale_prob)

    template_window = crop_window(
        seq.gt_boxes[t0], cfg.template_factor, seq.edge, enc.template_edge
    )
    search_window = crop_window(
        seq.gt_boxes[t1], cfg.search_factor, seq.edge, enc.search_edge, shift=shift, scale=scale
    )
    crops = {}
    for m in MODALITIES:
        template = extract(seq.images(m)[t0], template_window)
        search = extract(seq.images(m)[t1], search_window)
        if angle:
            template = rotate(template, angle)
        if gray and m == "rgb":
            template, search = grayscale(template), grayscale(search)
        crops[m] = (template, search)

    return TrainingSample(
        inputs=FrameInputs(
            template_rgb=crops["rgb"][0],
            template_tir=crops["tir"][0],
            search_rgb=crops["rgb"][1],
            search_tir=crops["tir"][1],
        ),
        description=seq.descriptions[t0],
        target=grid_box(search_window, seq.gt_boxes[t1], enc.patch),
        sequence=seq.name,
        frames=(t0, t1),
    )


def sample_loss(
    net: TrackerNet, sample: TrainingSample, tape: Tape, training: bool = True
) -> LossBreakdown:
    """Detection loss of one sample, with the description's features in memory.

    ``training=False`` uses the head's running statistics and leaves them as is.
    """
    text = net.encode_text(sample.description, tape)
    query = net.text_features(text, tape)
    memory = net.new_memory()
    for m in MODALITIES:
        memory[m].insert(query[m], frame=sample.frames[0])
    result = net.forward(
        sample.inputs,
        text,
        net.initial_reasoning(),
        tape,
        memory=memory,
        query=query,
        training=training,
    )
    return detection_loss(result.maps, sample.target, net.cfg.encoder, net.cfg.loss_weights, tape)


@dataclass
class TrainResult:
    params: ParameterStore
    losses: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]["loss"] if self.losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1]["loss"] if self.losses else math.nan


def train(
    dataset: Sequence[SequenceRecord],
    cfg: TrackerConfig,
    *,
    steps: int | None = None,
    params: ParameterStore | None = None,
    fixed_batch: bool = False,
    batch_size: int = 1,
    augment: bool = True,
    log_path: str | Path | None = None,
    progress: bool = False,
    timings: dict | None = None,
) -> TrainResult:
    """Minimize the detection loss over samples drawn from ``dataset``.

    Parameters
    ----------
    dataset : sequence of SequenceRecord
    cfg : TrackerConfig
    steps : int, optional
        Optimizer steps; defaults to ``cfg.train_steps``.
    params : ParameterStore, optional
        Starting parameters (copied); freshly initialized from ``cfg.seed``
        when omitted.
    fixed_batch : bool
        Draw ``batch_size`` samples once and reuse them every step.
    batch_size : int
        Samples per step; their gradients are averaged.
    augment : bool
        Apply the crop augmentations when drawing samples.
    log_path : path-like, optional
        Write a JSON-lines training log (header plus one record per step).
    progress : bool
        Show a progress bar on stderr.
    timings : dict, optional
        Receives accumulated seconds per stage.

    Returns
    -------
    TrainResult
        The trained parameters and one loss record per step.

    Raises
    ------
    ValueError
        If ``dataset`` is empty or ``batch_size`` < 1.
    """
    if not dataset:
        msg = "cannot train on an empty dataset"
        raise ValueError(msg)
    if batch_size < 1:
        msg = f"batch_size must be >= 1, got {batch_size}"
        raise ValueError(msg)
    cfg.validate()
    steps = cfg.train_steps if steps is None else steps
    store = ParameterStore.initialize(cfg) if params is None else params.copy()
    net = TrackerNet(store, cfg)
    opt = AdamW(store, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    def draw() -> list[TrainingSample]:
        picks = rng.integers(len(dataset), size=batch_size)
        return [build_sample(dataset[int(i)], rng, cfg, augment=augment) for i in picks]

    batch = draw() if fixed_batch else None
    losses: list[dict] = []

    def one_step(step: int) -> None:
        samples = batch if batch is not None else draw()
        opt.zero_grad()
        rec = {"step": step, "loss": 0.0, "cls": 0.0, "iou": 0.0, "l1": 0.0}
        for sample in samples:
            tape = Tape()
            with stage_timer(timings, "forward"):
                parts = sample_loss(net, sample, tape)
            with stage_timer(timings, "backward"):
                tape.backward(tape.scale(parts.total, 1.0 / len(samples)))
            rec["loss"] += parts.total.item() / len(samples)
            rec["cls"] += parts.cls / len(samples)
            rec["iou"] += parts.iou / len(samples)
            rec["l1"] += parts.l1 / len(samples)
        with stage_timer(timings, "optimizer"):
            opt.step()
        losses.append(rec)

    t0 = time.perf_counter()
    if progress and steps > 0:
        from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

        with Progress(
            TextColumn("[bold blue]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total} steps"),
            TextColumn("loss {task.fields[loss]:.4f}"),
            TimeElapsedColumn(),
            console=console,
        ) as bar:
            task = bar.add_task("Training", total=steps, loss=math.nan)
            for step in range(steps):
                one_step(step)
                bar.update(task, advance=1, loss=losses[-1]["loss"])
    else:
        for step in range(steps):
            one_step(step)

    if progress and losses:
        console.print(
            f"[green]Trained {steps} steps in {time.perf_counter() - t0:.1f}s[/green]"
            f" (loss {losses[0]['loss']:.4f} -> {losses[-1]['loss']:.4f})"
        )
    if log_path is not None:
        header = {
            "type": "header",
            "steps": steps,
            "batch_size": batch_size,
            "fixed_batch": fixed_batch,
            "sequences": [seq.name for seq in dataset],
            "config": cfg.to_dict(),
        }
        write_jsonl([header, *({"type": "step", **rec} for rec in losses)], log_path)
    return TrainResult(params=store, losses=losses)
