"""Synthetic two-modality tracking sequences.

A colored square moves in a straight line and bounces off the frame edges.
Optional distractor squares move the same way, optional vertical bars
occlude, and a "night" frame range darkens the RGB stream. The TIR stream
renders the same scene as heat: the target is the warmest object, distractors
are lukewarm, and the whole image is slightly blurred. Night never touches
TIR, so in the dark the thermal stream carries the target.

Everything is drawn from one ``numpy`` generator seeded by ``seed``, so the
same arguments always give bit-identical sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.15, 0.75),
}

TARGET_HEAT = 0.9
DISTRACTOR_HEAT = 0.5
OCCLUDER_HEAT = 0.25
NIGHT_GAIN = 0.2
TIR_BLUR = 1.0
OCCLUDER_WIDTH = 6


@dataclass(frozen=True)
class TargetSpec:
    """Appearance and motion of the tracked square.

    Attributes
    ----------
    color : str
        Key of :data:`COLORS`.
    size : int
        Edge in pixels.
    speed : float
        Pixels per frame.
    heading : float
        Degrees, 0 = right, 90 = down.
    start : tuple[float, float] or None
        Initial top-left corner; the frame center when None.
    shape : str
        Noun used in descriptions.
    """

    color: str = "red"
    size: int = 16
    speed: float = 1.5
    heading: float = 0.0
    start: tuple[float, float] | None = None
    shape: str = "square"


@dataclass
class SequenceRecord:
    """A rendered sequence with per-frame annotations.

    ``rgb`` and ``tir`` are ``T×3×E×E`` arrays in [0, 1]; boxes are pixel
    ``(x, y, w, h)`` with a top-left origin.
    """

    rgb: np.ndarray
    tir: np.ndarray
    gt_boxes: np.ndarray
    descriptions: list[str]
    seed: int = 0
    gt_boxes_alt: np.ndarray | None = None
    target: TargetSpec | None = None
    night: np.ndarray | None = None
    occluded: np.ndarray | None = None
    name: str = "seq"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rgb)
        lengths = {len(self.tir), len(self.gt_boxes), len(self.descriptions)}
        if self.gt_boxes_alt is not None:
            lengths.add(len(self.gt_boxes_alt))
        if lengths != {n}:
            msg = f"sequence {self.name!r}: per-frame lists have lengths {sorted(lengths | {n})}"
            raise ValueError(msg)
        edge = self.edge
        for stream in (self.gt_boxes, self.gt_boxes_alt):
            if stream is None:
                continue
            boxes = np.asarray(stream, dtype=float)
            ok = (
                (boxes[:, 2] > 0)
                & (boxes[:, 3] > 0)
                & (boxes[:, 0] >= 0)
                & (boxes[:, 1] >= 0)
                & (boxes[:, 0] + boxes[:, 2] <= edge)
                & (boxes[:, 1] + boxes[:, 3] <= edge)
            )
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                box = boxes[bad].tolist()
                msg = f"sequence {self.name!r}: box {box} of frame {bad} is invalid"
                raise ValueError(msg)

    def __len__(self) -> int:
        return len(self.rgb)

    @property
    def edge(self) -> int:
        return int(self.rgb.shape[-1])

    @property
    def frames(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.rgb, self.tir))

    def images(self, modality: str) -> np.ndarray:
        return self.rgb if modality == "rgb" else self.tir

    def truncated(self, length: int) -> SequenceRecord:
        """The first ``length`` frames."""
        return replace(
            self,
            rgb=self.rgb[:length],
            tir=self.tir[:length],
            gt_boxes=self.gt_boxes[:length],
            descriptions=self.descriptions[:length],
            gt_boxes_alt=None if self.gt_boxes_alt is None else self.gt_boxes_alt[:length],
            night=None if self.night is None else self.night[:length],
            occluded=None if self.occluded is None else self.occluded[:length],
        )


def motion_phrase(velocity: tuple[float, float]) -> str:
    vx, vy = velocity
    if vx == 0 and vy == 0:
        return "holding still"
    if abs(vx) >= abs(vy):
        return "moving right" if vx > 0 else "moving left"
    return "moving down" if vy > 0 else "moving up"


def describe_target(
    spec: TargetSpec,
    velocity: tuple[float, float],
    *,
    night: bool = False,
    occluded: bool = False,
) -> str:
    """Template description, e.g. ``"a red square moving right"``."""
    text = f"a {spec.color} {spec.shape} {motion_phrase(velocity)}"
    if night:
        text += " in the dark"
    if occluded:
        text += " behind a bar"
    return text


class _Mover:
    """Square with a float top-left corner bouncing inside the frame."""

    def __init__(self, pos, vel, size: int, edge: int):
        self.pos = np.array(pos, dtype=float)
        self.vel = np.array(vel, dtype=float)
        self.size = size
        self.limit = float(edge - size)

    def box(self) -> np.ndarray:
        x, y = np.clip(np.round(self.pos), 0, self.limit)
        return np.array([x, y, self.size, self.size], dtype=float)

    def step(self) -> None:
        self.pos += self.vel
        for k in range(2):
            if self.pos[k] < 0:
                self.pos[k] = -self.pos[k]
                self.vel[k] = -self.vel[k]
            elif self.pos[k] > self.limit:
                self.pos[k] = 2 * self.limit - self.pos[k]
                self.vel[k] = -self.vel[k]


def _paint(canvas: np.ndarray, box: np.ndarray, value) -> None:
    x, y, w, h = (int(v) for v in box)
    value = np.asarray(value, dtype=float)
    canvas[..., y : y + h, x : x + w] = value.reshape(-1, 1, 1) if value.ndim else value


def gen_sequence(
    spec: TargetSpec | None = None,
    length: int = 50,
    edge: int = 128,
    seed: int = 0,
    *,
    distractors: int = 0,
    occluders: int = 0,
    night: tuple[int, int] | None = None,
    misalign: bool = False,
    alt_offset: tuple[float, float] = (2.0, 1.0),
    name: str | None = None,
) -> SequenceRecord:
    """Render a synthetic RGB/TIR sequence.

    Parameters
    ----------
    spec : TargetSpec, optional
        Target appearance and motion; defaults to a red square moving right.
    length : int
        Number of frames, at least 2.
    edge : int
        Frame edge in pixels.
    seed : int
        Generator seed.
    distractors : int
        Extra squares in other colors.
    occluders : int
        Static vertical bars drawn over everything.
    night : (start, stop), optional
        Frame range in which RGB contrast is attenuated.
    misalign : bool
        Also emit a second annotation stream shifted by ``alt_offset``.

    Returns
    -------
    SequenceRecord

    Raises
    ------
    ValueError
        If the target does not fit in the frame or ``length < 2``.
    """
    spec = spec or TargetSpec()
    if length < 2:
        msg = f"length must be >= 2, got {length}"
        raise ValueError(msg)
    if not 0 < spec.size < edge:
        msg = f"target of size {spec.size} does not fit a {edge}px frame"
        raise ValueError(msg)
    if spec.color not in COLORS:
        msg = f"unknown color {spec.color!r}; choose from {sorted(COLORS)}"
        raise ValueError(msg)

    rng = np.random.default_rng(seed)
    bg_rgb = 0.45 + 0.6 * ndimage.gaussian_filter(
        rng.standard_normal((3, edge, edge)), sigma=(0, 3, 3)
    )
    bg_tir = 0.2 + 0.4 * ndimage.gaussian_filter(rng.standard_normal((edge, edge)), sigma=4)

    start = spec.start
    if start is None:
        start = ((edge - spec.size) / 2.0, (edge - spec.size) / 2.0)
    theta = math.radians(spec.heading)
    velocity = (spec.speed * math.cos(theta), spec.speed * math.sin(theta))
    target = _Mover(start, velocity, spec.size, edge)

    others = [c for c in COLORS if c != spec.color]
    movers = []
    for _ in range(distractors):
        size = max(4, spec.size - 4)
        pos = rng.uniform(0, edge - size, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        vel = spec.speed * np.array([math.cos(angle), math.sin(angle)])
        movers.append((others[int(rng.integers(len(others)))], _Mover(pos, vel, size, edge)))
    bars = [int(rng.integers(0, edge - OCCLUDER_WIDTH)) for _ in range(occluders)]

    rgb = np.empty((length, 3, edge, edge))
    tir = np.empty((length, 3, edge, edge))
    boxes = np.empty((length, 4))
    night_flags = np.zeros(length, dtype=bool)
    occluded = np.zeros(length, dtype=bool)
    descriptions = []
    for t in range(length):
        frame = bg_rgb + 0.01 * rng.standard_normal((3, edge, edge))
        heat = bg_tir + 0.01 * rng.standard_normal((edge, edge))
        for color, mover in movers:
            _paint(frame, mover.box(), COLORS[color])
            _paint(heat, mover.box(), DISTRACTOR_HEAT)
        box = target.box()
        _paint(frame, box, COLORS[spec.color])
        _paint(heat, box, TARGET_HEAT)
        hidden = 0
        for x0 in bars:
            bar = np.array([x0, 0, OCCLUDER_WIDTH, edge], dtype=float)
            _paint(frame, bar, (0.5, 0.5, 0.5))
            _paint(heat, bar, OCCLUDER_HEAT)
            hidden += max(0.0, min(box[0] + box[2], x0 + OCCLUDER_WIDTH) - max(box[0], x0))
        occluded[t] = hidden >= 0.3 * box[2]
        night_flags[t] = night is not None and night[0] <= t < night[1]
        if night_flags[t]:
            frame = NIGHT_GAIN * frame
        rgb[t] = np.clip(frame, 0.0, 1.0)
        tir[t] = np.clip(ndimage.gaussian_filter(heat, TIR_BLUR), 0.0, 1.0)[None].repeat(3, axis=0)
        boxes[t] = box
        descriptions.append(
            describe_target(
                spec, tuple(target.vel), night=bool(night_flags[t]), occluded=bool(occluded[t])
            )
        )
        target.step()
        for _, mover in movers:
            mover.step()

    alt = None
    if misalign:
        alt = boxes.copy()
        alt[:, 0] = np.clip(alt[:, 0] + alt_offset[0], 0, edge - alt[:, 2])
        alt[:, 1] = np.clip(alt[:, 1] + alt_offset[1], 0, edge - alt[:, 3])
    return SequenceRecord(
        rgb=rgb,
        tir=tir,
        gt_boxes=boxes,
        descriptions=descriptions,
        seed=seed,
        gt_boxes_alt=alt,
        target=spec,
        night=night_flags,
        occluded=occluded,
        name=name or f"seq_{seed:04d}",
    )


def gen_dataset(
    count: int,
    length: int = 50,
    edge: int = 128,
    seed: int = 0,
    *,
    misalign: bool = True,
) -> list[SequenceRecord]:
    """``count`` varied sequences: colors, headings, clutter and night ranges differ."""
    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    out = []
    for i in range(count):
        spec = TargetSpec(
            color=colors[i % len(colors)],
            size=int(rng.integers(12, 21)),
            speed=float(rng.uniform(0.5, 2.5)),
            heading=float(rng.uniform(0, 360)),
        )
        night_start = int(rng.integers(0, length))
        out.append(
            gen_sequence(
                spec,
                length,
                edge,
                seed=seed * 1000 + i,
                distractors=int(rng.integers(0, 3)),
                occluders=int(rng.integers(0, 2)),
                night=(night_start, min(length, night_start + length // 4)),
                misalign=misalign,
                name=f"seq_{i:03d}",
            )
        )
    return out
