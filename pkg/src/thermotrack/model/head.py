"""Center-based prediction head, box decoding and the detection loss.

The head scatters the fused search tokens of both modalities back onto the
``grid × grid`` feature map (discarded positions take their frozen values),
stacks the modalities along channels, compresses them with a 1×1
convolution and runs a few 3×3 Conv-BN-ReLU stages. Three 1×1 heads with a
sigmoid give:

- ``cls``    (W×H):   target-center score I
- ``offset`` (2×W×H): sub-cell center offset G
- ``size``   (2×W×H): box extent J, as a fraction of the search crop

Maps are indexed ``[i, j]`` with ``i`` along image x and ``j`` along image y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, MutableMapping, Sequence

import numpy as np

from thermotrack.config import EncoderConfig, LossWeights, TrackerConfig
from thermotrack.numeric import DimensionError, Tape, Tensor, as_tensor
from thermotrack.params import uniform_fan_in

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
_PROB_EPS = 1e-12

# (cx, cy, w, h) -> (x1, y1, x2, y2)
_TO_CORNERS = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [-0.5, 0.0, 0.5, 0.0],
        [0.0, -0.5, 0.0, 0.5],
    ]
)


class DegenerateBoxError(ValueError):
    """A box with zero or negative area."""


@dataclass(frozen=True)
class BBox:
    """Box on the search feature grid.

    Attributes
    ----------
    x, y : float
        Center in grid cells.
    w, h : float
        Extent as a fraction of the search crop edge.
    """

    x: float
    y: float
    w: float
    h: float

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])

    def to_pixels(self, patch: int, search_edge: int) -> tuple[float, float, float, float]:
        """Center and extent in crop pixels, ``(cx, cy, w, h)``."""
        return self.x * patch, self.y * patch, self.w * search_edge, self.h * search_edge


@dataclass
class HoleFill:
    """Where live search tokens sit on the grid and what fills the rest."""

    search_index: np.ndarray
    frozen: np.ndarray | None = None


@dataclass
class PredictionMaps:
    cls: Tensor
    offset: Tensor
    size: Tensor

    @property
    def I(self) -> np.ndarray:  # noqa: E743
        return self.cls.data

    @property
    def G(self) -> np.ndarray:
        return self.offset.data

    @property
    def J(self) -> np.ndarray:
        return self.size.data

    @property
    def max_score(self) -> float:
        return float(self.cls.data.max())


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    iou: float
    l1: float


def init_params(cfg: TrackerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c = cfg.encoder.channels
    p = {
        "head.compress.w": uniform_fan_in(rng, (c, 2 * c, 1, 1), 2 * c),
        "head.compress.b": np.zeros(c),
    }
    for s in range(1, cfg.encoder.head_stages + 1):
        p[f"head.stage{s}.w"] = uniform_fan_in(rng, (c, c, 3, 3), 9 * c)
        p[f"head.stage{s}.b"] = np.zeros(c)
        p[f"head.stage{s}.bn.g"] = np.ones(c)
        p[f"head.stage{s}.bn.b"] = np.zeros(c)
    for name, out in (("cls", 1), ("offset", 2), ("size", 2)):
        p[f"head.{name}.w"] = uniform_fan_in(rng, (out, c, 1, 1), c)
        p[f"head.{name}.b"] = np.zeros(out)
    return p


def init_buffers(cfg: TrackerConfig) -> dict[str, np.ndarray]:
    c = cfg.encoder.channels
    out = {}
    for s in range(1, cfg.encoder.head_stages + 1):
        out[f"head.stage{s}.bn.mean"] = np.zeros(c)
        out[f"head.stage{s}.bn.var"] = np.ones(c)
    return out


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running: MutableMapping[str, np.ndarray],
    prefix: str,
    tape: Tape,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a ``C×H×W`` map.

    Training uses the statistics of this map and updates the running
    estimates in ``running``; inference uses the running estimates.
    """
    c = x.shape[0]
    if training:
        mu = tape.mean(x, axis=(1, 2), keepdims=True)
        centered = tape.sub(x, mu)
        var = tape.mean(tape.mul(centered, centered), axis=(1, 2), keepdims=True)
        xhat = tape.div(centered, tape.sqrt(tape.add(var, eps)))
        if running is not None:
            running[f"{prefix}.mean"] = (1 - momentum) * running[f"{prefix}.mean"] + (
                momentum * mu.data.ravel()
            )
            running[f"{prefix}.var"] = (1 - momentum) * running[f"{prefix}.var"] + (
                momentum * var.data.ravel()
            )
    else:
        mean = running[f"{prefix}.mean"].reshape(c, 1, 1)
        std = np.sqrt(running[f"{prefix}.var"].reshape(c, 1, 1) + eps)
        xhat = tape.div(tape.sub(x, mean), std)
    return tape.add(tape.mul(xhat, tape.reshape(gain, (c, 1, 1))), tape.reshape(bias, (c, 1, 1)))


def scatter_to_grid(tokens, fill: HoleFill, grid: int, tape: Tape) -> Tensor:
    """Place live tokens at their grid positions; return a ``C×grid×grid`` map.

    Raises
    ------
    DimensionError
        If the metadata does not describe ``tokens`` on a ``grid × grid`` map.
    """
    tokens = as_tensor(tokens)
    n, c = tokens.shape
    index = np.asarray(fill.search_index, dtype=np.intp)
    cells = grid * grid
    if len(index) != n or (n and (index.min() < 0 or index.max() >= cells)):
        msg = f"{n} tokens with grid positions {index.shape} do not fit a {grid}x{grid} grid"
        raise DimensionError(msg)
    if n == cells and np.array_equal(index, np.arange(cells)):
        dense = tokens
    else:
        base = fill.frozen if fill.frozen is not None else np.zeros((cells, c))
        if base.shape != (cells, c):
            msg = f"frozen values {base.shape} do not match grid {cells}x{c}"
            raise DimensionError(msg)
        dense = tape.scatter_rows(base, tokens, index)
    return tape.reshape(tape.transpose(dense), (c, grid, grid))


def head_forward(
    x_rgb,
    x_tir,
    fill_rgb: HoleFill,
    fill_tir: HoleFill,
    params: Mapping[str, Tensor],
    buffers: MutableMapping[str, np.ndarray],
    enc: EncoderConfig,
    tape: Tape,
    *,
    training: bool = False,
    momentum: float = 0.1,
) -> PredictionMaps:
    """Turn fused search tokens of both modalities into prediction maps."""
    grid = enc.grid
    feat = tape.concat(
        [
            scatter_to_grid(x_rgb, fill_rgb, grid, tape),
            scatter_to_grid(x_tir, fill_tir, grid, tape),
        ],
        axis=0,
    )
    feat = tape.conv2d(feat, params["head.compress.w"], params["head.compress.b"])
    for s in range(1, enc.head_stages + 1):
        pre = f"head.stage{s}"
        feat = tape.conv2d(feat, params[f"{pre}.w"], params[f"{pre}.b"], padding=1)
        feat = batch_norm(
            feat,
            params[f"{pre}.bn.g"],
            params[f"{pre}.bn.b"],
            buffers,
            f"{pre}.bn",
            tape,
            training=training,
            momentum=momentum,
        )
        feat = tape.relu(feat)

    def _out(name: str) -> Tensor:
        raw = tape.sigmoid(tape.conv2d(feat, params[f"head.{name}.w"], params[f"head.{name}.b"]))
        # (c, y, x) -> (c, x, y)
        return tape.transpose(raw, (0, 2, 1))

    cls = _out("cls")
    return PredictionMaps(
        cls=tape.reshape(cls, cls.shape[1:]), offset=_out("offset"), size=_out("size")
    )


def peak_cell(maps: PredictionMaps) -> tuple[int, int]:
    """First maximum of I in row-major order."""
    scores = maps.I
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return int(i), int(j)


def decode_bbox(maps: PredictionMaps) -> BBox:
    """Read the box at the classification peak."""
    i, j = peak_cell(maps)
    g, s = maps.G, maps.J
    return BBox(x=i + g[0, i, j], y=j + g[1, i, j], w=s[0, i, j], h=s[1, i, j])


def regress_at(maps: PredictionMaps, cell: tuple[int, int], tape: Tape) -> Tensor:
    """Differentiable ``[x, y, w, h]`` read at grid ``cell``."""
    i, j = cell
    center = tape.add(tape.index(maps.offset, (slice(None), i, j)), np.array([i, j], dtype=float))
    return tape.concat([center, tape.index(maps.size, (slice(None), i, j))], axis=0)


def heatmap_sigma(w_cells: float, h_cells: float) -> float:
    """Gaussian radius of the target heatmap: max(1, diagonal / 6) cells."""
    return max(1.0, math.hypot(w_cells, h_cells) / 6.0)


def gaussian_heatmap(shape: tuple[int, int], center: Sequence[float], sigma: float) -> np.ndarray:
    """Gaussian peaked at exactly 1.0 in the cell containing ``center``.

    Raises
    ------
    ValueError
        If ``center`` lies outside the grid.
    """
    cx, cy = (float(v) for v in center)
    if not (0.0 <= cx < shape[0] and 0.0 <= cy < shape[1]):
        msg = f"center ({cx}, {cy}) is outside the {shape[0]}x{shape[1]} grid"
        raise ValueError(msg)
    ci, cj = int(cx), int(cy)
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma * sigma))


def focal_loss(
    scores,
    center: Sequence[float],
    tape: Tape,
    *,
    sigma: float = 1.0,
    alpha: float = FOCAL_ALPHA,
    beta: float = FOCAL_BETA,
) -> Tensor:
    """Penalty-reduced focal loss against a Gaussian center heatmap.

    Normalized by the number of positive cells (one).
    """
    scores = as_tensor(scores)
    target = gaussian_heatmap(scores.shape, center, sigma)
    positive = target == 1.0
    p = tape.clip(scores, _PROB_EPS, 1.0 - _PROB_EPS)
    q = tape.sub(1.0, p)
    pos_term = tape.mul(tape.neg(tape.log(p)), tape.power(q, alpha))
    neg_term = tape.mul(
        tape.mul(tape.neg(tape.log(q)), tape.power(p, alpha)), (1.0 - target) ** beta
    )
    total = tape.sum(tape.where(positive, pos_term, neg_term))
    return tape.scale(total, 1.0 / max(1, int(positive.sum())))


def _as_box_tensor(box) -> Tensor:
    if isinstance(box, BBox):
        return Tensor(box.vector())
    return as_tensor(box)


def l1_loss(pred, gt, grid: tuple[int, int], tape: Tape) -> Tensor:
    """Mean absolute difference of ``(x/W, y/H, w, h)``."""
    scale = np.array([1.0 / grid[0], 1.0 / grid[1], 1.0, 1.0])
    diff = tape.sub(tape.mul(_as_box_tensor(pred), scale), tape.mul(_as_box_tensor(gt), scale))
    return tape.mean(tape.abs(diff))


def generalized_iou(a, b, tape: Tape) -> Tensor:
    """GIoU of two ``(x1, y1, x2, y2)`` boxes.

    Raises
    ------
    DegenerateBoxError
        If either box has non-positive width or height.
    """
    a, b = as_tensor(a), as_tensor(b)
    for box in (a, b):
        x1, y1, x2, y2 = box.data
        if not (x2 > x1 and y2 > y1):
            msg = f"degenerate box {box.data.tolist()}"
            raise DegenerateBoxError(msg)

    def part(t, k):
        return tape.index(t, k)

    ax1, ay1, ax2, ay2 = (part(a, k) for k in range(4))
    bx1, by1, bx2, by2 = (part(b, k) for k in range(4))
    iw = tape.relu(tape.sub(tape.minimum(ax2, bx2), tape.maximum(ax1, bx1)))
    ih = tape.relu(tape.sub(tape.minimum(ay2, by2), tape.maximum(ay1, by1)))
    inter = tape.mul(iw, ih)
    area_a = tape.mul(tape.sub(ax2, ax1), tape.sub(ay2, ay1))
    area_b = tape.mul(tape.sub(bx2, bx1), tape.sub(by2, by1))
    union = tape.sub(tape.add(area_a, area_b), inter)
    hull = tape.mul(
        tape.sub(tape.maximum(ax2, bx2), tape.minimum(ax1, bx1)),
        tape.sub(tape.maximum(ay2, by2), tape.minimum(ay1, by1)),
    )
    return tape.sub(tape.div(inter, union), tape.div(tape.sub(hull, union), hull))


def to_corners(box, grid: tuple[int, int], tape: Tape) -> Tensor:
    """Grid ``[x, y, w, h]`` to normalized ``(x1, y1, x2, y2)``."""
    scaled = tape.mul(_as_box_tensor(box), np.array([1.0 / grid[0], 1.0 / grid[1], 1.0, 1.0]))
    return tape.reshape(tape.matmul(tape.reshape(scaled, (1, 4)), _TO_CORNERS), (4,))


def giou_loss(pred, gt, grid: tuple[int, int], tape: Tape) -> Tensor:
    """``1 - GIoU`` of two grid boxes; lies in [0, 2)."""
    giou = generalized_iou(to_corners(pred, grid, tape), to_corners(gt, grid, tape), tape)
    return tape.sub(1.0, giou)


def giou_loss_xywh(a: Sequence[float], b: Sequence[float]) -> float:
    """``1 - GIoU`` of two top-left ``(x, y, w, h)`` boxes in any common unit."""
    tape = Tape(enabled=False)
    corners = [np.array([x, y, x + w, y + h], dtype=float) for x, y, w, h in (a, b)]
    return 1.0 - generalized_iou(corners[0], corners[1], tape).item()


def total_loss(l_cls, l_iou, l_l1, weights: LossWeights, tape: Tape | None = None) -> Tensor:
    """``L_cls + w_iou * L_iou + w_l1 * L_l1``."""
    tape = tape if tape is not None else Tape(enabled=False)
    weighted = tape.add(tape.scale(l_iou, weights.iou), tape.scale(l_l1, weights.l1))
    return tape.add(l_cls, weighted)


def detection_loss(
    maps: PredictionMaps,
    gt: BBox,
    enc: EncoderConfig,
    weights: LossWeights,
    tape: Tape,
) -> LossBreakdown:
    """Focal + GIoU + L1 loss with the box regressed at the ground-truth cell."""
    grid = (enc.grid, enc.grid)
    cx = min(max(gt.x, 0.0), enc.grid - 1e-6)
    cy = min(max(gt.y, 0.0), enc.grid - 1e-6)
    cell = (int(cx), int(cy))
    sigma = heatmap_sigma(gt.w * enc.grid, gt.h * enc.grid)
    l_cls = focal_loss(maps.cls, (cx, cy), tape, sigma=sigma)
    pred = regress_at(maps, cell, tape)
    l_iou = giou_loss(pred, gt, grid, tape)
    l_l1 = l1_loss(pred, gt, grid, tape)
    total = total_loss(l_cls, l_iou, l_l1, weights, tape)
    return LossBreakdown(total=total, cls=l_cls.item(), iou=l_iou.item(), l1=l_l1.item())
