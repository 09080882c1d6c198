"""Adaptive token fusion between the RGB and TIR branches.

At each fusion layer the two token sequences go through four steps, in this
order:

1. token selection (selection layers only): score every search token by the
   attention mass it puts on reasoning, text, template-center and search
   keys, then keep the top ``ceil(gamma * N_x)`` tokens. Both modalities keep
   the same indices, ranked by the sum of their scores.
2. channel relevance ``S = (F_B W_B)^T (F_R W_R)`` over the full sequences.
3. channel exchange: the ``round(sigma * C)`` channels with the highest
   row-mean of ``S`` are swapped between the modalities.
4. fusion: tokens of both modalities are concatenated and pass through a
   position-wise two-layer MLP with a residual.

Selection is parameter-free; gradients flow through the kept values only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from thermotrack.config import SCORE_TERMS, TrackerConfig
from thermotrack.model.encoder import AttentionRecord, TokenSequence
from thermotrack.numeric import DimensionError, Tape, Tensor, as_tensor
from thermotrack.params import uniform_fan_in

STEP_ORDER = ("selection", "relevance", "exchange", "fuse")


@dataclass
class SearchScores:
    """Per-search-token attention mass on each key segment.

    Every array has the length of the live search segment.
    """

    reasoning: np.ndarray
    text: np.ndarray
    template: np.ndarray
    search: np.ndarray
    terms: tuple[str, ...] = SCORE_TERMS

    @property
    def total(self) -> np.ndarray:
        return sum(getattr(self, t) for t in self.terms)

    def __len__(self) -> int:
        return len(self.search)


@dataclass
class SelectionResult:
    kept_indices: np.ndarray
    gamma: float


@dataclass
class ExchangePlan:
    channel_indices: np.ndarray
    sigma: float


@dataclass
class FusionRecord:
    """What one fusion layer did, for the run log."""

    layer: int
    kept: int
    exchanged: list[int] = field(default_factory=list)


def init_params(cfg: TrackerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    enc = cfg.encoder
    c, hidden = enc.channels, enc.mlp_ratio * enc.channels
    p = {}
    for layer in enc.fusion_layers:
        pre = f"fusion.layer{layer}"
        p[f"{pre}.w_rgb"] = uniform_fan_in(rng, (c, c), c)
        p[f"{pre}.w_tir"] = uniform_fan_in(rng, (c, c), c)
        p[f"{pre}.mlp.w1"] = uniform_fan_in(rng, (c, hidden), c)
        p[f"{pre}.mlp.b1"] = np.zeros(hidden)
        p[f"{pre}.mlp.w2"] = uniform_fan_in(rng, (hidden, c), hidden)
        p[f"{pre}.mlp.b2"] = np.zeros(c)
    return p


def template_center(template_grid: int) -> np.ndarray:
    """Row-major template indices of the central ceil(g/2) × ceil(g/2) block."""
    side = math.ceil(template_grid / 2)
    start = (template_grid - side) // 2
    rows = np.arange(start, start + side)
    return (rows[:, None] * template_grid + rows[None, :]).ravel()


def score_search_tokens(
    attn: np.ndarray,
    boundaries: tuple[int, int, int, int, int],
    *,
    template_grid: int | None = None,
    terms: Iterable[str] = SCORE_TERMS,
) -> SearchScores:
    """Sum each search query's attention mass over the four key groups.

    Parameters
    ----------
    attn : np.ndarray
        Head-averaged ``N × N`` attention of one sequence.
    boundaries : tuple
        Segment offsets of that sequence.
    template_grid : int, optional
        Edge of the template patch grid; inferred from the template segment
        length when omitted.
    terms : iterable of str
        Which groups contribute to :attr:`SearchScores.total`.
    """
    attn = np.asarray(attn, dtype=np.float64)
    b0, b1, b2, b3, b4 = boundaries
    if not (0 == b0 <= b1 <= b2 <= b3 < b4 == attn.shape[0]) or attn.shape[0] != attn.shape[1]:
        msg = f"boundaries {boundaries} do not partition a {attn.shape} attention matrix"
        raise ValueError(msg)
    n_template = b3 - b2
    if template_grid is None:
        template_grid = math.isqrt(n_template)
    if template_grid * template_grid != n_template:
        msg = f"template segment of {n_template} tokens is not a square grid"
        raise ValueError(msg)
    rows = attn[b3:b4]
    center = b2 + template_center(template_grid) if n_template else np.array([], dtype=int)
    return SearchScores(
        reasoning=rows[:, b0:b1].sum(axis=1),
        text=rows[:, b1:b2].sum(axis=1),
        template=rows[:, center].sum(axis=1),
        search=rows[:, b3:b4].sum(axis=1),
        terms=tuple(terms),
    )


def retained_count(n: int, gamma: float) -> int:
    """ceil(gamma * n), computed without float overshoot (0.7 * 10 -> 7)."""
    return max(1, math.ceil(round(gamma * n, 9)))


def select_tokens(scores, gamma: float) -> SelectionResult:
    """Keep the highest-scoring ``ceil(gamma * N)`` tokens in index order.

    Ties rank the lower index first.
    """
    if not 0.0 < gamma <= 1.0:
        msg = f"gamma must be in (0, 1], got {gamma}"
        raise ValueError(msg)
    values = scores.total if isinstance(scores, SearchScores) else np.asarray(scores, dtype=float)
    order = np.argsort(-values, kind="stable")
    kept = np.sort(order[: retained_count(len(values), gamma)])
    return SelectionResult(kept_indices=kept, gamma=gamma)


def prune_search(seq: TokenSequence, kept: np.ndarray, tape: Tape) -> TokenSequence:
    """Drop search tokens not in ``kept`` (indices into the live segment).

    Dropped values are frozen into ``seq.frozen`` at their grid positions.
    """
    b0, b1, b2, b3, b4 = seq.boundaries
    kept = np.asarray(kept, dtype=np.intp)
    dropped = np.setdiff1d(np.arange(b4 - b3), kept)
    if seq.frozen is None:
        # nothing pruned yet, so search_index spans the whole grid
        frozen = np.zeros((len(seq.search_index), seq.tokens.shape[1]))
    else:
        frozen = seq.frozen.copy()
    frozen[seq.search_index[dropped]] = seq.tokens.data[b3 + dropped]
    rows = np.concatenate([np.arange(b3), b3 + kept])
    return replace(
        seq,
        tokens=tape.index(seq.tokens, rows),
        boundaries=(b0, b1, b2, b3, b3 + len(kept)),
        search_index=seq.search_index[kept],
        frozen=frozen,
    )


def channel_relevance(f_rgb, f_tir, w_rgb, w_tir, tape: Tape | None = None) -> Tensor:
    """``S = (F_B W_B)^T (F_R W_R)``, a ``C × C`` cross-modal relevance matrix.

    Raises
    ------
    DimensionError
        If the two modalities hold different token counts.
    """
    tape = tape if tape is not None else Tape(enabled=False)
    f_rgb, f_tir = as_tensor(f_rgb), as_tensor(f_tir)
    if f_rgb.shape != f_tir.shape:
        msg = f"channel_relevance: token matrices {f_rgb.shape} and {f_tir.shape} differ"
        raise DimensionError(msg)
    left = tape.matmul(f_rgb, w_rgb)
    right = tape.matmul(f_tir, w_tir)
    return tape.matmul(tape.transpose(left), right)


def plan_exchange(relevance, sigma: float) -> ExchangePlan:
    """Pick the ``round(sigma * C)`` channels with the largest row-mean of S.

    Ties rank the lower channel first; halves round up.
    """
    if not 0.0 <= sigma <= 1.0:
        msg = f"sigma must be in [0, 1], got {sigma}"
        raise ValueError(msg)
    s = relevance.data if isinstance(relevance, Tensor) else np.asarray(relevance, dtype=float)
    importance = s.mean(axis=1)
    count = int(math.floor(sigma * len(importance) + 0.5))
    order = np.argsort(-importance, kind="stable")
    return ExchangePlan(channel_indices=np.sort(order[:count]), sigma=sigma)


def exchange_channels(f_rgb, f_tir, plan: ExchangePlan, tape: Tape | None = None):
    """Swap the planned columns between the two token matrices.

    Raises
    ------
    ValueError
        If a planned channel is outside the token width.
    """
    tape = tape if tape is not None else Tape(enabled=False)
    f_rgb, f_tir = as_tensor(f_rgb), as_tensor(f_tir)
    if f_rgb.shape != f_tir.shape:
        msg = f"exchange_channels: shapes {f_rgb.shape} and {f_tir.shape} differ"
        raise DimensionError(msg)
    c = f_rgb.shape[-1]
    idx = np.asarray(plan.channel_indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= c or len(np.unique(idx)) != idx.size):
        msg = f"exchange plan {idx.tolist()} is not a set of distinct channels below {c}"
        raise ValueError(msg)
    mask = np.zeros(c, dtype=bool)
    mask[idx] = True
    return tape.where(mask, f_tir, f_rgb), tape.where(mask, f_rgb, f_tir)


def fuse_modalities(f_rgb, f_tir, params: Mapping[str, Tensor], layer: int, tape: Tape):
    """Residual position-wise MLP over the token-concatenated modalities."""
    f_rgb, f_tir = as_tensor(f_rgb), as_tensor(f_tir)
    if f_rgb.shape != f_tir.shape:
        msg = f"fuse_modalities: shapes {f_rgb.shape} and {f_tir.shape} differ"
        raise DimensionError(msg)
    pre = f"fusion.layer{layer}.mlp"
    joint = tape.concat([f_rgb, f_tir], axis=0)
    mixed = tape.mlp2(
        joint, params[f"{pre}.w1"], params[f"{pre}.b1"], params[f"{pre}.w2"], params[f"{pre}.b2"]
    )
    out = tape.add(joint, mixed)
    n = f_rgb.shape[0]
    return tape.index(out, slice(0, n)), tape.index(out, slice(n, 2 * n))


class AdaptiveFusion:
    """Encoder hook running the four fusion steps at the configured layers.

    Parameters
    ----------
    params : mapping of name -> Tensor
    cfg : TrackerConfig
    tape : Tape
    """

    def __init__(self, params: Mapping[str, Tensor], cfg: TrackerConfig, tape: Tape):
        self.params = params
        self.cfg = cfg
        self.tape = tape
        self.records: list[FusionRecord] = []

    def __call__(
        self,
        layer: int,
        rgb: TokenSequence,
        tir: TokenSequence,
        attn_rgb: AttentionRecord,
        attn_tir: AttentionRecord,
    ) -> tuple[TokenSequence, TokenSequence]:
        enc, tape = self.cfg.encoder, self.tape
        if layer in enc.selection_layers:
            grid = enc.template_grid
            terms = self.cfg.score_terms
            s_rgb = score_search_tokens(
                attn_rgb.mean, rgb.boundaries, template_grid=grid, terms=terms
            )
            s_tir = score_search_tokens(
                attn_tir.mean, tir.boundaries, template_grid=grid, terms=terms
            )
            selection = select_tokens(s_rgb.total + s_tir.total, self.cfg.gamma)
            rgb = prune_search(rgb, selection.kept_indices, tape)
            tir = prune_search(tir, selection.kept_indices, tape)

        pre = f"fusion.layer{layer}"
        # The plan is a discrete decision; relevance is computed off-tape.
        relevance = channel_relevance(
            rgb.tokens.data,
            tir.tokens.data,
            self.params[f"{pre}.w_rgb"].data,
            self.params[f"{pre}.w_tir"].data,
        )
        plan = plan_exchange(relevance, self.cfg.sigma)
        x_rgb, x_tir = exchange_channels(rgb.tokens, tir.tokens, plan, tape)
        x_rgb, x_tir = fuse_modalities(x_rgb, x_tir, self.params, layer, tape)
        self.records.append(
            FusionRecord(layer=layer, kept=rgb.num_search, exchanged=plan.channel_indices.tolist())
        )
        return rgb.with_tokens(x_rgb), tir.with_tokens(x_tir)
