"""Context-aware reasoning: text-feature memory and temporal reasoning tokens.

Per modality the tracker keeps a small :class:`KnowledgeBase` of text
features. A feature is stored only when it is not too similar to anything
already stored; when the base is full the oldest entry goes. Each frame the
current text feature retrieves its top-k neighbours, which refine the search
tokens by cross-attention. The reasoning token for the next frame is built
from pooled reasoning, text and template tokens and then attends to the
refined search tokens, whose rows are finally rescaled by a logistic
per-token gate.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from thermotrack.config import TEMPORAL_MODES, EncoderConfig, TrackerConfig
from thermotrack.numeric import (
    DegenerateVectorError,
    DimensionError,
    Tape,
    Tensor,
    as_tensor,
    cosine_similarity,
)
from thermotrack.params import uniform_fan_in

GATE_SQUASH = "logistic"


@dataclass(frozen=True)
class KBEntry:
    """One stored text feature.

    Attributes
    ----------
    vector : Tensor
        The feature, shape ``(C,)``.
    inserted_at : int
        Frame index of insertion.
    serial : int
        Insertion counter; larger is newer.
    """

    vector: Tensor
    inserted_at: int
    serial: int


@dataclass
class InsertDecision:
    inserted: bool
    evicted: KBEntry | None = None
    max_similarity: float | None = None


@dataclass
class RetrievalResult:
    """Top-k entries, most similar first (newer first on ties)."""

    features: list[Tensor] = field(default_factory=list)
    similarities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frames: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)


class KnowledgeBase:
    """Bounded FIFO store of text features gated by cosine similarity.

    Parameters
    ----------
    capacity : int
        Maximum number of entries (n).
    threshold : float
        A feature is inserted only if its maximum cosine similarity to the
        stored entries is strictly below this value (lambda).
    """

    def __init__(self, capacity: int = 4, threshold: float = 1.0):
        if capacity < 1:
            msg = f"knowledge base capacity must be >= 1, got {capacity}"
            raise ValueError(msg)
        self.capacity = capacity
        self.threshold = threshold
        self._entries: list[KBEntry] = []
        self._serial = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[KBEntry, ...]:
        """Snapshot of the entries, oldest first."""
        with self._lock:
            return tuple(self._entries)

    def insert(self, feature, frame: int = 0) -> InsertDecision:
        """Store ``feature`` unless a stored entry is at least lambda-similar.

        Raises
        ------
        DegenerateVectorError
            If ``feature`` has zero norm.
        """
        feature = as_tensor(feature)
        if not np.any(feature.data):
            msg = "cannot insert a zero-norm feature"
            raise DegenerateVectorError(msg)
        with self._lock:
            sims = [cosine_similarity(feature, e.vector) for e in self._entries]
            best = max(sims) if sims else None
            if best is not None and best >= self.threshold:
                return InsertDecision(inserted=False, max_similarity=best)
            evicted = self._entries.pop(0) if len(self._entries) >= self.capacity else None
            self._entries.append(KBEntry(feature, inserted_at=frame, serial=self._serial))
            self._serial += 1
            return InsertDecision(inserted=True, evicted=evicted, max_similarity=best)

    def retrieve(self, query, k: int) -> RetrievalResult:
        """Return the ``min(k, len(self))`` entries most similar to ``query``."""
        if k < 1:
            msg = f"k must be >= 1, got {k}"
            raise ValueError(msg)
        entries = self.entries
        if not entries:
            return RetrievalResult()
        sims = np.array([cosine_similarity(query, e.vector) for e in entries])
        serials = np.array([e.serial for e in entries])
        order = np.lexsort((-serials, -sims))[:k]
        return RetrievalResult(
            features=[entries[i].vector for i in order],
            similarities=sims[order],
            frames=[entries[i].inserted_at for i in order],
        )

    def dump(self) -> list[dict]:
        """JSON-ready list of ``{inserted_at_frame, vector}``, oldest first."""
        return [
            {"inserted_at_frame": e.inserted_at, "vector": e.vector.data.tolist()}
            for e in self.entries
        ]


def init_params(cfg: TrackerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    enc = cfg.encoder
    c, hidden = enc.channels, enc.mlp_ratio * enc.channels
    p = {}
    for name in ("wq", "wk", "wv"):
        p[f"crm.refine.{name}"] = uniform_fan_in(rng, (c, c), c)
    p["crm.guide.w1"] = uniform_fan_in(rng, (3 * c, hidden), 3 * c)
    p["crm.guide.b1"] = np.zeros(hidden)
    p["crm.guide.w2"] = uniform_fan_in(rng, (hidden, enc.num_reasoning * c), hidden)
    p["crm.guide.b2"] = np.zeros(enc.num_reasoning * c)
    for name in ("wq", "wk", "wv"):
        p[f"crm.temporal.{name}"] = uniform_fan_in(rng, (c, c), c)
    p["crm.temporal.mlp.w1"] = uniform_fan_in(rng, (c, hidden), c)
    p["crm.temporal.mlp.b1"] = np.zeros(hidden)
    p["crm.temporal.mlp.w2"] = uniform_fan_in(rng, (hidden, c), hidden)
    p["crm.temporal.mlp.b2"] = np.zeros(c)
    for modality in ("rgb", "tir"):
        p[f"crm.kb_proj.{modality}"] = uniform_fan_in(rng, (c, c), c)
    return p


def kb_feature(text: Tensor, modality: str, params: Mapping[str, Tensor], tape: Tape) -> Tensor:
    """Modality-specific knowledge-base feature ``(C,)`` of encoded text tokens."""
    pooled = tape.matmul(tape.mean_pool_tokens(text), params[f"crm.kb_proj.{modality}"])
    return tape.reshape(pooled, (pooled.shape[1],))


def cross_attention(queries, keys, wq, wk, wv, tape: Tape) -> Tensor:
    """Single-head ``softmax(Q K^T / sqrt(C)) V`` with projected Q, K, V."""
    queries, keys = as_tensor(queries), as_tensor(keys)
    if queries.shape[-1] != keys.shape[-1]:
        msg = f"cross_attention: query width {queries.shape} vs key width {keys.shape}"
        raise DimensionError(msg)
    q = tape.matmul(queries, wq)
    k = tape.matmul(keys, wk)
    v = tape.matmul(keys, wv)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return tape.matmul(tape.softmax_rows(scores), v)


def refine_search(
    x_hat,
    retrieved: RetrievalResult,
    params: Mapping[str, Tensor],
    tape: Tape,
) -> Tensor:
    """``X_bar = X_hat + CrossAttn(X_hat, V)``; identity when nothing was retrieved."""
    x_hat = as_tensor(x_hat)
    if len(retrieved) == 0:
        return x_hat
    c = x_hat.shape[-1]
    rows = [tape.reshape(as_tensor(f), (1, -1)) for f in retrieved.features]
    if any(r.shape[1] != c for r in rows):
        msg = f"retrieved feature widths {[r.shape for r in rows]} do not match {c}"
        raise DimensionError(msg)
    values = rows[0] if len(rows) == 1 else tape.concat(rows, axis=0)
    wq, wk, wv = (params[f"crm.refine.{k}"] for k in ("wq", "wk", "wv"))
    attended = cross_attention(x_hat, values, wq, wk, wv, tape)
    return tape.add(x_hat, attended)


def propagate_reasoning(
    reasoning,
    text,
    template,
    params: Mapping[str, Tensor],
    enc: EncoderConfig,
    tape: Tape,
) -> Tensor:
    """Next-frame reasoning tokens from pooled reasoning, text and template tokens.

    ``text=None`` gives the text-free variant: the pooled text slot is zero.
    """
    reasoning, template = as_tensor(reasoning), as_tensor(template)
    if text is None:
        text = Tensor(np.zeros((1, reasoning.shape[-1])))
    parts = [reasoning, as_tensor(text), template]
    if len({p.shape[-1] for p in parts}) != 1:
        msg = f"propagate_reasoning: widths {[p.shape for p in parts]} differ"
        raise DimensionError(msg)
    pooled = tape.concat([tape.mean_pool_tokens(p) for p in parts], axis=1)
    hidden = tape.gelu(tape.linear(pooled, params["crm.guide.w1"], params["crm.guide.b1"]))
    out = tape.linear(hidden, params["crm.guide.w2"], params["crm.guide.b2"])
    return tape.reshape(out, (enc.num_reasoning, enc.channels))


def temporal_gate(x_bar, r_tilde, tape: Tape) -> tuple[Tensor, np.ndarray]:
    """Rescale each search token by ``sigmoid(mean_r(X_bar R^T) / sqrt(C))``.

    Returns the gated tokens and the gate values (one per token, in (0, 1)).
    """
    x_bar, r_tilde = as_tensor(x_bar), as_tensor(r_tilde)
    if x_bar.shape[-1] != r_tilde.shape[-1]:
        msg = f"temporal_gate: widths {x_bar.shape} and {r_tilde.shape} differ"
        raise DimensionError(msg)
    scores = tape.matmul(x_bar, tape.transpose(r_tilde))
    scores = tape.scale(scores, 1.0 / np.sqrt(x_bar.shape[-1]))
    gate = tape.sigmoid(tape.mean(scores, axis=1, keepdims=True))
    return tape.mul(gate, x_bar), gate.data.ravel().copy()


@dataclass
class TemporalResult:
    """Output of :func:`temporal_augment`.

    ``refined`` is R tilde, which only shapes the search update. ``reasoning``
    is the propagated token the next frame starts from.
    """

    reasoning: Tensor
    refined: Tensor
    search: Tensor
    gate: np.ndarray


def temporal_augment(
    r_next,
    x_bar,
    params: Mapping[str, Tensor],
    tape: Tape,
    mode: str = "gate",
) -> TemporalResult:
    """Three steps: attend R to X_bar, residual MLP on R, gate X_bar with R.

    ``mode="add"`` replaces the gate by adding the pooled refined token to
    every search token; ``gate`` is then all ones.
    """
    if mode not in TEMPORAL_MODES:
        msg = f"temporal mode must be one of {TEMPORAL_MODES}, got {mode!r}"
        raise ValueError(msg)
    r_next, x_bar = as_tensor(r_next), as_tensor(x_bar)
    attended = cross_attention(
        r_next,
        x_bar,
        params["crm.temporal.wq"],
        params["crm.temporal.wk"],
        params["crm.temporal.wv"],
        tape,
    )
    r_hat = tape.add(r_next, attended)
    pre = "crm.temporal.mlp"
    r_tilde = tape.add(
        r_hat,
        tape.mlp2(r_hat, *(params[f"{pre}.{k}"] for k in ("w1", "b1", "w2", "b2"))),
    )
    if mode == "add":
        x_tilde = tape.add(x_bar, tape.mean_pool_tokens(r_tilde))
        gate = np.ones(x_bar.shape[0])
    else:
        x_tilde, gate = temporal_gate(x_bar, r_tilde, tape)
    return TemporalResult(reasoning=r_next, refined=r_tilde, search=x_tilde, gate=gate)
