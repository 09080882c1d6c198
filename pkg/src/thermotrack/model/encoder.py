"""Unified visual-language token encoder.

Each modality is turned into one token sequence laid out as
``[reasoning; text; template; search]`` and run through the same stack of
transformer layers (the RGB and TIR branches share every weight). A layer
computes::

    F_hat   = MHSA(F)
    F_tilde = F + LN(delta1 * F_hat)
    F_out   = F_tilde + LN(delta2 * MLP(F_tilde))

with per-layer learnable scalars ``delta1``/``delta2``. The layer norm sits on
the scaled branch rather than in front of it.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from thermotrack.config import ConfigError, EncoderConfig, TrackerConfig
from thermotrack.numeric import DimensionError, Tape, Tensor
from thermotrack.params import uniform, uniform_fan_in

PREFIX_HEAD = "A sequence of a"
PREFIX_TAIL = "object:"
SEGMENTS = ("reasoning", "text", "template", "search")

_WORD = re.compile(r"[^\W_]+")


class Modality(str, Enum):
    RGB = "rgb"
    TIR = "tir"


@dataclass
class TokenSequence:
    """Token matrix of one modality with its segment boundaries.

    Attributes
    ----------
    tokens : Tensor
        ``(N_r + N_h + N_z + N_x) × C``.
    boundaries : tuple[int, int, int, int, int]
        Offsets ``(0, r, r+h, r+h+z, total)`` of the four segments.
    modality : Modality
    search_index : np.ndarray
        Original grid position of every live search token, increasing.
    frozen : np.ndarray or None
        ``grid² × C`` values of discarded search tokens, frozen at the moment
        they were discarded (zero rows where nothing was discarded).
    """

    tokens: Tensor
    boundaries: tuple[int, int, int, int, int]
    modality: Modality
    search_index: np.ndarray
    frozen: np.ndarray | None = None

    @property
    def num_tokens(self) -> int:
        return self.boundaries[-1]

    @property
    def num_search(self) -> int:
        return self.boundaries[4] - self.boundaries[3]

    def slice(self, name: str) -> slice:
        k = SEGMENTS.index(name)
        return slice(self.boundaries[k], self.boundaries[k + 1])

    def segment(self, name: str, tape: Tape) -> Tensor:
        """Extract one segment of ``tokens`` as a tape-tracked tensor."""
        return tape.index(self.tokens, self.slice(name))

    def with_tokens(self, tokens: Tensor) -> TokenSequence:
        if tokens.shape[0] != self.num_tokens:
            msg = f"replacement tokens {tokens.shape} do not match {self.num_tokens} tokens"
            raise DimensionError(msg)
        return replace(self, tokens=tokens)


@dataclass
class AttentionRecord:
    """Post-softmax attention of one layer, ``heads × N × N``."""

    weights: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        """Head-averaged ``N × N`` weights; rows stay on the simplex."""
        return self.weights.mean(axis=0)


@dataclass
class EncoderOutput:
    rgb: TokenSequence
    tir: TokenSequence
    attention: list[tuple[AttentionRecord, AttentionRecord]] = field(default_factory=list)


FusionHook = Callable[
    [int, TokenSequence, TokenSequence, AttentionRecord, AttentionRecord],
    tuple[TokenSequence, TokenSequence],
]


def init_params(cfg: TrackerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    enc = cfg.encoder
    c, hidden = enc.channels, enc.mlp_ratio * enc.channels
    patch_in = 3 * enc.patch * enc.patch
    p = {
        "encoder.patch.w": uniform_fan_in(rng, (patch_in, c), patch_in),
        "encoder.patch.b": np.zeros(c),
        "encoder.pos.template": uniform(rng, (enc.num_template, c), 0.1),
        "encoder.pos.search": uniform(rng, (enc.num_search, c), 0.1),
        "text.embed": uniform(rng, (enc.vocab_size, c), 0.5),
        "text.prefix": uniform(rng, (enc.prefix_len, c), 0.5),
        "text.proj.w": uniform_fan_in(rng, (c, enc.num_text * c), c),
        "text.proj.b": np.zeros(enc.num_text * c),
        "reasoning.init": uniform(rng, (enc.num_reasoning, c), 0.5),
    }
    for layer in range(1, enc.layers + 1):
        pre = f"encoder.layer{layer}"
        p[f"{pre}.qkv.w"] = uniform_fan_in(rng, (c, 3 * c), c)
        p[f"{pre}.qkv.b"] = np.zeros(3 * c)
        p[f"{pre}.proj.w"] = uniform_fan_in(rng, (c, c), c)
        p[f"{pre}.proj.b"] = np.zeros(c)
        p[f"{pre}.ln1.g"] = np.ones(c)
        p[f"{pre}.ln1.b"] = np.zeros(c)
        p[f"{pre}.ln2.g"] = np.ones(c)
        p[f"{pre}.ln2.b"] = np.zeros(c)
        p[f"{pre}.mlp.w1"] = uniform_fan_in(rng, (c, hidden), c)
        p[f"{pre}.mlp.b1"] = np.zeros(hidden)
        p[f"{pre}.mlp.w2"] = uniform_fan_in(rng, (hidden, c), hidden)
        p[f"{pre}.mlp.b2"] = np.zeros(c)
        p[f"{pre}.delta1"] = np.ones(1)
        p[f"{pre}.delta2"] = np.ones(1)
    return p


def patch_embed(
    image: np.ndarray,
    patch: int,
    params: Mapping[str, Tensor],
    tape: Tape,
    *,
    kind: str = "search",
) -> Tensor:
    """Project non-overlapping patches of a ``3×E×E`` image to tokens.

    Tokens come out in row-major order over the patch grid and carry the
    learned positional embedding of ``kind`` ("template" or "search").

    Raises
    ------
    ConfigError
        If the image edge is not divisible by ``patch``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        msg = f"patch_embed expects a 3×E×E image, got {image.shape}"
        raise DimensionError(msg)
    edge = image.shape[1]
    if edge % patch:
        msg = f"image edge {edge} is not divisible by patch {patch}"
        raise ConfigError(msg)
    g = edge // patch
    blocks = image.reshape(3, g, patch, g, patch).transpose(1, 3, 0, 2, 4)
    patches = blocks.reshape(g * g, 3 * patch * patch)
    pos = params[f"encoder.pos.{kind}"]
    if pos.shape[0] != g * g:
        msg = f"{kind} positional table has {pos.shape[0]} rows, image gives {g * g} patches"
        raise DimensionError(msg)
    tokens = tape.linear(Tensor(patches), params["encoder.patch.w"], params["encoder.patch.b"])
    return tape.add(tokens, pos)


def tokenize(description: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _WORD.findall(description.lower())


def word_ids(words: Sequence[str], vocab_size: int) -> np.ndarray:
    return np.array([zlib.crc32(w.encode("utf-8")) % vocab_size for w in words], dtype=np.intp)


def encode_text(
    description: str,
    params: Mapping[str, Tensor],
    enc: EncoderConfig,
    tape: Tape,
) -> Tensor:
    """Encode a description into ``N_h × C`` text tokens.

    The learnable prefix tokens, the fixed prefix words and the description
    words are mean-pooled together and linearly projected, so the result is
    a pure function of (words multiset, parameters). An empty description
    leaves only the prefix.
    """
    words = tokenize(PREFIX_HEAD) + tokenize(description) + tokenize(PREFIX_TAIL)
    # sorted ids make the pooled sum independent of word order
    ids = np.sort(word_ids(words, enc.vocab_size))
    embedded = tape.index(params["text.embed"], ids)
    rows = [embedded] if enc.prefix_len == 0 else [params["text.prefix"], embedded]
    pooled = tape.mean_pool_tokens(tape.concat(rows, axis=0))
    projected = tape.linear(pooled, params["text.proj.w"], params["text.proj.b"])
    return tape.reshape(projected, (enc.num_text, enc.channels))


def build_sequence(
    reasoning: Tensor,
    text: Tensor,
    template: Tensor,
    search: Tensor,
    tape: Tape,
    modality: Modality = Modality.RGB,
) -> TokenSequence:
    """Concatenate ``[R; H; Z; X]`` and record the segment boundaries.

    Raises
    ------
    DimensionError
        If the segment widths disagree.
    ValueError
        If the search segment is empty.
    """
    parts = (reasoning, text, template, search)
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1 or any(p.ndim != 2 for p in parts):
        msg = f"segment shapes {[p.shape for p in parts]} do not share one width"
        raise DimensionError(msg)
    if search.shape[0] == 0:
        msg = "search segment is empty"
        raise ValueError(msg)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    return TokenSequence(
        tokens=tape.concat(parts, axis=0),
        boundaries=tuple(int(o) for o in offsets),
        modality=Modality(modality),
        search_index=np.arange(search.shape[0]),
    )


def encoder_layer(
    seq: TokenSequence,
    params: Mapping[str, Tensor],
    layer: int,
    enc: EncoderConfig,
    tape: Tape,
) -> tuple[TokenSequence, AttentionRecord]:
    """Run one shared transformer layer (1-based ``layer``) over ``seq``."""
    pre = f"encoder.layer{layer}"
    x = seq.tokens
    n, c = x.shape
    heads, d = enc.heads, c // enc.heads

    qkv = tape.linear(x, params[f"{pre}.qkv.w"], params[f"{pre}.qkv.b"])
    # (N, 3C) -> (3, heads, N, d)
    qkv = tape.transpose(tape.reshape(qkv, (n, 3, heads, d)), (1, 2, 0, 3))
    q, k, v = (tape.index(qkv, i) for i in range(3))
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    attn = tape.softmax_rows(scores)
    mixed = tape.reshape(tape.transpose(tape.matmul(attn, v), (1, 0, 2)), (n, c))
    f_hat = tape.linear(mixed, params[f"{pre}.proj.w"], params[f"{pre}.proj.b"])

    branch = tape.mul(f_hat, params[f"{pre}.delta1"])
    f_tilde = tape.add(
        x, tape.layer_norm(branch, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], enc.ln_eps)
    )
    mlp = tape.mlp2(
        f_tilde,
        params[f"{pre}.mlp.w1"],
        params[f"{pre}.mlp.b1"],
        params[f"{pre}.mlp.w2"],
        params[f"{pre}.mlp.b2"],
    )
    branch = tape.mul(mlp, params[f"{pre}.delta2"])
    normed = tape.layer_norm(branch, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], enc.ln_eps)
    out = tape.add(f_tilde, normed)
    return seq.with_tokens(out), AttentionRecord(attn.data)


def forward_encoder(
    rgb: TokenSequence,
    tir: TokenSequence,
    params: Mapping[str, Tensor],
    enc: EncoderConfig,
    tape: Tape,
    hook: FusionHook | None = None,
) -> EncoderOutput:
    """Run both modalities through the shared layers.

    ``hook`` is called after every layer listed in ``enc.fusion_layers`` with
    that layer's index, outputs and attention records, and returns the
    (possibly pruned and mixed) sequences the next layer consumes.
    """
    attention = []
    for layer in range(1, enc.layers + 1):
        rgb, attn_rgb = encoder_layer(rgb, params, layer, enc, tape)
        tir, attn_tir = encoder_layer(tir, params, layer, enc, tape)
        attention.append((attn_rgb, attn_tir))
        if hook is not None and layer in enc.fusion_layers:
            rgb, tir = hook(layer, rgb, tir, attn_rgb, attn_tir)
    return EncoderOutput(rgb, tir, attention)
