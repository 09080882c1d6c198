"""One tracking forward pass: tokens -> encoder with fusion -> reasoning -> head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from thermotrack.config import TrackerConfig
from thermotrack.model.crm import (
    KnowledgeBase,
    RetrievalResult,
    kb_feature,
    propagate_reasoning,
    refine_search,
    temporal_augment,
)
from thermotrack.model.encoder import (
    SEGMENTS,
    Modality,
    build_sequence,
    encode_text,
    forward_encoder,
    patch_embed,
)
from thermotrack.model.fusion import AdaptiveFusion, FusionRecord
from thermotrack.model.head import HoleFill, PredictionMaps, head_forward
from thermotrack.numeric import Tape, Tensor
from thermotrack.params import ParameterStore

MODALITIES = (Modality.RGB.value, Modality.TIR.value)


@dataclass
class FrameInputs:
    """Template and search crops (``3×E×E``, values in [0, 1]) of both modalities."""

    template_rgb: np.ndarray
    template_tir: np.ndarray
    search_rgb: np.ndarray
    search_tir: np.ndarray

    def pair(self, modality: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"template_{modality}"), getattr(self, f"search_{modality}")


@dataclass
class ForwardResult:
    maps: PredictionMaps
    reasoning: dict[str, Tensor]
    tokens_kept: int
    fusion: list[FusionRecord] = field(default_factory=list)
    gates: dict[str, np.ndarray] = field(default_factory=dict)
    retrieved: dict[str, int] = field(default_factory=dict)


class TrackerNet:
    """Parameters plus config, with the per-frame forward pass.

    Parameters
    ----------
    params : ParameterStore
    cfg : TrackerConfig
    """

    def __init__(self, params: ParameterStore, cfg: TrackerConfig):
        self.params = params
        self.cfg = cfg

    def initial_reasoning(self) -> dict[str, Tensor]:
        init = self.params["reasoning.init"]
        return {m: init for m in MODALITIES}

    def new_memory(self) -> dict[str, KnowledgeBase]:
        return {m: KnowledgeBase(self.cfg.kb_size, self.cfg.kb_threshold) for m in MODALITIES}

    def encode_text(self, description: str, tape: Tape) -> Tensor:
        return encode_text(description, self.params, self.cfg.encoder, tape)

    def text_features(self, text: Tensor, tape: Tape) -> dict[str, Tensor]:
        """Knowledge-base feature of ``text`` for each modality."""
        return {m: kb_feature(text, m, self.params, tape) for m in MODALITIES}

    def forward(
        self,
        inputs: FrameInputs,
        text: Tensor,
        reasoning: dict[str, Tensor],
        tape: Tape,
        *,
        memory: dict[str, KnowledgeBase] | None = None,
        query: dict[str, Tensor] | None = None,
        training: bool = False,
    ) -> ForwardResult:
        """Run one frame.

        Parameters
        ----------
        inputs : FrameInputs
        text : Tensor
            Encoded description, ``N_h × C``.
        reasoning : dict
            Reasoning tokens per modality, ``N_r × C``.
        tape : Tape
        memory : dict, optional
            Knowledge base per modality; retrieval is skipped when None.
        query : dict, optional
            Retrieval query per modality; defaults to the features of ``text``.
        training : bool
            Batch statistics in the head (and running-statistic updates).
        """
        enc, params = self.cfg.encoder, self.params
        seqs = {}
        for m in MODALITIES:
            template, search = inputs.pair(m)
            z = patch_embed(template, enc.patch, params, tape, kind="template")
            x = patch_embed(search, enc.patch, params, tape, kind="search")
            seqs[m] = build_sequence(reasoning[m], text, z, x, tape, modality=m)

        cfg = self.cfg
        hook = AdaptiveFusion(params, cfg, tape) if cfg.use_fusion else None
        out = forward_encoder(seqs["rgb"], seqs["tir"], params, enc, tape, hook)
        final = {"rgb": out.rgb, "tir": out.tir}

        use_memory = memory is not None and cfg.use_crm and cfg.crm_text
        if use_memory and query is None:
            query = self.text_features(text, tape)
        searched, carried, gates, retrieved = {}, {}, {}, {}
        for m in MODALITIES:
            r, h, z, x = (final[m].segment(name, tape) for name in SEGMENTS)
            if not cfg.use_crm:
                searched[m], carried[m] = x, reasoning[m]
                gates[m], retrieved[m] = np.ones(x.shape[0]), 0
                continue
            hits = RetrievalResult()
            if use_memory:
                hits = memory[m].retrieve(query[m], cfg.top_k)
            x_bar = refine_search(x, hits, params, tape)
            r_next = propagate_reasoning(r, h if cfg.crm_text else None, z, params, enc, tape)
            temporal = temporal_augment(r_next, x_bar, params, tape, mode=cfg.temporal_mode)
            searched[m], carried[m] = temporal.search, temporal.reasoning
            gates[m], retrieved[m] = temporal.gate, len(hits)

        maps = head_forward(
            searched["rgb"],
            searched["tir"],
            HoleFill(out.rgb.search_index, out.rgb.frozen),
            HoleFill(out.tir.search_index, out.tir.frozen),
            params,
            params.buffers,
            enc,
            tape,
            training=training,
            momentum=cfg.bn_momentum,
        )
        return ForwardResult(
            maps=maps,
            reasoning=carried,
            tokens_kept=out.rgb.num_search,
            fusion=hook.records if hook is not None else [],
            gates=gates,
            retrieved=retrieved,
        )
