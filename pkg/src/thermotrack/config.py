"""Configuration dataclasses and loading.

Configs are plain dataclasses with defaults. A config file is either a JSON
object mirroring :meth:`TrackerConfig.to_dict` or a line-oriented
``key=value`` file where dotted keys reach nested sections::

    # desk.cfg
    gamma=0.7
    encoder.layers=4
    encoder.fusion_layers=2,4
    loss_weights.l1=5

Unknown keys are ignored with a warning. Two environment variables override
file values: ``THERMOTRACK_SEED`` (the seed) and ``THERMOTRACK_OUTPUT_DIR``
(default output directory of the CLI).
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

SCORE_TERMS = ("reasoning", "text", "template", "search")
TEMPORAL_MODES = ("gate", "add")


class ConfigError(ValueError):
    """Invalid configuration value."""


def default_output_dir() -> Path:
    return Path(os.environ.get("THERMOTRACK_OUTPUT_DIR", "runs"))


@dataclass
class EncoderConfig:
    """Token encoder geometry.

    Attributes
    ----------
    channels : int
        Token width C.
    layers : int
        Encoder depth L.
    heads : int
        Attention heads; must divide ``channels``.
    patch : int
        Patch edge in pixels.
    template_edge, search_edge : int
        Crop edges in pixels, both divisible by ``patch``.
    prefix_len : int
        Learnable prefix tokens pooled with the description words.
    num_reasoning, num_text : int
        Reasoning tokens N_r and text tokens N_h.
    mlp_ratio : int
        Hidden expansion of every two-layer MLP.
    vocab_size : int
        Rows of the hashed word-embedding table.
    fusion_layers : tuple[int, ...]
        1-based layers after which token fusion runs. Defaults to
        {L/4, L/2, 3L/4, L}.
    selection_layers : tuple[int, ...]
        Fusion layers that also prune search tokens. Defaults to the first
        fusion layer.
    head_stages : int
        3×3 Conv-BN-ReLU stages in the prediction head.
    """

    channels: int = 64
    layers: int = 8
    heads: int = 4
    patch: int = 8
    template_edge: int = 32
    search_edge: int = 64
    prefix_len: int = 2
    num_reasoning: int = 1
    num_text: int = 1
    mlp_ratio: int = 4
    vocab_size: int = 4096
    fusion_layers: tuple[int, ...] | None = None
    selection_layers: tuple[int, ...] | None = None
    head_stages: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.fusion_layers is None:
            quarters = (self.layers // 4, self.layers // 2, 3 * self.layers // 4, self.layers)
            self.fusion_layers = tuple(sorted({q for q in quarters if q >= 1}))
        else:
            self.fusion_layers = tuple(sorted(int(v) for v in self.fusion_layers))
        if self.selection_layers is None:
            self.selection_layers = self.fusion_layers[:1]
        else:
            self.selection_layers = tuple(sorted(int(v) for v in self.selection_layers))

    @property
    def grid(self) -> int:
        """Search feature-grid edge H_F = W_F."""
        return self.search_edge // self.patch

    @property
    def template_grid(self) -> int:
        return self.template_edge // self.patch

    @property
    def num_search(self) -> int:
        return self.grid * self.grid

    @property
    def num_template(self) -> int:
        return self.template_grid * self.template_grid

    def validate(self) -> None:
        for name in ("channels", "layers", "heads", "patch", "mlp_ratio"):
            if getattr(self, name) < 1:
                msg = f"encoder.{name} must be >= 1, got {getattr(self, name)}"
                raise ConfigError(msg)
        if self.prefix_len < 0:
            msg = f"encoder.prefix_len must be >= 0, got {self.prefix_len}"
            raise ConfigError(msg)
        if self.num_reasoning < 1 or self.num_text < 1:
            msg = "encoder.num_reasoning and encoder.num_text must be >= 1"
            raise ConfigError(msg)
        if self.channels % self.heads:
            msg = f"encoder.channels={self.channels} not divisible by heads={self.heads}"
            raise ConfigError(msg)
        for name in ("template_edge", "search_edge"):
            edge = getattr(self, name)
            if edge < self.patch or edge % self.patch:
                msg = f"encoder.{name}={edge} is not divisible by patch={self.patch}"
                raise ConfigError(msg)
        if not self.fusion_layers:
            msg = "encoder.fusion_layers must not be empty"
            raise ConfigError(msg)
        if any(not 1 <= v <= self.layers for v in self.fusion_layers):
            msg = f"encoder.fusion_layers {self.fusion_layers} outside 1..{self.layers}"
            raise ConfigError(msg)
        if not set(self.selection_layers) <= set(self.fusion_layers):
            msg = (
                f"encoder.selection_layers {self.selection_layers} must be a subset "
                f"of fusion_layers {self.fusion_layers}"
            )
            raise ConfigError(msg)
        if self.head_stages < 1:
            msg = "encoder.head_stages must be >= 1"
            raise ConfigError(msg)


@dataclass
class LossWeights:
    """Weights of the GIoU and L1 terms; the focal term has weight 1."""

    iou: float = 2.0
    l1: float = 5.0

    def validate(self) -> None:
        if self.iou < 0 or self.l1 < 0:
            msg = f"loss weights must be nonnegative, got iou={self.iou}, l1={self.l1}"
            raise ConfigError(msg)


@dataclass
class AugmentConfig:
    """Training-sample augmentations."""

    rotation_deg: float = 5.0
    translation: float = 0.2
    scale: float = 0.1
    grayscale_prob: float = 0.2
    max_frame_gap: int = 10


@dataclass
class TrackerConfig:
    """Everything a training or tracking run needs.

    The step size is 1e-3 because a desk run trains on single samples.

    Component switches
    ------------------
    use_fusion : bool
        Token selection and channel exchange inside the encoder. When off
        the modalities only meet in the head.
    use_crm : bool
        Knowledge-base refinement and reasoning propagation. When off the
        search tokens go straight to the head and the reasoning token is
        carried unchanged.
    crm_text : bool
        When off, reasoning runs without language: no knowledge-base
        retrieval and a zero text slot in the propagation.
    temporal_mode : str
        ``"gate"`` rescales search tokens by the reasoning gate; ``"add"``
        adds the refined reasoning token instead.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gamma: float = 0.85
    sigma: float = 0.5
    kb_size: int = 4
    top_k: int = 2
    kb_threshold: float = 1.0
    update_threshold: float = 0.65
    update_interval: int = 5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    train_steps: int = 300
    bn_momentum: float = 0.1
    search_factor: float = 2.0
    template_factor: float = 2.0
    score_terms: tuple[str, ...] = SCORE_TERMS
    text_mask_ratio: float = 0.0
    pr_threshold: float = 20.0
    npr_threshold: float = 0.2
    use_fusion: bool = True
    use_crm: bool = True
    crm_text: bool = True
    temporal_mode: str = "gate"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.score_terms = tuple(self.score_terms)

    def validate(self) -> TrackerConfig:
        """Raise :class:`ConfigError` on the first invalid value; return self."""
        self.encoder.validate()
        self.loss_weights.validate()
        if not 0.0 < self.gamma <= 1.0:
            msg = f"gamma must be in (0, 1], got {self.gamma}"
            raise ConfigError(msg)
        if not 0.0 <= self.sigma <= 1.0:
            msg = f"sigma must be in [0, 1], got {self.sigma}"
            raise ConfigError(msg)
        if self.kb_size < 1 or self.top_k < 1:
            msg = f"kb_size and top_k must be >= 1, got {self.kb_size}, {self.top_k}"
            raise ConfigError(msg)
        if self.update_interval < 1:
            msg = f"update_interval must be >= 1, got {self.update_interval}"
            raise ConfigError(msg)
        unknown = set(self.score_terms) - set(SCORE_TERMS)
        if unknown or not self.score_terms:
            msg = f"score_terms must be a nonempty subset of {SCORE_TERMS}, got {self.score_terms}"
            raise ConfigError(msg)
        if self.temporal_mode not in TEMPORAL_MODES:
            msg = f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}"
            raise ConfigError(msg)
        if not 0.0 <= self.text_mask_ratio <= 1.0:
            msg = f"text_mask_ratio must be in [0, 1], got {self.text_mask_ratio}"
            raise ConfigError(msg)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            msg = f"betas must be two values in [0, 1), got {self.betas}"
            raise ConfigError(msg)
        if self.search_factor <= 0 or self.template_factor <= 0:
            msg = "crop context factors must be positive"
            raise ConfigError(msg)
        return self

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrackerConfig:
        """Build a config from a (possibly partial) nested dict."""
        return _from_dict(cls, data, prefix="")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_NESTED = {"encoder": EncoderConfig, "loss_weights": LossWeights, "augment": AugmentConfig}


def _from_dict(cls, data: dict[str, Any], prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            warnings.warn(f"ignoring unknown config key {prefix}{key!r}", stacklevel=3)
            continue
        nested = _NESTED.get(key) if cls is TrackerConfig else None
        if nested is not None:
            if is_dataclass(value):
                kwargs[key] = value
            else:
                kwargs[key] = _from_dict(nested, dict(value), prefix=f"{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _parse_scalar(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_scalar(part) for part in text.split(",") if part.strip()]
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            value = cast(text)
        except ValueError:
            continue
        if isinstance(value, float) and not math.isfinite(value):
            break
        return value
    return text


def parse_key_values(text: str) -> dict[str, Any]:
    """Parse ``key=value`` lines into a nested dict (``#`` starts a comment)."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"line {lineno}: expected key=value, got {raw!r}"
            raise ConfigError(msg)
        key, value = (part.strip() for part in line.split("=", 1))
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        parsed = _parse_scalar(value)
        if key.endswith(("fusion_layers", "selection_layers", "score_terms", "betas")):
            parsed = parsed if isinstance(parsed, list) else [parsed]
        node[leaf] = parsed
    return out


def load_config(path: str | Path | None = None, *, env: bool = True) -> TrackerConfig:
    """Load and validate a config file, then apply environment overrides.

    Parameters
    ----------
    path : str or Path, optional
        JSON or ``key=value`` file. Defaults are used when None.
    env : bool
        Apply ``THERMOTRACK_SEED`` when set.

    Returns
    -------
    TrackerConfig
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            msg = f"config file not found: {path}"
            raise FileNotFoundError(msg)
        text = path.read_text()
        if text.lstrip().startswith("{"):
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                msg = f"{path}: invalid JSON ({exc})"
                raise ConfigError(msg) from exc
        else:
            data = parse_key_values(text)
    try:
        cfg = TrackerConfig.from_dict(data)
    except TypeError as exc:
        msg = f"invalid config structure: {exc}"
        raise ConfigError(msg) from exc
    if env and "THERMOTRACK_SEED" in os.environ:
        try:
            cfg.seed = int(os.environ["THERMOTRACK_SEED"])
        except ValueError as exc:
            msg = f"THERMOTRACK_SEED must be an integer, got {os.environ['THERMOTRACK_SEED']!r}"
            raise ConfigError(msg) from exc
    return cfg.validate()
