"""Named parameter tensors, seeded initialization and npz checkpoints.

A checkpoint is a single ``.npz`` archive holding every parameter under
``param/<name>``, every non-trainable buffer (batch-norm running statistics)
under ``buffer/<name>`` and a ``__format__`` version entry. The tracker
config is written next to it as a JSON sidecar with the same stem.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from thermotrack.config import TrackerConfig
from thermotrack.numeric import Tensor

CHECKPOINT_FORMAT = 1


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Symmetric uniform init with bound 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Ordered mapping of parameter name to trainable :class:`Tensor`.

    Parameters
    ----------
    arrays : dict[str, np.ndarray]
        Initial values; each becomes a leaf tensor with ``requires_grad``.
    buffers : dict[str, np.ndarray], optional
        Non-trainable state saved alongside the parameters.
    """

    def __init__(
        self,
        arrays: dict[str, np.ndarray] | None = None,
        buffers: dict[str, np.ndarray] | None = None,
    ):
        self._tensors: dict[str, Tensor] = {}
        for name, value in (arrays or {}).items():
            self._tensors[name] = Tensor(value, requires_grad=True, name=name)
        self.buffers: dict[str, np.ndarray] = {
            k: np.array(v, dtype=np.float64) for k, v in (buffers or {}).items()
        }

    @classmethod
    def initialize(cls, cfg: TrackerConfig, seed: int | None = None) -> ParameterStore:
        """Create every model parameter for ``cfg`` from one seeded generator."""
        from thermotrack.model import crm, encoder, fusion, head

        cfg.validate()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        arrays: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        for module in (encoder, fusion, crm, head):
            arrays.update(module.init_params(cfg, rng))
        buffers.update(head.init_buffers(cfg))
        return cls(arrays, buffers)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            msg = f"unknown parameter {name!r}"
            raise KeyError(msg) from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def copy(self) -> ParameterStore:
        return ParameterStore(self.snapshot(), {k: v.copy() for k, v in self.buffers.items()})

    def save(self, path: str | Path, cfg: TrackerConfig | None = None) -> Path:
        """Write the checkpoint (and the config sidecar when ``cfg`` is given)."""
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {f"param/{k}": t.data for k, t in self._tensors.items()}
        payload.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        payload["__format__"] = np.array(CHECKPOINT_FORMAT)
        with path.open("wb") as fh:
            np.savez(fh, **payload)
        if cfg is not None:
            path.with_suffix(".json").write_text(cfg.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> tuple[ParameterStore, TrackerConfig | None]:
        """Read a checkpoint and, when present, its config sidecar.

        Raises
        ------
        FileNotFoundError
            If the checkpoint does not exist.
        ValueError
            If the archive has an unsupported format version.
        """
        path = Path(path)
        if not path.exists():
            msg = f"checkpoint not found: {path}"
            raise FileNotFoundError(msg)
        with np.load(path) as archive:
            version = int(archive["__format__"]) if "__format__" in archive else -1
            if version != CHECKPOINT_FORMAT:
                msg = f"{path}: unsupported checkpoint format {version}"
                raise ValueError(msg)
            arrays = {k[6:]: archive[k] for k in archive.files if k.startswith("param/")}
            buffers = {k[7:]: archive[k] for k in archive.files if k.startswith("buffer/")}
        sidecar = path.with_suffix(".json")
        cfg = None
        if sidecar.exists():
            cfg = TrackerConfig.from_dict(json.loads(sidecar.read_text()))
        return cls(arrays, buffers), cfg
