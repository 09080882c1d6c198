"""JSON-lines run logs.

A tracking run log is one JSON object per line:

- ``{"type": "header", ...}``: sequence name, seed, config and the
  recorded design choices (fusion step order, gate squashing)
- ``{"type": "frame", ...}``: one per processed frame
- ``{"type": "event", ...}``: reference updates and provider failures
- ``{"type": "summary", ...}``: PR, SR, NPR, MPR, MSR

Keys are sorted and no timestamps are written, so identical runs give
byte-identical files. Training logs use the same writer with one
``{"type": "step", ...}`` record per optimizer step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from thermotrack.harness.metrics import MetricSummary, summarize

RUNLOG_FORMAT = 1


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(_clean(r), sort_keys=True) + "\n" for r in records)


def write_jsonl(records: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_jsonl(records))
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        msg = f"log not found: {path}"
        raise FileNotFoundError(msg)
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class RunLog:
    """Frame records, events and the metric summary of one tracking run."""

    header: dict = field(default_factory=dict)
    frames: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def predictions(self) -> np.ndarray:
        return np.array([f["pred"] for f in self.frames], dtype=float)

    def ground_truth(self) -> np.ndarray:
        return np.array([f["gt"] for f in self.frames], dtype=float)

    def ground_truth_alt(self) -> np.ndarray | None:
        if not self.frames or self.frames[0].get("gt_alt") is None:
            return None
        return np.array([f["gt_alt"] for f in self.frames], dtype=float)

    def compute_summary(
        self, pr_threshold: float = 20.0, npr_threshold: float = 0.2
    ) -> MetricSummary:
        """Recompute the metrics from the frame records."""
        return summarize(
            self.predictions(),
            self.ground_truth(),
            self.ground_truth_alt(),
            pr_threshold=pr_threshold,
            npr_threshold=npr_threshold,
        )

    def to_frame(self) -> pd.DataFrame:
        """Frame records as a table, one row per frame."""
        df = pd.DataFrame(self.frames)
        if "type" in df:
            df = df.drop(columns="type")
        return df.set_index("frame") if "frame" in df else df

    def records(self) -> list[dict]:
        out = [{"type": "header", "format": RUNLOG_FORMAT, **self.header}]
        out += [{"type": "frame", **f} for f in self.frames]
        out += [{"type": "event", **e} for e in self.events]
        out.append({"type": "summary", **self.summary})
        return out

    def dumps(self) -> str:
        return dumps_jsonl(self.records())

    def write(self, path: str | Path) -> Path:
        return write_jsonl(self.records(), path)

    @classmethod
    def read(cls, path: str | Path) -> RunLog:
        log = cls()
        for rec in read_jsonl(path):
            kind = rec.pop("type", None)
            if kind == "header":
                rec.pop("format", None)
                log.header = rec
            elif kind == "frame":
                log.frames.append(rec)
            elif kind == "event":
                log.events.append(rec)
            elif kind == "summary":
                log.summary = rec
        if not log.frames:
            msg = f"{path}: run log holds no frame records"
            raise ValueError(msg)
        return log
