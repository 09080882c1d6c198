"""Target-description providers.

A provider turns (frame, box, prompt) into a short description of the
tracked object. :class:`MockProvider` answers from the synthetic generator's
ground-truth attributes and is fully deterministic. :class:`RemoteProvider`
posts the frame to an HTTP endpoint speaking a small JSON protocol::

    POST {"image": <base64 PNG>, "bbox": [x, y, w, h], "prompt": "..."}
    200  {"description": "..."}

Provider failures never stop tracking: :func:`generate_description` reports
them and hands back the previous description.
"""

from __future__ import annotations

import base64
import io
import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

MAX_WORDS = 20

GENERATION_PROMPT = (
    "Describe the object located in the image at <box> ({x}, {y}, {x2}, {y2}) </box>. "
    "Focus on distinctive visual features, motion patterns, and key identifiers to "
    "distinguish it from background elements and distractors. Keep the description in a "
    "continuous sentence under 20 words. Avoid mentioning bounding boxes or coordinates. "
    "Do not use parentheses for explanations."
)

REFINEMENT_PROMPT = (
    "Correcting the textual description of the tracking object. Ensure the final output is "
    "a continuous sentence under 20 words, logically coherent, does not mention bounding "
    "boxes, or coordinates terms, and does not use parentheses for explanations. Do not "
    "introduce new details. Output only the integrated description without any additional "
    "text. Textual description: {description}"
)


class ProviderError(RuntimeError):
    """A provider could not produce a description."""


@dataclass(frozen=True)
class FrameRef:
    """A frame handed to a provider.

    Attributes
    ----------
    index : int
        Frame number within its sequence.
    image : np.ndarray
        ``3×E×E`` RGB values in [0, 1].
    """

    index: int
    image: np.ndarray


class DescriptionProvider(Protocol):
    def describe(self, frame: FrameRef, bbox: tuple[int, int, int, int], prompt: str) -> str: ...


def format_prompt(bbox: Sequence[float]) -> str:
    """Fill the generation prompt with corner coordinates of an ``x, y, w, h`` box."""
    x, y, w, h = (int(round(v)) for v in bbox)
    return GENERATION_PROMPT.format(x=x, y=y, x2=x + w, y2=y + h)


def clip_words(text: str, limit: int = MAX_WORDS) -> str:
    return " ".join(text.split()[:limit])


class MockProvider:
    """Answers with the ground-truth description of the requested frame.

    Parameters
    ----------
    descriptions : sequence of str
        Per-frame ground-truth strings, as produced by the synthetic generator.
    fail_on : iterable of int, optional
        Frame indices for which :meth:`describe` raises, to exercise the
        failure path.
    """

    def __init__(self, descriptions: Sequence[str], fail_on: Sequence[int] = ()):
        self.descriptions = list(descriptions)
        self.fail_on = frozenset(fail_on)
        self.calls: list[int] = []

    def describe(self, frame: FrameRef, bbox: tuple[int, int, int, int], prompt: str) -> str:
        self.calls.append(frame.index)
        if frame.index in self.fail_on or not 0 <= frame.index < len(self.descriptions):
            msg = f"mock provider has no description for frame {frame.index}"
            raise ProviderError(msg)
        return self.descriptions[frame.index]


def encode_png(image: np.ndarray) -> str:
    """Base64 PNG of a ``3×E×E`` float image in [0, 1]."""
    pixels = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteProvider:
    """Client for an HTTP description service.

    Parameters
    ----------
    endpoint : str
        URL accepting the JSON POST described in the module docstring.
    timeout : float
        Seconds before a request counts as failed.
    refine : bool
        Send the answer back once more with :data:`REFINEMENT_PROMPT`.
    """

    def __init__(self, endpoint: str, timeout: float = 2.0, refine: bool = False):
        self.endpoint = endpoint
        self.timeout = timeout
        self.refine = refine

    def _post(self, payload: dict) -> str:
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            msg = f"description request to {self.endpoint} failed: {exc}"
            raise ProviderError(msg) from exc
        text = body.get("description") if isinstance(body, dict) else None
        if not isinstance(text, str) or not text.strip():
            msg = f"{self.endpoint} returned no description"
            raise ProviderError(msg)
        return text

    def describe(self, frame: FrameRef, bbox: tuple[int, int, int, int], prompt: str) -> str:
        payload = {
            "image": encode_png(frame.image),
            "bbox": [int(v) for v in bbox],
            "prompt": prompt,
        }
        text = self._post(payload)
        if self.refine:
            payload["prompt"] = REFINEMENT_PROMPT.format(description=text)
            text = self._post(payload)
        return text


@dataclass
class DescriptionResult:
    text: str
    ok: bool
    error: str | None = None


def generate_description(
    provider: DescriptionProvider,
    frame: FrameRef,
    bbox: Sequence[float],
    previous: str = "",
) -> DescriptionResult:
    """Ask ``provider`` to describe the object in ``bbox`` (pixels, ``x, y, w, h``).

    On any provider failure the previous description comes back with
    ``ok=False`` and the error message.

    Raises
    ------
    ValueError
        If ``bbox`` does not lie within the frame.
    """
    x, y, w, h = (float(v) for v in bbox)
    height, width = frame.image.shape[1:]
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        msg = f"bbox {tuple(bbox)} is not within the {width}x{height} frame"
        raise ValueError(msg)
    box = tuple(int(round(v)) for v in (x, y, w, h))
    try:
        text = provider.describe(frame, box, format_prompt(box))
    except Exception as exc:  # noqa: BLE001
        return DescriptionResult(text=previous, ok=False, error=str(exc))
    return DescriptionResult(text=clip_words(text), ok=True)
