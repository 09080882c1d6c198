"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from thermotrack.numeric.tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    """Outcome of :func:`check_gradients`.

    Attributes
    ----------
    max_rel_error : float
        Largest relative error seen over all checked coordinates.
    worst : tuple[str, tuple[int, ...]] or None
        Parameter name and coordinate of the largest error.
    n_checked : int
        Number of checked coordinates.
    errors : dict[str, float]
        Largest relative error per parameter.
    """

    max_rel_error: float = 0.0
    worst: tuple[str, tuple[int, ...]] | None = None
    n_checked: int = 0
    errors: dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_rel_error <= tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[Tape], Tensor],
    params: Mapping[str, Tensor],
    *,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    Parameters
    ----------
    loss_fn : callable
        Builds a scalar loss on the tape it is given. Must be deterministic.
    params : mapping of name -> Tensor
        Leaves to check. Their ``grad`` is overwritten.
    h : float
        Finite-difference step.
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per parameter
        (all coordinates when None).
    seed : int
        Seed for the coordinate sample.
    floor : float
        Denominator floor of the relative error.

    Returns
    -------
    GradcheckReport
    """
    for p in params.values():
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, p in params.items():
        flat = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        worst_here = 0.0
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            saved = p.data[idx]
            p.data[idx] = saved + h
            f_plus = loss_fn(Tape(enabled=False)).item()
            p.data[idx] = saved - h
            f_minus = loss_fn(Tape(enabled=False)).item()
            p.data[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = relative_error(float(analytic[name][idx]), numeric, floor)
            report.n_checked += 1
            worst_here = max(worst_here, err)
            if report.worst is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, tuple(int(i) for i in idx))
        report.errors[name] = worst_here
    return report
