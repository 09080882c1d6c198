"""Dense float64 tensors, an explicit gradient tape and a finite-difference checker."""

from thermotrack.numeric.gradcheck import GradcheckReport, check_gradients, relative_error
from thermotrack.numeric.tensor import (
    DegenerateVectorError,
    DimensionError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    cosine_similarity,
)

__all__ = [
    "DegenerateVectorError",
    "DimensionError",
    "GradcheckReport",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "check_gradients",
    "cosine_similarity",
    "layer_norm",
    "matmul",
    "mean_pool_tokens",
    "mlp2",
    "relative_error",
    "softmax_rows",
]


def _tape(tape: Tape | None) -> Tape:
    return tape if tape is not None else Tape(enabled=False)


def matmul(a, b, tape: Tape | None = None) -> Tensor:
    return _tape(tape).matmul(a, b)


def softmax_rows(a, tape: Tape | None = None) -> Tensor:
    return _tape(tape).softmax_rows(a)


def layer_norm(a, gain, bias, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    return _tape(tape).layer_norm(a, gain, bias, eps)


def mlp2(a, w1, b1, w2, b2, tape: Tape | None = None) -> Tensor:
    return _tape(tape).mlp2(a, w1, b1, w2, b2)


def mean_pool_tokens(a, tape: Tape | None = None) -> Tensor:
    return _tape(tape).mean_pool_tokens(a)


def backward(loss: Tensor, tape: Tape) -> None:
    """Run ``tape.backward(loss)``."""
    tape.backward(loss)
