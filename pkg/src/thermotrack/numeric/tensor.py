"""Dense double-precision tensors with an explicit reverse-mode tape.

Every differentiable operation is a method of :class:`Tape`. A tape records
the operations executed through it, in order, and :meth:`Tape.backward`
walks that record in strict reverse order. There is no global graph: a
forward pass that should be differentiated gets its own ``Tape()``, and a
pass that should not (inference, finite differences) uses
``Tape(enabled=False)``, which runs the same arithmetic without recording.

Usage::

    from thermotrack.numeric import Tape, Tensor

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    tape = Tape()
    loss = tape.sum(tape.matmul(x, w))
    tape.backward(loss)
    w.grad  # d(loss)/dw

Leaf tensors (``requires_grad=True`` and not produced by a tape) accumulate
gradients additively across backward passes until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class TapeError(RuntimeError):
    """Backward pass requested on something the tape cannot differentiate."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector where a direction is required."""


class Tensor:
    """An n-dimensional float64 array that can take part in a tape.

    Attributes
    ----------
    data : np.ndarray
        Row-major float64 values.
    requires_grad : bool
        Whether gradients flow to (leaf) or through (intermediate) this tensor.
    grad : np.ndarray or None
        Accumulated gradient, same shape as ``data``. Only leaves keep one.
    name : str or None
        Optional label, used by parameter stores and error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        # no copy: ops hand over freshly allocated arrays
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def detach(self) -> Tensor:
        """Return a copy that no tape will differentiate through."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Parameters
    ----------
    enabled : bool
        When False, operations compute values but record nothing; outputs
        never require gradients.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    # ------------------------------------------------------------------
    # recording

    def _record(
        self,
        data: np.ndarray,
        parents: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> Tensor:
        needs_grad = self.enabled and any(p.requires_grad for p in parents)
        out = Tensor._wrap(data, needs_grad)
        if needs_grad:
            if self._consumed:
                msg = "tape already consumed by backward(); start a new Tape"
                raise TapeError(msg)
            self._nodes.append(_Node(out, parents, backward))
            self._produced.add(id(out))
        return out

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(·) to every leaf that requires gradients.

        Raises
        ------
        TapeError
            If ``loss`` is not a scalar, was not produced by this tape, or
            the tape has already been consumed.
        """
        if self._consumed:
            msg = "backward() called twice on the same tape without reset"
            raise TapeError(msg)
        if loss.size != 1:
            msg = f"loss must be a scalar, got shape {loss.shape}"
            raise TapeError(msg)
        if id(loss) not in self._produced:
            msg = "loss is detached: it was not produced by a recorded operation on this tape"
            raise TapeError(msg)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self._produced:
                    grads[key] = grads[key] + pg if key in grads else pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
        self._consumed = True

    def reset(self) -> None:
        """Forget all recorded operations so the tape can be reused."""
        self._nodes.clear()
        self._produced.clear()
        self._consumed = False

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def add(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
        )

    def div(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        out = a.data / b.data
        return self._record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g / b.data, sa), _unbroadcast(-g * out / b.data, sb)),
        )

    def neg(self, a) -> Tensor:
        a = as_tensor(a)
        return self._record(-a.data, (a,), lambda g: (-g,))

    def scale(self, a, factor: float) -> Tensor:
        a = as_tensor(a)
        return self._record(a.data * factor, (a,), lambda g: (g * factor,))

    def power(self, a, exponent: float) -> Tensor:
        a = as_tensor(a)
        return self._record(
            a.data**exponent,
            (a,),
            lambda g: (g * exponent * a.data ** (exponent - 1),),
        )

    def exp(self, a) -> Tensor:
        a = as_tensor(a)
        out = np.exp(a.data)
        return self._record(out, (a,), lambda g: (g * out,))

    def log(self, a) -> Tensor:
        a = as_tensor(a)
        return self._record(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self, a) -> Tensor:
        a = as_tensor(a)
        out = np.sqrt(a.data)
        return self._record(out, (a,), lambda g: (g * 0.5 / out,))

    def abs(self, a) -> Tensor:
        a = as_tensor(a)
        return self._record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def sigmoid(self, a) -> Tensor:
        a = as_tensor(a)
        x = a.data
        # split by sign so neither branch overflows exp()
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._record(out, (a,), lambda g: (g * out * (1.0 - out),))

    def relu(self, a) -> Tensor:
        a = as_tensor(a)
        mask = a.data > 0
        return self._record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

    def gelu(self, a) -> Tensor:
        """Exact (erf-based) Gaussian error linear unit."""
        a = as_tensor(a)
        x = a.data
        cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return self._record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))

    def maximum(self, a, b) -> Tensor:
        """Elementwise max; ties send the gradient to ``a``."""
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        pick_a = a.data >= b.data
        return self._record(
            np.where(pick_a, a.data, b.data),
            (a, b),
            lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
        )

    def minimum(self, a, b) -> Tensor:
        """Elementwise min; ties send the gradient to ``a``."""
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        pick_a = a.data <= b.data
        return self._record(
            np.where(pick_a, a.data, b.data),
            (a, b),
            lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
        )

    def clip(self, a, lo: float, hi: float) -> Tensor:
        a = as_tensor(a)
        inside = (a.data >= lo) & (a.data <= hi)
        return self._record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))

    def where(self, mask, a, b) -> Tensor:
        """Pick ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
        a, b = as_tensor(a), as_tensor(b)
        mask = np.asarray(mask, dtype=bool)
        sa, sb = a.shape, b.shape
        return self._record(
            np.where(mask, a.data, b.data),
            (a, b),
            lambda g: (
                _unbroadcast(np.where(mask, g, 0.0), sa),
                _unbroadcast(np.where(mask, 0.0, g), sb),
            ),
        )

    # ------------------------------------------------------------------
    # reductions

    def sum(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = as_tensor(a)
        shape = a.shape

        def _back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _back)

    def mean(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = as_tensor(a)
        if axis is None:
            count = a.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([a.shape[ax] for ax in axes]))
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    # ------------------------------------------------------------------
    # shape plumbing

    def reshape(self, a, shape) -> Tensor:
        a = as_tensor(a)
        old = a.shape
        return self._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, a, axes=None) -> Tensor:
        a = as_tensor(a)
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._record(
            np.ascontiguousarray(a.data.transpose(axes)),
            (a,),
            lambda g: (g.transpose(inverse),),
        )

    def concat(self, tensors: Sequence, axis: int = 0) -> Tensor:
        parts = tuple(as_tensor(t) for t in tensors)
        if not parts:
            msg = "concat needs at least one tensor"
            raise DimensionError(msg)
        ref = list(parts[0].shape)
        for p in parts[1:]:
            other = list(p.shape)
            if len(other) != len(ref) or any(
                x != y for i, (x, y) in enumerate(zip(ref, other)) if i != axis % len(ref)
            ):
                msg = f"concat along axis {axis}: shapes {parts[0].shape} and {p.shape} disagree"
                raise DimensionError(msg)
        splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
        return self._record(
            np.concatenate([p.data for p in parts], axis=axis),
            parts,
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )

    def index(self, a, key) -> Tensor:
        """Basic or advanced indexing, ``a.data[key]``, with a scatter-add gradient."""
        a = as_tensor(a)
        shape = a.shape

        def _back(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        return self._record(np.array(a.data[key]), (a,), _back)

    def scatter_rows(self, base: np.ndarray, values, rows) -> Tensor:
        """Copy of constant ``base`` with ``values`` written into ``rows``."""
        values = as_tensor(values)
        rows = np.asarray(rows, dtype=np.intp)
        if values.shape[1:] != base.shape[1:] or values.shape[0] != rows.shape[0]:
            msg = (
                f"scatter_rows: {values.shape[0]} rows of width {values.shape[1:]} "
                f"do not fit base {base.shape} at {rows.shape[0]} positions"
            )
            raise DimensionError(msg)
        out = np.array(base, dtype=np.float64)
        out[rows] = values.data
        return self._record(out, (values,), lambda g: (g[rows],))

    # ------------------------------------------------------------------
    # linear algebra and neural-network primitives

    def matmul(self, a, b) -> Tensor:
        """Matrix product; leading (batch) extents must agree exactly."""
        a, b = as_tensor(a), as_tensor(b)
        if (
            a.ndim < 2
            or a.ndim != b.ndim
            or a.shape[-1] != b.shape[-2]
            or a.shape[:-2] != b.shape[:-2]
        ):
            msg = f"matmul: cannot multiply shapes {a.shape} and {b.shape}"
            raise DimensionError(msg)
        return self._record(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
        )

    def softmax_rows(self, a) -> Tensor:
        """Softmax over the last axis, stabilized by subtracting the row max."""
        a = as_tensor(a)
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def _back(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._record(out, (a,), _back)

    def layer_norm(self, a, gain, bias, eps: float = 1e-5) -> Tensor:
        """Normalize over the last axis to zero mean / unit variance, then affine."""
        a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
        width = a.shape[-1]
        if gain.shape != (width,) or bias.shape != (width,):
            msg = f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {width}"
            raise DimensionError(msg)
        centered = a.data - a.data.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * inv_std
        lead = tuple(range(a.ndim - 1))

        def _back(g):
            dxhat = g * gain.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return self._record(xhat * gain.data + bias.data, (a, gain, bias), _back)

    def linear(self, a, weight, bias=None) -> Tensor:
        """``a @ weight + bias`` for 2-D ``a``."""
        out = self.matmul(a, weight)
        return out if bias is None else self.add(out, bias)

    def mlp2(self, a, w1, b1, w2, b2) -> Tensor:
        """Two-layer perceptron ``GELU(a·w1 + b1)·w2 + b2`` over the last axis."""
        a = as_tensor(a)
        w1, w2 = as_tensor(w1), as_tensor(w2)
        width = a.shape[-1]
        if w1.shape[0] != width or w2.shape[0] != w1.shape[1] or w2.shape[1] != width:
            msg = f"mlp2: input width {width} does not chain through {w1.shape} and {w2.shape}"
            raise DimensionError(msg)
        flat = a if a.ndim == 2 else self.reshape(a, (-1, width))
        hidden = self.gelu(self.linear(flat, w1, b1))
        out = self.linear(hidden, w2, b2)
        return out if a.ndim == 2 else self.reshape(out, a.shape)

    def mean_pool_tokens(self, a) -> Tensor:
        """Mean over the token (first) axis, keeping a 1×C row."""
        a = as_tensor(a)
        if a.ndim != 2 or a.shape[0] == 0:
            msg = f"mean_pool_tokens: need a non-empty N×C matrix, got shape {a.shape}"
            raise ValueError(msg)
        return self.mean(a, axis=0, keepdims=True)

    def conv2d(self, x, weight, bias=None, padding: int = 0) -> Tensor:
        """Stride-1 2-D convolution of one ``Cin×H×W`` map with ``Cout×Cin×k×k`` filters."""
        x, weight = as_tensor(x), as_tensor(weight)
        cin, h, w = x.shape
        cout, wcin, kh, kw = weight.shape
        if wcin != cin:
            msg = f"conv2d: input {x.shape} has {cin} channels, filters expect {wcin}"
            raise DimensionError(msg)
        padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
        oh, ow = padded.shape[1] - kh + 1, padded.shape[2] - kw + 1
        # (cin, oh, ow, kh, kw) -> (cin*kh*kw, oh*ow)
        cols = (
            sliding_window_view(padded, (kh, kw), axis=(1, 2))
            .transpose(0, 3, 4, 1, 2)
            .reshape(cin * kh * kw, oh * ow)
        )
        wmat = weight.data.reshape(cout, -1)
        out = (wmat @ cols).reshape(cout, oh, ow)
        parents: tuple[Tensor, ...] = (x, weight)
        if bias is not None:
            bias = as_tensor(bias)
            out = out + bias.data[:, None, None]
            parents = (x, weight, bias)

        def _back(g):
            g2 = g.reshape(cout, oh * ow)
            dw = (g2 @ cols.T).reshape(weight.shape)
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, oh, ow)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i : i + oh, j : j + ow] += dcols[:, i, j]
            dx = dpad[:, padding : padding + h, padding : padding + w]
            grads = [dx, dw]
            if bias is not None:
                grads.append(g.sum(axis=(1, 2)))
            return grads

        return self._record(out, parents, _back)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises
    ------
    DegenerateVectorError
        If either vector has zero norm.
    """
    a = np.ravel(u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64))
    b = np.ravel(v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
    if a.shape != b.shape:
        msg = f"cosine_similarity: shapes {a.shape} and {b.shape} differ"
        raise DimensionError(msg)
    saa, sbb = a @ a, b @ b
    if saa == 0.0 or sbb == 0.0:
        msg = "cosine_similarity of a zero-norm vector is undefined"
        raise DegenerateVectorError(msg)
    # sqrt(fl(s * s)) == s, so a vector against itself gives exactly 1
    return float(np.clip(a @ b / np.sqrt(saa * sbb), -1.0, 1.0))
