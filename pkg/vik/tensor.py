"""Dense-tensor primitives and their adjoints.

Tensors are plain ``numpy.ndarray`` values (float32 for training, float64 for
gradient checks). Every function here is pure: inputs are never written, and
the returned arrays are fresh. Products go through ``einsum`` with
``optimize=False`` so the accumulation order is fixed and does not depend on
BLAS threading; a result therefore never depends on where a row sits in a
batch.

Forward primitives also report the multiply-adds they execute to the active
:class:`OpCounter`, computed from the operand shapes they receive. Layers only
say which component the work is charged to (:func:`charged_to`).
"""

import contextlib
import math
import threading
from collections import Counter
from contextvars import ContextVar
from typing import Literal

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

Axis = Literal["horizontal", "vertical"]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

# multiply-adds per output element
NORM_COST = 4
GELU_COST = 1
POOL_COST = 1
BLEND_COST = 1

UNATTRIBUTED = "unattributed"


# --- op counting ---


class OpCounter(Counter):
    """Multiply-adds per component; safe to charge from the KAN worker threads."""

    def __init__(self):
        super().__init__()
        self._lock = threading.Lock()

    def charge(self, component: str, units: int) -> None:
        with self._lock:
            self[component] += int(units)


_counter: ContextVar[OpCounter | None] = ContextVar("vik_op_counter", default=None)
_component: ContextVar[str] = ContextVar("vik_op_component", default=UNATTRIBUTED)


@contextlib.contextmanager
def counting():
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def charged_to(component: str | None):
    """Charge primitives run inside the block to ``component``; ``None`` keeps the enclosing one."""
    if component is None:
        yield
        return
    token = _component.set(component)
    try:
        yield
    finally:
        _component.reset(token)


def charge(units: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.charge(_component.get(), units)


def einsum_units(spec: str, *operands: np.ndarray) -> int:
    """Product of every index extent in ``spec``: the multiply-adds of a plain contraction."""
    terms = spec.split("->")[0].split(",")
    spans = [op.ndim - len(term.replace("...", "")) for term, op in zip(terms, operands) if "..." in term]
    width = max(spans, default=0)
    hidden = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[:width]
    extents: dict[str, int] = {}
    for term, op in zip(terms, operands):
        if "..." in term:
            head, tail = term.split("...")
            span = op.ndim - len(head) - len(tail)
            term = head + hidden[width - span:] + tail
        for label, size in zip(term, op.shape):
            extents[label] = max(extents.get(label, 1), size)
    return math.prod(extents.values())


def ensure_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"{op} produced a non-finite value at index {tuple(int(i) for i in bad)}", module="tensor")
    return x


def einsum(spec: str, *operands: np.ndarray) -> np.ndarray:
    if _counter.get() is not None:
        charge(einsum_units(spec, *operands))
    return np.einsum(spec, *operands, optimize=False)


# --- matmul / linear ---


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul cannot multiply {a.shape} by {b.shape}", module="tensor")
    return ensure_finite(einsum("ik,kj->ij", a, b), "matmul")


def matmul_backward(a: np.ndarray, b: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return einsum("ij,kj->ik", dy, b), einsum("ik,ij->kj", a, dy)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Apply ``x @ weight + bias`` along the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear cannot map {x.shape} with weight {weight.shape}", module="tensor")
    y = einsum("...k,kn->...n", x, weight)
    if bias is not None:
        y = y + bias
    return ensure_finite(y, "linear")


def linear_backward(
    x: np.ndarray, weight: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = einsum("...n,kn->...k", dy, weight)
    rows_x = x.reshape(-1, x.shape[-1])
    rows_dy = dy.reshape(-1, dy.shape[-1])
    dw = einsum("tk,tn->kn", rows_x, rows_dy)
    db = rows_dy.sum(axis=0)
    return dx, dw, db


# --- softmax ---


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {v.shape})", module="tensor")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return ensure_finite(e / np.sum(e, axis=axis, keepdims=True), "softmax")


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# --- activations ---


def relu(x: np.ndarray) -> np.ndarray:
    # a comparison, not a multiply-add
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def gelu(x: np.ndarray) -> np.ndarray:
    charge(GELU_COST * x.size)
    # tanh form
    inner = _GELU_C * (x + _GELU_K * x**3)
    return 0.5 * x * (1 + np.tanh(inner))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1 + 3 * _GELU_K * x**2)
    return dy * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * d_inner)


# --- depthwise convolution along one axis ---


def _conv_axis(axis: Axis) -> int:
    if axis == "horizontal":
        return 3
    if axis == "vertical":
        return 2
    raise ConfigError(f"axis must be 'horizontal' or 'vertical', got {axis!r}", module="tensor")


def depthwise_conv_axis(x: np.ndarray, kernels: np.ndarray, axis: Axis) -> np.ndarray:
    """Per-channel 1-D cross-correlation along W (horizontal) or H (vertical).

    Zero padding of ``(k - 1) / 2`` keeps the output shape equal to the input.
    """
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv_axis expects [B,C,H,W], got {x.shape}", module="tensor")
    if kernels.ndim != 2 or kernels.shape[0] != x.shape[1]:
        raise DimensionError(
            f"kernels {kernels.shape} do not match {x.shape[1]} channels of {x.shape}", module="tensor"
        )
    k = kernels.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}", module="tensor")
    dim = _conv_axis(axis)
    pad = (k - 1) // 2
    widths = [(0, 0)] * 4
    widths[dim] = (pad, pad)
    xp = np.pad(x, widths)
    length = x.shape[dim]
    charge(k * x.size)
    out = np.zeros_like(x)
    for t in range(k):
        window = np.take(xp, np.arange(t, t + length), axis=dim)
        out = out + kernels[:, t][None, :, None, None] * window
    return ensure_finite(out, "depthwise_conv_axis")


def depthwise_conv_axis_backward(
    x: np.ndarray, kernels: np.ndarray, axis: Axis, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dim = _conv_axis(axis)
    k = kernels.shape[1]
    pad = (k - 1) // 2
    # adjoint of a zero-padded "same" correlation is the correlation with the flipped kernel
    dx = depthwise_conv_axis(dy, kernels[:, ::-1], axis)
    widths = [(0, 0)] * 4
    widths[dim] = (pad, pad)
    xp = np.pad(x, widths)
    length = x.shape[dim]
    dk = np.zeros_like(kernels)
    for t in range(k):
        window = np.take(xp, np.arange(t, t + length), axis=dim)
        dk[:, t] = einsum("bchw,bchw->c", dy, window)
    return dx, dk


# --- pooling ---


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool expects [B,C,H,W] with H,W >= 1, got {x.shape}", module="tensor")
    charge(POOL_COST * x.size)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(shape: tuple[int, ...], dy: np.ndarray) -> np.ndarray:
    h, w = shape[2], shape[3]
    return np.broadcast_to((dy / (h * w))[:, :, None, None], shape).copy()


def blend(weights: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image convex blend ``weights[:, 0] * a + weights[:, 1] * b`` of two [B, ...] maps."""
    if weights.shape != (a.shape[0], 2) or a.shape != b.shape:
        raise DimensionError(f"blend weights {weights.shape} do not fit maps {a.shape} and {b.shape}", module="tensor")
    charge(BLEND_COST * a.size)
    lead = (slice(None),) + (None,) * (a.ndim - 1)
    return weights[:, 0][lead] * a + weights[:, 1][lead] * b


# --- layer norm ---


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels", module="tensor"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}", module="tensor")
    charge(NORM_COST * x.size)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered / np.sqrt(var + eps)
    return ensure_finite(xhat * gamma + beta, "layer_norm")


def layer_norm_backward(
    x: np.ndarray, gamma: np.ndarray, dy: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = centered * inv
    flat_dy = dy.reshape(-1, c)
    dgamma = (flat_dy * xhat.reshape(-1, c)).sum(axis=0)
    dbeta = flat_dy.sum(axis=0)
    dxhat = dy * gamma
    dx = (inv / c) * (
        c * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta
