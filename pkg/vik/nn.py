"""Layer plumbing: gradient tapes, parameter containers and small dense layers.

Every layer exposes ``forward(x) -> (y, GradTape)`` and
``backward(tape, dy) -> (dx, grads)`` where ``grads`` maps dotted parameter
names (relative to the layer) to arrays shaped like the parameters.
"""

import contextvars
import copy
import functools
import logging
from collections.abc import Callable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .config import VIK_KAN_CHUNK, VIK_THREADS
from .errors import ConfigError, DimensionError, ShapeError, UsageError

logger = logging.getLogger(__name__)

_pool: ThreadPoolExecutor | None = None


def _executor() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=VIK_THREADS, thread_name_prefix="vik")
    return _pool


def map_chunks(fn: Callable[[int, int], object], total: int, chunk: int = VIK_KAN_CHUNK) -> list:
    """Run ``fn(start, stop)`` over consecutive spans; results come back in span order."""
    spans = [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
    if len(spans) <= 1 or VIK_THREADS <= 1:
        return [fn(a, b) for a, b in spans]
    # workers run in copies of the caller's context, counter included
    contexts = [contextvars.copy_context() for _ in spans]
    return list(_executor().map(lambda ctx, span: ctx.run(fn, *span), contexts, spans))


class GradTape:
    """Activations saved by one forward call, consumed once by the matching backward."""

    __slots__ = ("op", "out_shape", "saved", "_spent")

    def __init__(self, op: str, out_shape: tuple[int, ...], **saved):
        self.op = op
        self.out_shape = tuple(out_shape)
        self.saved = saved
        self._spent = False

    def consume(self, op: str) -> dict:
        if op != self.op:
            raise UsageError(f"tape recorded by {self.op!r} replayed into {op!r}", module="grad")
        if self._spent:
            raise UsageError(f"tape for {op!r} was already consumed", module="grad")
        self._spent = True
        return self.saved


def uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def prefixed(prefix: str, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": g for name, g in grads.items()}


class Module:
    """Owns named parameters and named child layers."""

    component: str | None = None

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, "Module"] = {}

    @property
    def op(self) -> str:
        return type(self).__name__

    @property
    def dtype(self) -> np.dtype:
        for _, value in self.named_parameters():
            return value.dtype
        return np.dtype(np.float32)

    def _slots(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for key in self.params:
            yield prefix + key, self, key
        for name, child in self.children.items():
            yield from child._slots(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for full, owner, key in self._slots():
            yield full, owner.params[key]

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(value.size for _, value in self.named_parameters())

    def set_parameters(self, values: Mapping[str, np.ndarray], strict: bool = True) -> None:
        slots = {full: (owner, key) for full, owner, key in self._slots()}
        unknown = set(values) - set(slots)
        if unknown:
            raise ConfigError(f"unknown parameters: {sorted(unknown)[:5]}", module="nn")
        if strict and set(values) != set(slots):
            missing = sorted(set(slots) - set(values))
            raise ConfigError(f"missing parameters: {missing[:5]}", module="nn")
        for full, value in values.items():
            owner, key = slots[full]
            current = owner.params[key]
            if value.shape != current.shape:
                raise DimensionError(f"{full}: expected shape {current.shape}, got {value.shape}", module="nn")
            owner.params[key] = np.ascontiguousarray(value, dtype=current.dtype)

    def astype(self, dtype) -> "Module":
        clone = copy.deepcopy(self)
        for _, owner, key in clone._slots():
            owner.params[key] = np.ascontiguousarray(owner.params[key], dtype=dtype)
        return clone

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.named_parameters()}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
        raise NotImplementedError

    def backward(self, tape: GradTape, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward(x)
        return y


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, bias: bool = True,
                 component: str | None = None, dtype=np.float32):
        super().__init__()
        self.component = component
        bound = 1 / np.sqrt(d_in)
        self.params["weight"] = uniform(rng, bound, (d_in, d_out), dtype)
        if bias:
            self.params["bias"] = uniform(rng, bound, (d_out,), dtype)

    def forward(self, x):
        with T.charged_to(self.component):
            y = T.linear(x, self.params["weight"], self.params.get("bias"))
        return y, GradTape(self.op, y.shape, x=x)

    def backward(self, tape, dy):
        x = tape.consume(self.op)["x"]
        dx, dw, db = T.linear_backward(x, self.params["weight"], dy)
        grads = {"weight": dw}
        if "bias" in self.params:
            grads["bias"] = db
        return dx, grads


class LayerNorm(Module):
    """Layer norm over channels; ``channels_first`` handles [B, C, H, W] maps."""

    def __init__(self, channels: int, *, eps: float = 1e-5, channels_first: bool = False,
                 component: str | None = None, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.channels_first = channels_first
        self.component = component
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)

    def _to_last(self, x):
        return np.moveaxis(x, 1, -1) if self.channels_first else x

    def _from_last(self, x):
        return np.ascontiguousarray(np.moveaxis(x, -1, 1)) if self.channels_first else x

    def forward(self, x):
        with T.charged_to(self.component):
            normed = T.layer_norm(self._to_last(x), self.params["gamma"], self.params["beta"], self.eps)
        y = self._from_last(normed)
        return y, GradTape(self.op, y.shape, x=x)

    def backward(self, tape, dy):
        x = tape.consume(self.op)["x"]
        dx, dgamma, dbeta = T.layer_norm_backward(self._to_last(x), self.params["gamma"], self._to_last(dy), self.eps)
        return self._from_last(dx), {"gamma": dgamma, "beta": dbeta}


class Mlp(Module):
    """Two linear maps with a pointwise activation between them, on the last axis."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, *,
                 activation: str = "gelu", component: str | None = None, dtype=np.float32):
        super().__init__()
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {activation!r}", module="nn")
        self.activation = activation
        self.component = component
        self.children["fc1"] = Linear(d_in, d_hidden, rng, component=component, dtype=dtype)
        self.children["fc2"] = Linear(d_hidden, d_out, rng, component=component, dtype=dtype)

    def forward(self, x):
        with T.charged_to(self.component):
            h, t1 = self.children["fc1"].forward(x)
            a = T.gelu(h) if self.activation == "gelu" else T.relu(h)
            y, t2 = self.children["fc2"].forward(a)
        return y, GradTape(self.op, y.shape, h=h, t1=t1, t2=t2)

    def backward(self, tape, dy):
        saved = tape.consume(self.op)
        da, g2 = self.children["fc2"].backward(saved["t2"], dy)
        h = saved["h"]
        dh = T.gelu_backward(h, da) if self.activation == "gelu" else T.relu_backward(h, da)
        dx, g1 = self.children["fc1"].backward(saved["t1"], dh)
        return dx, {**prefixed("fc1", g1), **prefixed("fc2", g2)}


class PatchConv(Module):
    """Non-overlapping p x p convolution with stride p, followed by channel layer norm.

    Used for the stem (p = 4) and for the 2x2 downsampling between stages.
    """

    def __init__(self, c_in: int, c_out: int, patch: int, rng: np.random.Generator, *,
                 error: type[ConfigError] = ShapeError, component: str = "embed", dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.patch = c_in, c_out, patch
        self.error = error
        self.component = component
        self.children["proj"] = Linear(c_in * patch * patch, c_out, rng, component=component, dtype=dtype)
        self.children["norm"] = LayerNorm(c_out, component=component, dtype=dtype)

    def _patches(self, x):
        b, c, h, w = x.shape
        p = self.patch
        if c != self.c_in:
            raise DimensionError(f"expected {self.c_in} input channels, got {x.shape}", module="nn")
        if h % p or w % p:
            raise self.error(f"{h}x{w} input is not divisible by patch {p}", module="nn")
        cols = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return cols.reshape(b, h // p, w // p, c * p * p)

    def forward(self, x):
        cols = self._patches(x)
        z, t_proj = self.children["proj"].forward(cols)
        zn, t_norm = self.children["norm"].forward(z)
        y = np.ascontiguousarray(zn.transpose(0, 3, 1, 2))
        return y, GradTape(self.op, y.shape, in_shape=x.shape, t_proj=t_proj, t_norm=t_norm)

    def backward(self, tape, dy):
        saved = tape.consume(self.op)
        dzn = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))
        dz, g_norm = self.children["norm"].backward(saved["t_norm"], dzn)
        dcols, g_proj = self.children["proj"].backward(saved["t_proj"], dz)
        b, c, h, w = saved["in_shape"]
        p = self.patch
        dx = dcols.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)
        return np.ascontiguousarray(dx), {**prefixed("proj", g_proj), **prefixed("norm", g_norm)}


def sum_in_order(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Add per-chunk gradient dicts left to right."""
    return functools.reduce(lambda acc, g: {k: acc[k] + g[k] for k in acc}, parts[1:], dict(parts[0]))
