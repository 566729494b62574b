"""AdamW with decoupled weight decay, global-norm clipping and warmup + cosine schedule."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "OptimState":
        state = cls(**hyper)
        state.m = {name: np.zeros_like(p) for name, p in params.items()}
        state.v = {name: np.zeros_like(p) for name, p in params.items()}
        return state

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> dict[str, np.ndarray]:
    """One decoupled-decay Adam step; returns new parameter arrays and advances ``state`` in place.

    ``theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)``
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}", module="optim")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter group {name}", module="optim")
    b1, b2 = state.betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    updated = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = theta
            continue
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {theta.shape}", module="optim")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(theta.dtype), v.astype(theta.dtype)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = (theta - lr * state.weight_decay * theta - lr * step).astype(theta.dtype)
    state.step = t
    return updated


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, norm


def lr_schedule(step: int, total_steps: int, peak: float, floor: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over ``warmup_frac`` of the run, then cosine decay to ``min(floor, peak)``."""
    floor = min(floor, peak)
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    t = min(max(step - warmup, 0), span)
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * t / span))
