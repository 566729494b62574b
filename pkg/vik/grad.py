"""Backward dispatch and central-finite-difference certification of every layer.

Checks run on 64-bit copies of freshly initialised layers. Each layer check
contracts the layer output with a fixed random tensor R, so ``L = sum(y * R)``
and the upstream gradient is R itself; the full backbone check uses the
softmax cross-entropy loss instead.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel

from .config import BackboneConfig, BasisFamily, BasisKind, MixerConfig, StageConfig
from .errors import CheckFailure, ConfigError, DimensionError, NumericalError
from .nn import GradTape, LayerNorm, Linear, Mlp, Module, PatchConv

logger = logging.getLogger(__name__)

GRADCHECK_SEED = 0x71C
DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_ATOL = 1e-7
MAX_COORDS = 256

# parameters are jittered so broadcast initialisations (shared centers, unit gammas) do not hide index bugs
JITTER = 0.05

INPUT = "input"

LossAndGrad = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def backward(layer: Module, tape: GradTape, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run ``layer``'s backward pass after checking ``dy`` against the recorded output shape."""
    if tuple(dy.shape) != tape.out_shape:
        raise DimensionError(f"upstream gradient {dy.shape} does not match output {tape.out_shape}", module="grad")
    return layer.backward(tape, dy)


class GroupResult(BaseModel):
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    passed: bool


class GradCheckReport(BaseModel):
    scope: str
    eps: float
    tol: float
    atol: float
    groups: list[GroupResult] = []

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.passed]

    def to_table(self) -> str:
        width = max([len("group")] + [len(g.name) for g in self.groups])
        lines = [
            f"# scope={self.scope} eps={self.eps:g}*max(1,|theta|) tol={self.tol:g} atol={self.atol:g}",
            f"{'group':<{width}}  {'max_rel_err':>12}  {'n_checked':>9}  verdict",
        ]
        for g in self.groups:
            lines.append(f"{g.name:<{width}}  {g.max_rel_err:>12.3e}  {g.n_checked:>9d}  {'PASS' if g.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(
    loss_and_grad: LossAndGrad,
    params: dict[str, np.ndarray],
    *,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    atol: float = DEFAULT_ATOL,
    max_coords: int = MAX_COORDS,
    seed: int = GRADCHECK_SEED,
    scope: str = "custom",
    prefix: str = "",
) -> GradCheckReport:
    """Compare analytic gradients with ``(L(theta + e) - L(theta - e)) / 2e``, ``e = eps * max(1, |theta|)``.

    ``params`` is perturbed in place and restored. Groups larger than
    ``max_coords`` are sampled without replacement at ``seed``.
    """
    if eps <= 0:
        raise ConfigError(f"finite-difference epsilon must be positive, got {eps}", module="grad")
    _, analytic = loss_and_grad(params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(scope=scope, eps=eps, tol=tol, atol=atol)
    for name in sorted(params):
        theta = params[name]
        flat = theta.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        grad = np.asarray(analytic.get(name, np.zeros_like(theta))).reshape(-1)
        numeric = np.empty(coords.size)
        for k, idx in enumerate(coords):
            original = flat[idx]
            e = eps * max(1.0, abs(float(original)))
            flat[idx] = original + e
            up, _ = loss_and_grad(params)
            flat[idx] = original - e
            down, _ = loss_and_grad(params)
            flat[idx] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                coord = np.unravel_index(idx, theta.shape)
                raise NumericalError(f"non-finite loss perturbing {prefix}{name}{[int(i) for i in coord]}", module="grad")
            numeric[k] = (up - down) / (2 * e)
        a = grad[coords]
        abs_err = np.abs(a - numeric)
        rel = relative_error(a, numeric)
        ok = (rel < tol) | (abs_err < atol)
        report.groups.append(GroupResult(
            name=f"{prefix}{name}",
            max_rel_err=float(rel.max(initial=0.0)),
            max_abs_err=float(abs_err.max(initial=0.0)),
            n_checked=int(coords.size),
            passed=bool(ok.all()),
        ))
    return report


# --- layer checks ---


@dataclass
class LayerCase:
    layer: Module
    x: np.ndarray
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None


def _jitter(layer: Module, rng: np.random.Generator) -> Module:
    layer = layer.astype(np.float64)
    layer.set_parameters({
        name: value + JITTER * rng.standard_normal(value.shape) for name, value in layer.named_parameters()
    })
    return layer


def _layer_loss_and_grad(case: LayerCase, r: np.ndarray | None) -> LossAndGrad:
    layer = case.layer

    def fn(params):
        layer.set_parameters({k: v for k, v in params.items() if k != INPUT})
        y, tape = layer.forward(params[INPUT])
        if case.loss is None:
            loss, dy = float(np.sum(y * r)), r
        else:
            loss, dy = case.loss(y)
        dx, grads = backward(layer, tape, dy)
        return loss, {**grads, INPUT: dx}

    return fn


def _small_mixer(family: BasisFamily = BasisFamily.RBF, **changes) -> MixerConfig:
    base = dict(channels=4, patch=2, basis=BasisKind(family=family, num_basis=4), kernel=3, rank=3, groups=1)
    return MixerConfig(**{**base, **changes})


def _kan_case(family: BasisFamily):
    def build(rng):
        from .bases import make_patch_layer

        cfg = _small_mixer(family, groups=2)
        layer = make_patch_layer(cfg, rng, np.float64)
        return LayerCase(_jitter(layer, rng), rng.standard_normal((2, 4, 3, 4)) * 1.5)

    return build


def _patch_kan(rng):
    from .bases import make_patch_layer

    cfg = _small_mixer(BasisFamily.RBF, basis=BasisKind(num_basis=8))
    return LayerCase(_jitter(make_patch_layer(cfg, rng, np.float64), rng), rng.standard_normal((2, 4, 4, 4)))


def _axis_mix(rng):
    from .mixer import AxisMix

    return LayerCase(_jitter(AxisMix(4, 3, 8, rng), rng), rng.standard_normal((2, 4, 4, 6)))


def _lowrank(rng):
    from .mixer import LowRankGlobal

    return LayerCase(_jitter(LowRankGlobal(16, 3, rng), rng), rng.standard_normal((2, 3, 4, 4)))


def _token_mixer(rng):
    from .mixer import TokenMixer

    return LayerCase(_jitter(TokenMixer(_small_mixer(), 16, rng), rng), rng.standard_normal((2, 4, 4, 4)))


def _layer_norm(rng):
    return LayerCase(_jitter(LayerNorm(6), rng), rng.standard_normal((2, 5, 6)))


def _channel_mlp(rng):
    return LayerCase(_jitter(Mlp(4, 8, 4, rng), rng), rng.standard_normal((2, 3, 3, 4)))


def _patch_embed(rng):
    return LayerCase(_jitter(PatchConv(3, 5, 4, rng), rng), rng.random((2, 3, 8, 8)))


def _downsample(rng):
    return LayerCase(_jitter(PatchConv(4, 6, 2, rng), rng), rng.standard_normal((2, 4, 4, 4)))


def _block(rng):
    from .backbone import Block

    return LayerCase(_jitter(Block(_small_mixer(), 16, 2, rng), rng), rng.standard_normal((2, 4, 4, 4)))


def _head(rng):
    return LayerCase(_jitter(Linear(6, 5, rng), rng), rng.standard_normal((3, 6)))


def tiny_backbone_config() -> BackboneConfig:
    return BackboneConfig(
        name="gradcheck-tiny",
        image_size=(32, 32),
        num_classes=10,
        stages=[
            StageConfig(depth=1, channels=8),
            StageConfig(depth=1, channels=16),
            StageConfig(depth=1, channels=24),
            StageConfig(depth=1, channels=32, patch=1),
        ],
    )


def _backbone(rng, config: BackboneConfig | None = None):
    from .backbone import Backbone
    from .train import cross_entropy

    config = config or tiny_backbone_config()
    labels = rng.integers(0, config.num_classes, size=2)
    model = _jitter(Backbone(config, rng), rng)
    x = rng.random((2, config.in_channels, *config.image_size))
    return LayerCase(model, x, loss=lambda logits: cross_entropy(logits, labels))


LAYER_CHECKS: dict[str, Callable[[np.random.Generator], LayerCase]] = {
    "kan_rbf": _kan_case(BasisFamily.RBF),
    "kan_bspline": _kan_case(BasisFamily.BSPLINE),
    "kan_wavelet": _kan_case(BasisFamily.WAVELET),
    "kan_mlp": _kan_case(BasisFamily.MLP),
    "patch_kan": _patch_kan,
    "axis_mix": _axis_mix,
    "lowrank_global": _lowrank,
    "token_mixer": _token_mixer,
    "layer_norm": _layer_norm,
    "channel_mlp": _channel_mlp,
    "patch_embed": _patch_embed,
    "downsample": _downsample,
    "block": _block,
    "head": _head,
    "backbone": _backbone,
}


def check_layer(
    name: str,
    *,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    atol: float = DEFAULT_ATOL,
    max_coords: int = MAX_COORDS,
    seed: int = GRADCHECK_SEED,
    backbone_config: BackboneConfig | None = None,
) -> GradCheckReport:
    if name not in LAYER_CHECKS:
        raise ConfigError(f"unknown layer {name!r}; choose from {', '.join(LAYER_CHECKS)}", module="grad")
    rng = np.random.default_rng(seed)
    if name == "backbone" and backbone_config is not None:
        case = _backbone(rng, backbone_config)
    else:
        case = LAYER_CHECKS[name](rng)
    r = None
    if case.loss is None:
        y = case.layer(case.x)
        r = rng.standard_normal(y.shape)
    params = {name_: value.copy() for name_, value in case.layer.named_parameters()}
    params[INPUT] = case.x.astype(np.float64)
    logger.info("gradcheck %s: %d groups", name, len(params))
    return finite_diff_check(
        _layer_loss_and_grad(case, r),
        params,
        eps=eps,
        tol=tol,
        atol=atol,
        max_coords=max_coords,
        seed=seed,
        scope=name,
        prefix=f"{name}/",
    )


def run_gradcheck(scope: str = "all", **kwargs) -> list[GradCheckReport]:
    names = list(LAYER_CHECKS) if scope == "all" else [scope]
    return [check_layer(name, **kwargs) for name in names]


def require_pass(reports: list[GradCheckReport]) -> None:
    failing = [g.name for report in reports for g in report.failures()]
    if failing:
        raise CheckFailure(f"gradient check failed for: {', '.join(failing)}", module="grad")
