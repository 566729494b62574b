"""Univariate basis families and the patch-wise KAN layer built on them.

An edge function is ``phi(x) = sum_j w_j * B_j(x)``. A KAN layer over a patch
of ``F`` values holds one edge per (input, output) pair, so an output is
``y_o = sum_i phi_{i,o}(x_i)``. Gaussian and Ricker widths are stored as logs,
which keeps them strictly positive under any optimizer step.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import BSPLINE_DEGREE, BasisFamily, MixerConfig
from .errors import ConfigError, DimensionError, ParameterError
from .nn import GradTape, Module, map_chunks, sum_in_order, uniform
from .storage import write_csv

logger = logging.getLogger(__name__)

# B-spline grid support; inputs are clamped here
SPLINE_LO, SPLINE_HI = -4.0, 4.0

# centers / shifts initialised on this span
INIT_LO, INIT_HI = -2.0, 2.0

# multiply-adds to evaluate one basis value, before it is weighted
RBF_EVAL_COST = 4  # subtract, square, divide, exp
RICKER_EVAL_COST = 6  # subtract, divide, square, 1 - t^2, exp, product
BSPLINE_BASIS_COST = 12


# --- basis activations ---


def rbf_activations(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Gaussian bumps ``exp(-(x - mu)^2 / (2 sigma^2))``; trailing axis indexes the basis."""
    if np.any(sigma <= 0):
        raise ParameterError("RBF widths must be strictly positive", module="bases")
    d = np.asarray(x)[..., None] - mu
    out = np.exp(-(d * d) / (2 * sigma * sigma))
    T.charge(RBF_EVAL_COST * out.size)
    return out


def ricker(t: np.ndarray) -> np.ndarray:
    return (1 - t * t) * np.exp(-0.5 * t * t)


def ricker_derivative(t: np.ndarray) -> np.ndarray:
    return t * (t * t - 3) * np.exp(-0.5 * t * t)


def wavelet_activations(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Mexican-hat wavelets ``psi((x - shift) / scale)``."""
    if np.any(scale <= 0):
        raise ParameterError("wavelet scales must be strictly positive", module="bases")
    out = ricker((np.asarray(x)[..., None] - shift) / scale)
    T.charge(RICKER_EVAL_COST * out.size)
    return out


def uniform_knots(num_basis: int, degree: int = BSPLINE_DEGREE) -> np.ndarray:
    """Uniform knot vector whose spline domain ``[t_degree, t_num_basis]`` is the clamp range."""
    if num_basis <= degree:
        raise ConfigError(f"{num_basis} B-spline bases cannot carry degree {degree}", module="bases")
    h = (SPLINE_HI - SPLINE_LO) / (num_basis - degree)
    return SPLINE_LO + (np.arange(num_basis + degree + 1) - degree) * h


def _check_knots(grid: np.ndarray, degree: int) -> None:
    if grid.ndim != 1 or grid.size < degree + 2:
        raise ConfigError(f"need at least {degree + 2} knots for degree {degree}, got {grid.size}", module="bases")
    if np.any(np.diff(grid) < 0):
        raise ConfigError("knots must be non-decreasing", module="bases")


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.where(den == 0, 0.0, num / np.where(den == 0, 1.0, den))


def _cox_de_boor(x: np.ndarray, grid: np.ndarray, degree: int) -> list[np.ndarray]:
    """Basis tables for degrees ``0..degree``; x must already lie in the domain."""
    n_knots = grid.size
    lo, hi = grid[degree], grid[n_knots - degree - 1]
    xc = np.clip(x, lo, hi)[..., None]
    # the interval holding x, with the right domain edge folded into the last interval
    k = np.clip(np.searchsorted(grid, np.clip(x, lo, hi), side="right") - 1, degree, n_knots - degree - 2)
    bases = (np.arange(n_knots - 1) == k[..., None]).astype(np.result_type(x, np.float32))
    tables = [bases]
    for d in range(1, degree + 1):
        left = _safe_ratio(xc - grid[: -d - 1], grid[d:-1] - grid[: -d - 1]) * bases[..., :-1]
        right = _safe_ratio(grid[d + 1 :] - xc, grid[d + 1 :] - grid[1:-d]) * bases[..., 1:]
        bases = left + right
        tables.append(bases)
    return tables


def bspline_activations(
    x: np.ndarray, grid: np.ndarray, degree: int = BSPLINE_DEGREE, *, with_derivative: bool = False
):
    """Cox-de Boor B-spline values at ``x`` clamped to ``[t_degree, t_{n-degree-1}]``.

    With ``with_derivative`` also returns d/dx of every basis, which is zero
    wherever the clamp is active.
    """
    grid = np.asarray(grid, dtype=np.float64)
    _check_knots(grid, degree)
    x = np.asarray(x)
    tables = _cox_de_boor(x, grid, degree)
    values = tables[-1].astype(x.dtype if x.dtype.kind == "f" else np.float64, copy=False)
    T.charge(BSPLINE_BASIS_COST * values.size)
    if not with_derivative:
        return values
    if degree == 0:
        return values, np.zeros_like(values)
    lower = tables[-2]
    d = degree
    deriv = (
        _safe_ratio(np.float64(d), grid[d:-1] - grid[: -d - 1]) * lower[..., :-1]
        - _safe_ratio(np.float64(d), grid[d + 1 :] - grid[1:-d]) * lower[..., 1:]
    )
    lo, hi = grid[degree], grid[grid.size - degree - 1]
    inside = ((x > lo) & (x < hi))[..., None]
    deriv = np.where(inside, deriv, 0.0).astype(values.dtype, copy=False)
    return values, deriv


# --- single edges ---


@dataclass(frozen=True)
class EdgeParams:
    """The parameters of one edge function phi_{i,o}."""

    family: BasisFamily
    w: np.ndarray
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    knots: np.ndarray | None = None

    def astype64(self) -> "EdgeParams":
        cast = {k: None if v is None else np.asarray(v, dtype=np.float64)
                for k, v in vars(self).items() if k != "family"}
        return EdgeParams(family=self.family, **cast)


def edge_bases(x: np.ndarray, edge: EdgeParams) -> np.ndarray:
    match edge.family:
        case BasisFamily.RBF:
            return rbf_activations(x, edge.mu, edge.sigma)
        case BasisFamily.WAVELET:
            return wavelet_activations(x, edge.scale, edge.shift)
        case BasisFamily.BSPLINE:
            return bspline_activations(x, edge.knots)
    raise ConfigError(f"{edge.family.value} layers have no univariate edges", module="bases")


def phi_edge(x: np.ndarray, edge: EdgeParams) -> np.ndarray:
    b = edge_bases(x, edge)
    return np.einsum("...m,m->...", b, edge.w, optimize=False)


def phi_curve_table(layer: "KanLayer", edge: tuple[int, int], grid: tuple[float, float, int], group: int = 0) -> np.ndarray:
    """Sample ``phi_{i,o}`` of ``layer`` on ``n`` evenly spaced points; rows are ``(x, phi)``."""
    lo, hi, n = grid
    if int(n) != n or n < 2 or not lo < hi:
        raise ConfigError(f"curve grid needs lo < hi and n >= 2, got ({lo}, {hi}, {n})", module="bases")
    xs = np.linspace(lo, hi, int(n), dtype=np.float64)
    phi = phi_edge(xs, layer.edge(*edge, group=group).astype64())
    return T.ensure_finite(np.stack([xs, phi], axis=1), "phi_curve_table")


def write_curve_csv(path: Path, table: np.ndarray) -> None:
    write_csv(path, ("x", "phi"), ((f"{x:.9g}", f"{phi:.9g}") for x, phi in table))


def count_sign_changes(phi: np.ndarray, rel_tol: float = 1e-9) -> int:
    """Sign changes of the discrete second difference.

    Entries below ``rel_tol * max|phi|`` are treated as zero, so straight or
    flat curves count none.
    """
    phi = np.asarray(phi, dtype=np.float64)
    d2 = np.diff(phi, n=2)
    if d2.size == 0:
        return 0
    floor = rel_tol * float(np.max(np.abs(phi)))
    signs = np.sign(d2[np.abs(d2) > floor])
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


# --- layers ---


def _to_groups(x: np.ndarray, groups: int) -> np.ndarray:
    """[B, C, Np, F] -> [g, B*(C/g)*Np, F]."""
    b, c, n, f = x.shape
    return x.reshape(b, groups, c // groups, n, f).transpose(1, 0, 2, 3, 4).reshape(groups, -1, f)


def _from_groups(rows: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, n, f = shape
    g = rows.shape[0]
    return np.ascontiguousarray(rows.reshape(g, b, c // g, n, f).transpose(1, 0, 2, 3, 4).reshape(shape))


class PatchLayer(Module):
    """Common plumbing for layers acting on the trailing patch axis of [B, C, Np, F]."""

    component = "patch_kan"

    def __init__(self, features: int, groups: int):
        super().__init__()
        self.features = features
        self.groups = groups

    def _check(self, x):
        if x.ndim != 4 or x.shape[-1] != self.features:
            raise DimensionError(f"patch layer expects [B,C,Np,{self.features}], got {x.shape}", module="bases")
        if x.shape[1] % self.groups:
            raise DimensionError(f"{x.shape[1]} channels cannot split into {self.groups} groups", module="bases")

    def _rows_forward(self, g: int, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _rows_backward(self, g: int, rows: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def forward(self, x):
        self._check(x)
        grouped = _to_groups(x, self.groups)
        out = np.empty_like(grouped)
        with T.charged_to(self.component):
            for g in range(self.groups):
                rows = grouped[g]
                parts = map_chunks(lambda a, b, g=g, rows=rows: self._rows_forward(g, rows[a:b]), rows.shape[0])
                out[g] = np.concatenate(parts, axis=0)
        y = T.ensure_finite(_from_groups(out, x.shape), self.op)
        return y, GradTape(self.op, y.shape, x=x)

    def backward(self, tape, dy):
        x = tape.consume(self.op)["x"]
        grouped = _to_groups(x, self.groups)
        dy_rows = _to_groups(dy, self.groups)
        dx = np.empty_like(grouped)
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        for g in range(self.groups):
            rows, drows = grouped[g], dy_rows[g]
            parts = map_chunks(lambda a, b, g=g: self._rows_backward(g, rows[a:b], drows[a:b]), rows.shape[0])
            dx[g] = np.concatenate([p[0] for p in parts], axis=0)
            for name, value in sum_in_order([p[1] for p in parts]).items():
                grads[name][g] = value
        return _from_groups(dx, x.shape), grads


class KanLayer(PatchLayer):
    """Square F -> F KAN layer shared by every patch and channel of a channel group.

    Parameter arrays are shaped ``[g, F_in, F_out, M]``.
    """

    def __init__(self, features: int, family: BasisFamily, num_basis: int, rng: np.random.Generator, *,
                 groups: int = 1, dtype=np.float32):
        super().__init__(features, groups)
        self.family = BasisFamily(family)
        if self.family is BasisFamily.MLP:
            raise ConfigError("use MlpPatchLayer for the MLP replacement", module="bases")
        self.num_basis = m = num_basis
        shape = (groups, features, features, m)
        centers = np.linspace(INIT_LO, INIT_HI, m) if m > 1 else np.zeros(1)
        spacing = (INIT_HI - INIT_LO) / (m - 1) if m > 1 else 1.0
        self.knots = None
        if self.family is BasisFamily.RBF:
            self.params["mu"] = np.broadcast_to(centers, shape).astype(dtype)
            self.params["log_sigma"] = np.full(shape, np.log(spacing), dtype=dtype)
        elif self.family is BasisFamily.WAVELET:
            self.params["shift"] = np.broadcast_to(centers, shape).astype(dtype)
            self.params["log_scale"] = np.full(shape, np.log(spacing), dtype=dtype)
        else:
            self.knots = uniform_knots(m)
        self.params["w"] = uniform(rng, 1 / np.sqrt(features * m), shape, dtype)

    def edge(self, i: int, o: int, *, group: int = 0) -> EdgeParams:
        f = self.features
        if not (0 <= i < f and 0 <= o < f and 0 <= group < self.groups):
            raise ConfigError(
                f"edge ({i},{o}) group {group} outside 0..{f - 1} x 0..{f - 1}, groups 0..{self.groups - 1}",
                module="bases",
            )
        p = {name: value[group, i, o] for name, value in self.params.items()}
        match self.family:
            case BasisFamily.RBF:
                return EdgeParams(self.family, p["w"], mu=p["mu"], sigma=np.exp(p["log_sigma"]))
            case BasisFamily.WAVELET:
                return EdgeParams(self.family, p["w"], shift=p["shift"], scale=np.exp(p["log_scale"]))
        return EdgeParams(self.family, p["w"], knots=self.knots)

    # rows: [T, F]

    def _rows_forward(self, g, rows):
        w = self.params["w"][g]
        if self.family is BasisFamily.BSPLINE:
            b = bspline_activations(rows, self.knots)
            return T.einsum("tim,iom->to", b, w)
        return T.einsum("tiom,iom->to", self._activations(g, rows), w)

    def _activations(self, g, rows):
        x = rows[:, :, None]
        if self.family is BasisFamily.RBF:
            return rbf_activations(x, self.params["mu"][g], np.exp(self.params["log_sigma"][g]))
        return wavelet_activations(x, np.exp(self.params["log_scale"][g]), self.params["shift"][g])

    def _edge_bases(self, g, rows):
        x = rows[:, :, None]
        if self.family is BasisFamily.RBF:
            mu, sigma = self.params["mu"][g], np.exp(self.params["log_sigma"][g])
            d = x[..., None] - mu
            return rbf_activations(x, mu, sigma), d, sigma
        shift, scale = self.params["shift"][g], np.exp(self.params["log_scale"][g])
        t = (x[..., None] - shift) / scale
        return ricker(t), t, scale

    def _rows_backward(self, g, rows, dy):
        w = self.params["w"][g]
        if self.family is BasisFamily.BSPLINE:
            b, db = bspline_activations(rows, self.knots, with_derivative=True)
            dw = T.einsum("to,tim->iom", dy, b)
            dx = T.einsum("to,iom,tim->ti", dy, w, db)
            return dx, {"w": dw}
        b, u, width = self._edge_bases(g, rows)
        dw = T.einsum("to,tiom->iom", dy, b)
        gb = dy[:, None, :, None] * w  # dL/dB, [T, F, F, M]
        if self.family is BasisFamily.RBF:
            # dB/dx = -B d / s^2 ; dB/dlog s = B d^2 / s^2
            q = gb * b * u / (width * width)
            dx = -q.sum(axis=(2, 3))
            return dx, {"mu": q.sum(axis=0), "log_sigma": (q * u).sum(axis=0), "w": dw}
        # t = (x - shift) / scale
        q = gb * ricker_derivative(u)
        dx = (q / width).sum(axis=(2, 3))
        return dx, {"shift": -(q / width).sum(axis=0), "log_scale": -(q * u).sum(axis=0), "w": dw}


class MlpPatchLayer(PatchLayer):
    """Two-layer GELU perceptron F -> h -> F standing in for the KAN layer."""

    def __init__(self, features: int, hidden: int, rng: np.random.Generator, *, groups: int = 1, dtype=np.float32):
        super().__init__(features, groups)
        self.hidden = hidden
        b1, b2 = 1 / np.sqrt(features), 1 / np.sqrt(hidden)
        self.params["w1"] = uniform(rng, b1, (groups, features, hidden), dtype)
        self.params["b1"] = uniform(rng, b1, (groups, hidden), dtype)
        self.params["w2"] = uniform(rng, b2, (groups, hidden, features), dtype)
        self.params["b2"] = uniform(rng, b2, (groups, features), dtype)

    def _rows_forward(self, g, rows):
        h = T.einsum("tf,fh->th", rows, self.params["w1"][g]) + self.params["b1"][g]
        return T.einsum("th,hf->tf", T.gelu(h), self.params["w2"][g]) + self.params["b2"][g]

    def _rows_backward(self, g, rows, dy):
        w1, w2 = self.params["w1"][g], self.params["w2"][g]
        h = T.einsum("tf,fh->th", rows, w1) + self.params["b1"][g]
        a = T.gelu(h)
        dh = T.gelu_backward(h, T.einsum("tf,hf->th", dy, w2))
        grads = {
            "w1": T.einsum("tf,th->fh", rows, dh),
            "b1": dh.sum(axis=0),
            "w2": T.einsum("th,tf->hf", a, dy),
            "b2": dy.sum(axis=0),
        }
        return T.einsum("th,fh->tf", dh, w1), grads


def make_patch_layer(cfg: MixerConfig, rng: np.random.Generator, dtype=np.float32) -> PatchLayer:
    if cfg.basis.family is BasisFamily.MLP:
        return MlpPatchLayer(cfg.patch_dim, cfg.mlp_hidden, rng, groups=cfg.groups, dtype=dtype)
    return KanLayer(cfg.patch_dim, cfg.basis.family, cfg.basis.num_basis, rng, groups=cfg.groups, dtype=dtype)
