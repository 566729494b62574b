"""MultiPatch-RBFKAN token mixer.

The mixer sums two branches on a [B, C, H, W] map:

* local: patchify -> patch KAN -> unpatchify -> axis-wise separable mixing
* global: the rank-r token map ``Q P`` applied to every channel's length-N vector
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bases import PatchLayer, make_patch_layer
from .config import MixerConfig
from .errors import ConfigError, DimensionError, ShapeError
from .nn import GradTape, Mlp, Module, prefixed, uniform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchView:
    """A [B, C, H, W] map regrouped as [B, C, N/F, F]; rows are flattened p x p patches."""

    data: np.ndarray
    height: int
    width: int
    patch: int

    @property
    def features(self) -> int:
        return self.patch * self.patch


def patchify(x: np.ndarray, p: int) -> PatchView:
    if x.ndim != 4:
        raise DimensionError(f"patchify expects [B,C,H,W], got {x.shape}", module="mixer")
    b, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"H={h}, W={w} are not divisible by p={p}", module="mixer")
    rows = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
    return PatchView(np.ascontiguousarray(rows.reshape(b, c, -1, p * p)), h, w, p)


def unpatchify(view: PatchView) -> np.ndarray:
    b, c = view.data.shape[:2]
    h, w, p = view.height, view.width, view.patch
    grid = view.data.reshape(b, c, h // p, w // p, p, p).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grid.reshape(b, c, h, w))


# --- axis-wise separable mixing ---


class AxisMix(Module):
    """``alpha_h * DW_h(y) + alpha_w * DW_w(y)`` with ``alpha = softmax(MLP(GAP(y)))`` per image."""

    component = "axis_mix"

    def __init__(self, channels: int, kernel: int, hidden: int, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd, got {kernel}", module="mixer")
        bound = 1 / np.sqrt(kernel)
        self.params["kernel_h"] = uniform(rng, bound, (channels, kernel), dtype)
        self.params["kernel_w"] = uniform(rng, bound, (channels, kernel), dtype)
        self.children["reweight"] = Mlp(channels, hidden, 2, rng, activation="relu", component="axis_reweight", dtype=dtype)

    def forward(self, y):
        with T.charged_to(self.component):
            pooled = T.global_avg_pool(y)
            logits, t_mlp = self.children["reweight"].forward(pooled)
            alpha = T.softmax(logits, axis=-1)
            dh = T.depthwise_conv_axis(y, self.params["kernel_h"], "horizontal")
            dw = T.depthwise_conv_axis(y, self.params["kernel_w"], "vertical")
            out = T.blend(alpha, dh, dw)
        return out, GradTape(self.op, out.shape, y=y, dh=dh, dw=dw, alpha=alpha, t_mlp=t_mlp)

    def weights(self, y: np.ndarray) -> np.ndarray:
        """The per-image blend weights ``[alpha_h, alpha_w]``."""
        return T.softmax(self.children["reweight"](T.global_avg_pool(y)), axis=-1)

    def backward(self, tape, dout):
        s = tape.consume(self.op)
        y, alpha = s["y"], s["alpha"]
        dalpha = np.stack(
            [T.einsum("bchw,bchw->b", dout, s["dh"]), T.einsum("bchw,bchw->b", dout, s["dw"])], axis=1
        )
        dlogits = T.softmax_backward(alpha, dalpha, axis=-1)
        dpooled, g_mlp = self.children["reweight"].backward(s["t_mlp"], dlogits)
        dy_h, dk_h = T.depthwise_conv_axis_backward(
            y, self.params["kernel_h"], "horizontal", alpha[:, 0, None, None, None] * dout
        )
        dy_w, dk_w = T.depthwise_conv_axis_backward(
            y, self.params["kernel_w"], "vertical", alpha[:, 1, None, None, None] * dout
        )
        dy = dy_h + dy_w + T.global_avg_pool_backward(y.shape, dpooled)
        return dy, {"kernel_h": dk_h, "kernel_w": dk_w, **prefixed("reweight", g_mlp)}


def axis_mix_forward(y: np.ndarray, params: AxisMix) -> np.ndarray:
    return params(y)


# --- low-rank global mapping ---


def lowrank_global_forward(y: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Map each channel's token vector v to ``Q (P v)``."""
    b, c, h, w = y.shape
    r, n = p.shape
    if h * w != n:
        raise ShapeError(f"H*W = {h}*{w} = {h * w} does not match the map's N = {n}", module="mixer")
    if q.shape != (n, r):
        raise DimensionError(f"Q has shape {q.shape}, expected {(n, r)}", module="mixer")
    z = T.einsum("bcn,rn->bcr", y.reshape(b, c, n), p)
    return T.einsum("bcr,nr->bcn", z, q).reshape(b, c, h, w)


class LowRankGlobal(Module):
    component = "lowrank_global"

    def __init__(self, n_tokens: int, rank: int, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        if rank < 1 or rank > n_tokens:
            raise ConfigError(f"global rank must lie in 1..{n_tokens}, got {rank}", module="mixer")
        if 2 * rank >= n_tokens:
            logger.warning("global rank %d is not below N/2 for N=%d tokens", rank, n_tokens)
        self.n_tokens, self.rank = n_tokens, rank
        self.params["P"] = uniform(rng, 1 / np.sqrt(n_tokens), (rank, n_tokens), dtype)
        self.params["Q"] = uniform(rng, 1 / np.sqrt(rank), (n_tokens, rank), dtype)

    def forward(self, y):
        with T.charged_to(self.component):
            out = lowrank_global_forward(y, self.params["P"], self.params["Q"])
        return out, GradTape(self.op, out.shape, y=y)

    def backward(self, tape, dout):
        y = tape.consume(self.op)["y"]
        b, c, h, w = y.shape
        n = h * w
        p, q = self.params["P"], self.params["Q"]
        v = y.reshape(b, c, n)
        z = T.einsum("bcn,rn->bcr", v, p)
        dflat = dout.reshape(b, c, n)
        dq = T.einsum("bcn,bcr->nr", dflat, z)
        dz = T.einsum("bcn,nr->bcr", dflat, q)
        dp = T.einsum("bcr,bcn->rn", dz, v)
        dv = T.einsum("bcr,rn->bcn", dz, p)
        return dv.reshape(y.shape), {"P": dp, "Q": dq}


# --- the mixer ---


def patch_kan_forward(patches: PatchView, kan: PatchLayer) -> PatchView:
    return PatchView(kan(patches.data), patches.height, patches.width, patches.patch)


class TokenMixer(Module):
    def __init__(self, cfg: MixerConfig, n_tokens: int, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.n_tokens = n_tokens
        self.children["kan"] = make_patch_layer(cfg, rng, dtype)
        if cfg.use_axis_mix:
            self.children["axis_mix"] = AxisMix(cfg.channels, cfg.kernel, cfg.reweight_hidden, rng, dtype=dtype)
        if cfg.use_global_map:
            self.children["global_map"] = LowRankGlobal(n_tokens, cfg.rank, rng, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise DimensionError(f"mixer expects [B,{self.cfg.channels},H,W], got {x.shape}", module="mixer")
        view = patchify(x, self.cfg.patch)
        k, t_kan = self.children["kan"].forward(view.data)
        local = unpatchify(PatchView(k, view.height, view.width, view.patch))
        tapes = {"kan": t_kan}
        if "axis_mix" in self.children:
            local, tapes["axis_mix"] = self.children["axis_mix"].forward(local)
        out = local
        if "global_map" in self.children:
            g, tapes["global_map"] = self.children["global_map"].forward(x)
            out = local + g
        return out, GradTape(self.op, out.shape, tapes=tapes, in_shape=x.shape)

    def backward(self, tape, dout):
        s = tape.consume(self.op)
        tapes = s["tapes"]
        grads = {}
        dlocal = dout
        dx = np.zeros(s["in_shape"], dtype=dout.dtype)
        if "global_map" in tapes:
            dx_g, g = self.children["global_map"].backward(tapes["global_map"], dout)
            dx = dx + dx_g
            grads.update(prefixed("global_map", g))
        if "axis_mix" in tapes:
            dlocal, g = self.children["axis_mix"].backward(tapes["axis_mix"], dlocal)
            grads.update(prefixed("axis_mix", g))
        p = self.cfg.patch
        h, w = s["in_shape"][2:]
        dk = patchify(dlocal, p).data
        dview, g = self.children["kan"].backward(tapes["kan"], dk)
        grads.update(prefixed("kan", g))
        dx = dx + unpatchify(PatchView(dview, h, w, p))
        return dx, grads


def mixer_forward(x: np.ndarray, params: TokenMixer) -> np.ndarray:
    return params(x)
