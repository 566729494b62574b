"""Four-stage hierarchical classifier assembled from ViK blocks.

stem (p x p, stride p) -> stage 1 -> [2x2 downsample -> stage s] x 3 -> GAP -> LN -> linear head
"""

import logging

import numpy as np

from . import tensor as T
from .config import BackboneConfig, MixerConfig
from .errors import ConfigError, DimensionError, ShapeError
from .mixer import TokenMixer
from .nn import GradTape, LayerNorm, Linear, Mlp, Module, PatchConv, prefixed

logger = logging.getLogger(__name__)


class Block(Module):
    """Pre-norm MetaFormer block: ``x1 = x + mixer(LN(x)); out = x1 + MLP(LN(x1))``."""

    def __init__(self, cfg: MixerConfig, n_tokens: int, mlp_ratio: int, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        c = cfg.channels
        self.channels = c
        self.children["norm1"] = LayerNorm(c, channels_first=True, component="norm", dtype=dtype)
        self.children["mixer"] = TokenMixer(cfg, n_tokens, rng, dtype=dtype)
        self.children["norm2"] = LayerNorm(c, component="norm", dtype=dtype)
        self.children["mlp"] = Mlp(c, mlp_ratio * c, c, rng, component="channel_mlp", dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"block expects [B,{self.channels},H,W], got {x.shape}", module="backbone")
        n1, t_n1 = self.children["norm1"].forward(x)
        m, t_mix = self.children["mixer"].forward(n1)
        x1 = x + m
        x1_last = x1.transpose(0, 2, 3, 1)
        n2, t_n2 = self.children["norm2"].forward(x1_last)
        h, t_mlp = self.children["mlp"].forward(n2)
        out = x1 + np.ascontiguousarray(h.transpose(0, 3, 1, 2))
        return out, GradTape(self.op, out.shape, t_n1=t_n1, t_mix=t_mix, t_n2=t_n2, t_mlp=t_mlp)

    def backward(self, tape, dout):
        s = tape.consume(self.op)
        dh = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
        dn2, g_mlp = self.children["mlp"].backward(s["t_mlp"], dh)
        dx1_last, g_n2 = self.children["norm2"].backward(s["t_n2"], dn2)
        dx1 = dout + dx1_last.transpose(0, 3, 1, 2)
        dn1, g_mix = self.children["mixer"].backward(s["t_mix"], dx1)
        dx_norm, g_n1 = self.children["norm1"].backward(s["t_n1"], dn1)
        grads = {
            **prefixed("norm1", g_n1),
            **prefixed("mixer", g_mix),
            **prefixed("norm2", g_n2),
            **prefixed("mlp", g_mlp),
        }
        return dx1 + dx_norm, grads


class Stage(Module):
    def __init__(self, config: BackboneConfig, s: int, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        stage = config.stages[s]
        cfg = config.mixer_config(s)
        for j in range(stage.depth):
            self.children[f"block{j + 1}"] = Block(cfg, config.stage_tokens(s), stage.mlp_ratio, rng, dtype=dtype)

    def forward(self, x):
        tapes = []
        for block in self.children.values():
            x, tape = block.forward(x)
            tapes.append(tape)
        return x, GradTape(self.op, x.shape, tapes=tapes)

    def backward(self, tape, dout):
        tapes = tape.consume(self.op)["tapes"]
        grads = {}
        for (name, block), t in reversed(list(zip(self.children.items(), tapes))):
            dout, g = block.backward(t, dout)
            grads.update(prefixed(name, g))
        return dout, grads


class Backbone(Module):
    """Children: ``stem``, ``stage1..4``, ``down2..4``, ``head_norm``, ``head``."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, *, dtype=np.float32):
        super().__init__()
        self.config = config
        stages = config.stages
        self.children["stem"] = PatchConv(
            config.in_channels, stages[0].channels, config.stem_patch, rng, error=ConfigError, dtype=dtype
        )
        h0, w0 = config.image_size
        for s in range(len(stages)):
            expected = (h0 // (config.stem_patch * 2**s), w0 // (config.stem_patch * 2**s))
            if config.stage_resolution(s) != expected:
                raise ShapeError(f"stage {s + 1} resolution {config.stage_resolution(s)} != {expected}", module="backbone")
            if s > 0:
                self.children[f"down{s + 1}"] = PatchConv(stages[s - 1].channels, stages[s].channels, 2, rng, dtype=dtype)
            self.children[f"stage{s + 1}"] = Stage(config, s, rng, dtype=dtype)
        c4 = stages[-1].channels
        self.children["head_norm"] = LayerNorm(c4, component="head", dtype=dtype)
        self.children["head"] = Linear(c4, config.num_classes, rng, component="head", dtype=dtype)
        logger.debug("built %s with %d parameters", config.name, self.num_parameters())

    def block(self, stage: int, block: int) -> Block:
        """1-based accessor."""
        depths = [st.depth for st in self.config.stages]
        if not 1 <= stage <= len(depths) or not 1 <= block <= depths[stage - 1]:
            ranges = ", ".join(f"stage {s + 1}: blocks 1..{d}" for s, d in enumerate(depths))
            raise ConfigError(f"no block {block} in stage {stage}; valid: {ranges}", module="backbone")
        return self.children[f"stage{stage}"].children[f"block{block}"]

    def blocks(self):
        for s, stage in enumerate(self.config.stages):
            for j in range(stage.depth):
                yield s + 1, j + 1, self.block(s + 1, j + 1)

    def _check_input(self, x):
        want = (self.config.in_channels, *self.config.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"model expects images [B,{want[0]},{want[1]},{want[2]}], got {x.shape}", module="backbone")

    def forward(self, x):
        self._check_input(x)
        tapes = {}
        order = [name for name in self.children if name.startswith(("stem", "down", "stage"))]
        for name in order:
            x, tapes[name] = self.children[name].forward(x)
        with T.charged_to("head"):
            pooled = T.global_avg_pool(x)
        z, tapes["head_norm"] = self.children["head_norm"].forward(pooled)
        logits, tapes["head"] = self.children["head"].forward(z)
        return T.ensure_finite(logits, "backbone"), GradTape(self.op, logits.shape, tapes=tapes, order=order, last=x.shape)

    def backward(self, tape, dlogits):
        s = tape.consume(self.op)
        tapes = s["tapes"]
        grads = {}
        dz, g = self.children["head"].backward(tapes["head"], dlogits)
        grads.update(prefixed("head", g))
        dpooled, g = self.children["head_norm"].backward(tapes["head_norm"], dz)
        grads.update(prefixed("head_norm", g))
        dx = T.global_avg_pool_backward(s["last"], dpooled)
        for name in reversed(s["order"]):
            dx, g = self.children[name].backward(tapes[name], dx)
            grads.update(prefixed(name, g))
        return dx, grads


def patch_embed(image: np.ndarray, stem: PatchConv) -> np.ndarray:
    return stem(image)


def block_forward(x: np.ndarray, block: Block) -> np.ndarray:
    return block(x)


def downsample(x: np.ndarray, layer: PatchConv) -> np.ndarray:
    return layer(x)


def backbone_forward(image: np.ndarray, model: Backbone) -> np.ndarray:
    return model(image)
