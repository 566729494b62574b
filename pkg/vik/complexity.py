"""Exact multiply-add and parameter counts for mixers, blocks and whole backbones.

Counting convention (one unit = one multiply-add):

* RBF edge basis: subtract, square, divide, exp, multiply-add = 5 units.
* Ricker edge basis: subtract, divide, square, 1 - t^2, exp, product, multiply-add = 7 units.
* B-spline: bases depend on the input only, 12 units per basis and input,
  plus one multiply-add per (input, output, basis) for the weighted sum.
* MLP replacement: 2*F*h multiply-adds plus one GELU per hidden unit, per patch.
* Depthwise conv: k per element and axis. GAP and the alpha blend: 1 per element.
* Layer norm: 4 per element. GELU: 1 per element.
* Biases, softmax over two logits and residual additions are not counted.

The axis reweighting MLP acts on pooled features, so its cost does not grow
with the token count; it is reported as its own component ``axis_reweight``
and kept out of the mixer's linear total.

The instrumented counts run a real forward pass under :func:`vik.tensor.counting`,
so they add up the work the primitives actually executed.
"""

import logging
from collections import Counter
from fractions import Fraction

import numpy as np
from pydantic import BaseModel

from . import tensor as T
from .backbone import Backbone
from .bases import BSPLINE_BASIS_COST, RBF_EVAL_COST, RICKER_EVAL_COST
from .config import BackboneConfig, BasisFamily, MixerConfig
from .errors import ConfigError
from .mixer import TokenMixer
from .tensor import GELU_COST, NORM_COST

logger = logging.getLogger(__name__)

# per (input, output, basis): evaluate the basis, then one multiply-add to weight it
RBF_COST = RBF_EVAL_COST + 1
WAVELET_COST = RICKER_EVAL_COST + 1

MIXER_COMPONENTS = ("patch_kan", "axis_mix", "lowrank_global")
COMPONENTS = MIXER_COMPONENTS + ("axis_reweight", "norm", "channel_mlp", "embed", "head")

# published (params, GMACs) budgets the shipped presets were sized against
PUBLISHED_BUDGETS = {
    "vik-small": (13.5e6, 1.6),
    "vik-base": (24.9e6, 3.2),
}


def convention() -> dict[str, int]:
    return {
        "rbf_c1": RBF_COST,
        "wavelet_c1": WAVELET_COST,
        "bspline_basis": BSPLINE_BASIS_COST,
        "norm": NORM_COST,
        "gelu": GELU_COST,
        "exp_unit": 1,
    }


# --- reports ---


class FlopReport(BaseModel):
    components: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def mixer_total(self) -> int:
        return sum(self.components.get(name, 0) for name in MIXER_COMPONENTS)

    def __add__(self, other: "FlopReport") -> "FlopReport":
        merged = Counter(self.components)
        merged.update(other.components)
        return FlopReport(components={name: merged[name] for name in COMPONENTS if name in merged})

    def scaled(self, factor: int) -> "FlopReport":
        return FlopReport(components={k: v * factor for k, v in self.components.items()})


class ParamReport(BaseModel):
    components: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.components.values())


class StageReport(BaseModel):
    stage: int
    resolution: tuple[int, int]
    tokens: int
    rank: int
    flops: FlopReport


class ModelReport(BaseModel):
    name: str
    image_size: tuple[int, int]
    stages: list[StageReport]
    flops: FlopReport
    params: ParamReport
    convention: dict[str, int]

    @property
    def gmacs(self) -> float:
        return self.flops.total / 1e9

    def budget(self) -> tuple[float, float] | None:
        return PUBLISHED_BUDGETS.get(self.name)


# --- analytic counts ---


def kan_flops(cfg: MixerConfig, n_tokens: int) -> int:
    n, c, f, m = n_tokens, cfg.channels, cfg.patch_dim, cfg.basis.num_basis
    match cfg.basis.family:
        case BasisFamily.RBF:
            return n * c * f * m * RBF_COST
        case BasisFamily.WAVELET:
            return n * c * f * m * WAVELET_COST
        case BasisFamily.BSPLINE:
            return n * c * m * BSPLINE_BASIS_COST + n * c * f * m
    h = cfg.mlp_hidden
    return (n // f) * c * (2 * f * h + GELU_COST * h)


def count_mixer_flops(cfg: MixerConfig, h: int, w: int) -> FlopReport:
    """Per-image multiply-adds of one token mixer on an ``h x w`` map."""
    if h < 1 or w < 1 or h % cfg.patch or w % cfg.patch:
        raise ConfigError(f"{h}x{w} map is not divisible by patch {cfg.patch}", module="complexity")
    n, c = h * w, cfg.channels
    parts = {"patch_kan": kan_flops(cfg, n), "axis_mix": 0, "axis_reweight": 0, "lowrank_global": 0}
    if cfg.use_axis_mix:
        parts["axis_mix"] = 2 * n * c * cfg.kernel + n * c + n * c
        hr = cfg.reweight_hidden
        parts["axis_reweight"] = c * hr + 2 * hr
    if cfg.use_global_map:
        parts["lowrank_global"] = 2 * n * c * cfg.rank
    return FlopReport(components=parts)


def count_block_flops(cfg: MixerConfig, mlp_ratio: int, h: int, w: int) -> FlopReport:
    n, c = h * w, cfg.channels
    hidden = mlp_ratio * c
    block = FlopReport(components={
        "norm": 2 * NORM_COST * n * c,
        "channel_mlp": 2 * n * c * hidden + GELU_COST * n * hidden,
    })
    return count_mixer_flops(cfg, h, w) + block


def count_model_flops(config: BackboneConfig) -> ModelReport:
    h0, w0 = config.image_size
    sp = config.stem_patch
    stages: list[StageReport] = []
    total = FlopReport()
    for s, stage in enumerate(config.stages):
        h, w = config.stage_resolution(s)
        n = h * w
        if s == 0:
            entry = {"embed": n * config.in_channels * sp * sp * stage.channels + NORM_COST * n * stage.channels}
        else:
            prev = config.stages[s - 1].channels
            entry = {"embed": n * 4 * prev * stage.channels + NORM_COST * n * stage.channels}
        flops = FlopReport(components=entry) + count_block_flops(config.mixer_config(s), stage.mlp_ratio, h, w).scaled(stage.depth)
        stages.append(StageReport(stage=s + 1, resolution=(h, w), tokens=n, rank=config.resolved_rank(s), flops=flops))
        total = total + flops
    c4 = config.stages[-1].channels
    n4 = config.stage_tokens(len(config.stages) - 1)
    total = total + FlopReport(components={"head": n4 * c4 + NORM_COST * c4 + c4 * config.num_classes})
    return ModelReport(
        name=config.name,
        image_size=(h0, w0),
        stages=stages,
        flops=total,
        params=count_params(config),
        convention=convention(),
    )


def kan_params(cfg: MixerConfig) -> int:
    g, f, m = cfg.groups, cfg.patch_dim, cfg.basis.num_basis
    match cfg.basis.family:
        case BasisFamily.RBF | BasisFamily.WAVELET:
            return 3 * g * f * f * m
        case BasisFamily.BSPLINE:
            return g * f * f * m
    h = cfg.mlp_hidden
    return g * (2 * f * h + h + f)


def mixer_params(cfg: MixerConfig, n_tokens: int) -> dict[str, int]:
    c = cfg.channels
    parts = {"patch_kan": kan_params(cfg), "axis_mix": 0, "axis_reweight": 0, "lowrank_global": 0}
    if cfg.use_axis_mix:
        hr = cfg.reweight_hidden
        parts["axis_mix"] = 2 * c * cfg.kernel
        parts["axis_reweight"] = c * hr + hr + 2 * hr + 2
    if cfg.use_global_map:
        parts["lowrank_global"] = 2 * n_tokens * cfg.rank
    return parts


def count_params(config: BackboneConfig) -> ParamReport:
    parts: Counter = Counter()
    sp = config.stem_patch
    for s, stage in enumerate(config.stages):
        c = stage.channels
        if s == 0:
            parts["embed"] += config.in_channels * sp * sp * c + 3 * c
        else:
            parts["embed"] += 4 * config.stages[s - 1].channels * c + 3 * c
        hidden = stage.mlp_ratio * c
        per_block = Counter(mixer_params(config.mixer_config(s), config.stage_tokens(s)))
        per_block["norm"] += 4 * c
        per_block["channel_mlp"] += 2 * c * hidden + hidden + c
        for name, value in per_block.items():
            parts[name] += stage.depth * value
    c4 = config.stages[-1].channels
    parts["head"] += 2 * c4 + c4 * config.num_classes + config.num_classes
    return ParamReport(components={name: parts[name] for name in COMPONENTS if name in parts})


# --- linearity ---


class SweepRow(BaseModel):
    side: int
    tokens: int
    mixer_flops: int
    per_token: Fraction
    ratio: Fraction
    attention_flops: int

    model_config = {"arbitrary_types_allowed": True}


class LinearityTable(BaseModel):
    channels: int
    rank: int
    rows: list[SweepRow]

    @property
    def is_linear(self) -> bool:
        return len({row.per_token for row in self.rows}) == 1


def linearity_sweep(cfg: MixerConfig, sides: list[int]) -> LinearityTable:
    """Mixer cost at several square resolutions; ``per_token`` is constant iff cost is linear in N.

    ``attention_flops`` is the N^2 * C reference of a quadratic token mixer.
    """
    if len(sides) < 2:
        raise ConfigError("linearity sweep needs at least two resolutions", module="complexity")
    rows = []
    for side in sides:
        if side < 1 or side % cfg.patch:
            raise ConfigError(f"resolution {side} is not a positive multiple of patch {cfg.patch}", module="complexity")
        n = side * side
        if cfg.use_global_map and cfg.rank > n:
            raise ConfigError(f"rank {cfg.rank} exceeds {n} tokens at resolution {side}", module="complexity")
        flops = count_mixer_flops(cfg, side, side).mixer_total
        rows.append((side, n, flops))
    base = rows[0][2]
    return LinearityTable(
        channels=cfg.channels,
        rank=cfg.rank,
        rows=[
            SweepRow(
                side=side,
                tokens=n,
                mixer_flops=flops,
                per_token=Fraction(flops, n),
                ratio=Fraction(flops, base) if base else Fraction(0),
                attention_flops=n * n * cfg.channels,
            )
            for side, n, flops in rows
        ],
    )


# --- instrumented execution ---


def instrumented_mixer_flops(cfg: MixerConfig, h: int, w: int, seed: int = 0) -> dict[str, int]:
    """Run one mixer forward on a random single image; counts are what its primitives executed."""
    rng = np.random.default_rng(seed)
    mixer = TokenMixer(cfg, h * w, rng)
    x = rng.standard_normal((1, cfg.channels, h, w)).astype(np.float32)
    with T.counting() as counter:
        mixer.forward(x)
    return dict(counter)


def instrumented_model_flops(config: BackboneConfig, seed: int = 0) -> dict[str, int]:
    rng = np.random.default_rng(seed)
    model = Backbone(config, rng)
    x = rng.random((1, config.in_channels, *config.image_size)).astype(np.float32)
    with T.counting() as counter:
        model.forward(x)
    return dict(counter)
