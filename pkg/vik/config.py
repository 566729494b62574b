"""Typed run configuration: backbone shape, training recipe, process knobs.

Run files are JSON with the schema ``{"seed": int, "model": BackboneConfig,
"train": TrainConfig}``. ``load_config`` accepts either a path or one of the
packaged preset names in ``PRESETS``.
"""

import hashlib
import json
import logging
import os
from enum import Enum
from importlib import resources
from pathlib import Path

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

VIK_THREADS = max(1, int(os.environ.get("VIK_THREADS", str(os.cpu_count() or 1))))
VIK_KAN_CHUNK = max(1, int(os.environ.get("VIK_KAN_CHUNK", "4096")))
VIK_LOG_LEVEL = os.environ.get("VIK_LOG_LEVEL", "INFO")

PRESETS = {
    "vik-small": "vik_small.json",
    "vik-base": "vik_base.json",
    "vik-tiny": "vik_tiny.json",
}

NUM_STAGES = 4
BSPLINE_DEGREE = 3


class BasisFamily(str, Enum):
    RBF = "rbf"
    BSPLINE = "bspline"
    WAVELET = "wavelet"
    MLP = "mlp"


class BasisKind(BaseModel):
    """Basis family plus basis count M (M is ignored by the MLP replacement)."""

    family: BasisFamily = BasisFamily.RBF
    num_basis: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _enough_bases(self):
        if self.family is BasisFamily.BSPLINE and self.num_basis <= BSPLINE_DEGREE:
            raise ValueError(
                f"B-spline layers need num_basis > {BSPLINE_DEGREE}, got {self.num_basis}"
            )
        return self


class MixerConfig(BaseModel):
    """Shape of one MultiPatch-RBFKAN token mixer; ``rank`` is the literal r."""

    channels: int = Field(ge=1)
    patch: int = Field(2, ge=1)
    basis: BasisKind = BasisKind()
    kernel: int = Field(5, ge=1)
    rank: int = Field(64, ge=1)
    groups: int = Field(1, ge=1)
    use_axis_mix: bool = True
    use_global_map: bool = True

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, k: int) -> int:
        if k % 2 == 0:
            raise ValueError(f"depthwise kernel size must be odd, got {k}")
        return k

    @model_validator(mode="after")
    def _groups_divide_channels(self):
        if self.channels % self.groups:
            raise ValueError(f"{self.channels} channels cannot split into {self.groups} KAN groups")
        return self

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    @property
    def reweight_hidden(self) -> int:
        return max(self.channels // 4, 8)

    @property
    def mlp_hidden(self) -> int:
        # MLP replacement arm: 2Fh + h + F parameters, matched to the KAN layer's 3F^2M
        f, m = self.patch_dim, self.basis.num_basis
        return max(1, round((3 * f * f * m - f) / (2 * f + 1)))


class StageConfig(BaseModel):
    depth: int = Field(ge=1)
    channels: int = Field(ge=1)
    patch: int = Field(2, ge=1)
    num_basis: int = Field(8, ge=1)
    rank: int = Field(64, ge=1)  # cap; the stage resolves min(rank, N // 2)
    kernel: int = Field(5, ge=1)
    mlp_ratio: int = Field(4, ge=1)


class BackboneConfig(BaseModel):
    name: str = "vik"
    image_size: tuple[int, int] = (224, 224)
    in_channels: int = Field(3, ge=1)
    stem_patch: int = Field(4, ge=1)
    num_classes: int = Field(1000, ge=2)
    stages: list[StageConfig]
    basis: BasisFamily = BasisFamily.RBF
    kan_groups: int = Field(1, ge=1)
    use_axis_mix: bool = True
    use_global_map: bool = True

    @model_validator(mode="after")
    def _check_hierarchy(self):
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected exactly {NUM_STAGES} stages, got {len(self.stages)}")
        h0, w0 = self.image_size
        if h0 % self.stem_patch or w0 % self.stem_patch:
            raise ValueError(f"input {h0}x{w0} not divisible by stem patch {self.stem_patch}")
        for prev, nxt in zip(self.stages, self.stages[1:]):
            if nxt.channels < prev.channels:
                raise ValueError("stage channels must be non-decreasing")
        h, w = h0 // self.stem_patch, w0 // self.stem_patch
        for s, stage in enumerate(self.stages):
            if h < 1 or w < 1:
                raise ValueError(f"stage {s + 1} has empty spatial extent")
            if h % stage.patch or w % stage.patch:
                raise ValueError(f"stage {s + 1} resolution {h}x{w} not divisible by patch {stage.patch}")
            if stage.channels % self.kan_groups:
                raise ValueError(f"stage {s + 1} channels {stage.channels} not divisible by kan_groups")
            if stage.kernel % 2 == 0:
                raise ValueError(f"stage {s + 1} kernel {stage.kernel} must be odd")
            if self.basis is BasisFamily.BSPLINE and stage.num_basis <= BSPLINE_DEGREE:
                raise ValueError(f"stage {s + 1}: B-spline needs num_basis > {BSPLINE_DEGREE}")
            if s < NUM_STAGES - 1:
                if h % 2 or w % 2:
                    raise ValueError(f"stage {s + 1} resolution {h}x{w} cannot be halved")
                h, w = h // 2, w // 2
        return self

    # ----- derived shapes -------------------------------------------------

    def stage_resolution(self, s: int) -> tuple[int, int]:
        h0, w0 = self.image_size
        scale = self.stem_patch * 2**s
        return h0 // scale, w0 // scale

    def stage_tokens(self, s: int) -> int:
        h, w = self.stage_resolution(s)
        return h * w

    def resolved_rank(self, s: int) -> int:
        return max(1, min(self.stages[s].rank, self.stage_tokens(s) // 2))

    def mixer_config(self, s: int) -> MixerConfig:
        stage = self.stages[s]
        return MixerConfig(
            channels=stage.channels,
            patch=stage.patch,
            basis=BasisKind(family=self.basis, num_basis=stage.num_basis),
            kernel=stage.kernel,
            rank=self.resolved_rank(s),
            groups=self.kan_groups,
            use_axis_mix=self.use_axis_mix,
            use_global_map=self.use_global_map,
        )

    def with_changes(self, **changes) -> "BackboneConfig":
        try:
            return BackboneConfig.model_validate({**self.model_dump(), **changes})
        except ValidationError as exc:
            raise ConfigError(str(exc), module="config") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


class SynthConfig(BaseModel):
    n_per_class: int = Field(500, ge=1)
    val_per_class: int = Field(100, ge=0)
    noise: float = Field(0.1, ge=0.0)


class TrainConfig(BaseModel):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    min_lr: float = Field(1e-5, ge=0.0)
    warmup_frac: float = Field(0.05, ge=0.0, le=1.0)
    weight_decay: float = Field(0.05, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: float | None = 5.0
    hflip: bool = False
    prefetch: int = Field(4, ge=1)
    synth: SynthConfig = SynthConfig()


class RunConfig(BaseModel):
    seed: int = 0
    model: BackboneConfig
    train: TrainConfig = TrainConfig()


def _read_source(source: str | Path) -> tuple[str, str]:
    key = str(source)
    if key in PRESETS:
        text = resources.files(__package__).joinpath("configs", PRESETS[key]).read_text(encoding="utf-8")
        return text, key
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", module="config")
    return path.read_text(encoding="utf-8"), str(path)


def load_config(source: str | Path) -> RunConfig:
    text, label = _read_source(source)
    try:
        run = RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{label}: {exc}", module="config") from exc
    logger.debug("loaded config %s (digest %s)", label, run.model.digest().hex()[:12])
    return run


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", module="config")
    return load_config(name)
