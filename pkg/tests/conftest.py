"""Shared fixtures: seeded generators, tiny configs and run files."""

import json
from pathlib import Path

import numpy as np
import pytest

from vik.config import BackboneConfig, BasisKind, MixerConfig, RunConfig, SynthConfig, TrainConfig
from vik.grad import tiny_backbone_config


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> BackboneConfig:
    """32x32 input, depths [1,1,1,1], channels [8,16,24,32]."""
    return tiny_backbone_config()


@pytest.fixture
def small_mixer() -> MixerConfig:
    return MixerConfig(channels=4, patch=2, basis=BasisKind(num_basis=4), kernel=3, rank=3)


@pytest.fixture
def quick_run(tiny_config) -> RunConfig:
    """A run that trains in seconds: 4 images per class, 2 epochs."""
    return RunConfig(
        seed=1,
        model=tiny_config,
        train=TrainConfig(epochs=2, batch_size=16, synth=SynthConfig(n_per_class=4, val_per_class=2)),
    )


def write_run(path: Path, run: RunConfig) -> Path:
    path.write_text(json.dumps(run.model_dump(mode="json")), encoding="utf-8")
    return path


@pytest.fixture
def quick_run_file(tmp_path, quick_run) -> Path:
    return write_run(tmp_path / "quick.json", quick_run)
