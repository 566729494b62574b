"""ViK: an attention-free vision backbone whose token mixer is a patch-wise RBF KAN."""

from .backbone import Backbone, Block, backbone_forward, block_forward, downsample, patch_embed
from .bases import KanLayer, MlpPatchLayer, bspline_activations, phi_curve_table, rbf_activations, wavelet_activations
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .complexity import count_mixer_flops, count_model_flops, count_params, linearity_sweep
from .config import BackboneConfig, BasisFamily, MixerConfig, RunConfig, StageConfig, TrainConfig, load_config, preset
from .data import Dataset, load_cifar10_binary, synth_dataset
from .errors import CheckFailure, ConfigError, DataError, NumericalError, VikError
from .grad import GradCheckReport, check_layer, finite_diff_check, run_gradcheck
from .mixer import TokenMixer, axis_mix_forward, lowrank_global_forward, mixer_forward, patchify, unpatchify
from .optim import OptimState, adamw_step
from .train import evaluate, train_loop

__all__ = [
    "Backbone",
    "BackboneConfig",
    "BasisFamily",
    "Block",
    "CheckFailure",
    "Checkpoint",
    "ConfigError",
    "DataError",
    "Dataset",
    "GradCheckReport",
    "KanLayer",
    "MixerConfig",
    "MlpPatchLayer",
    "NumericalError",
    "OptimState",
    "RunConfig",
    "StageConfig",
    "TokenMixer",
    "TrainConfig",
    "VikError",
    "adamw_step",
    "axis_mix_forward",
    "backbone_forward",
    "block_forward",
    "bspline_activations",
    "check_layer",
    "checkpoint_load",
    "checkpoint_save",
    "count_mixer_flops",
    "count_model_flops",
    "count_params",
    "downsample",
    "evaluate",
    "finite_diff_check",
    "linearity_sweep",
    "load_cifar10_binary",
    "load_config",
    "lowrank_global_forward",
    "mixer_forward",
    "patch_embed",
    "patchify",
    "phi_curve_table",
    "preset",
    "rbf_activations",
    "run_gradcheck",
    "synth_dataset",
    "train_loop",
    "unpatchify",
    "wavelet_activations",
]
