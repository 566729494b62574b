"""Component ablation: retrain one base config with a basis family, basis count or branch changed."""

import logging
from pathlib import Path

from pydantic import BaseModel

from .complexity import count_params
from .config import BackboneConfig, BasisFamily, RunConfig
from .data import Dataset
from .errors import ConfigError
from .storage import write_csv
from .train import train_loop

logger = logging.getLogger(__name__)

ABLATION_HEADER = ("arm", "family", "num_basis", "axis_mix", "global_map", "params", "train_acc", "val_acc")


def _with_basis_count(config: BackboneConfig, m: int) -> BackboneConfig:
    stages = [stage.model_copy(update={"num_basis": m}) for stage in config.stages]
    return config.with_changes(stages=[s.model_dump() for s in stages])


ARMS = {
    "full": lambda c: c,
    "M4": lambda c: _with_basis_count(c, 4),
    "M6": lambda c: _with_basis_count(c, 6),
    "M8": lambda c: _with_basis_count(c, 8),
    "M10": lambda c: _with_basis_count(c, 10),
    "bspline": lambda c: c.with_changes(basis=BasisFamily.BSPLINE),
    "wavelet": lambda c: c.with_changes(basis=BasisFamily.WAVELET),
    "mlp": lambda c: c.with_changes(basis=BasisFamily.MLP),
    "no_global": lambda c: c.with_changes(use_global_map=False),
    "no_axis": lambda c: c.with_changes(use_axis_mix=False),
}


class AblationRow(BaseModel):
    arm: str
    family: str
    num_basis: int
    axis_mix: bool
    global_map: bool
    params: int
    train_acc: float
    val_acc: float | None

    def row(self) -> list[str]:
        val = "" if self.val_acc is None else f"{self.val_acc:.9g}"
        return [self.arm, self.family, str(self.num_basis), str(int(self.axis_mix)), str(int(self.global_map)),
                str(self.params), f"{self.train_acc:.9g}", val]


def arm_config(base: BackboneConfig, arm: str) -> BackboneConfig:
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; choose from {', '.join(ARMS)}", module="ablation")
    return ARMS[arm](base).with_changes(name=f"{base.name}-{arm}")


def run_ablation(run: RunConfig, train_set: Dataset, val_set: Dataset | None, arms: list[str], *,
                 epochs: int | None = None, out_dir: Path | None = None, data: str = "synth") -> list[AblationRow]:
    """Train every arm on the same seed and data; writes ``ablation.csv`` when ``out_dir`` is given."""
    configs = {arm: arm_config(run.model, arm) for arm in arms}
    rows = []
    for arm, model_cfg in configs.items():
        logger.info("🧪 ablation arm %s", arm)
        arm_dir = Path(out_dir) / arm if out_dir is not None else None
        result = train_loop(run.model_copy(update={"model": model_cfg}), train_set, val_set,
                            epochs=epochs, out_dir=arm_dir, data=data)
        last = result.history[-1]
        rows.append(AblationRow(
            arm=arm,
            family=model_cfg.basis.value,
            num_basis=model_cfg.stages[0].num_basis,
            axis_mix=model_cfg.use_axis_mix,
            global_map=model_cfg.use_global_map,
            params=count_params(model_cfg).total,
            train_acc=last.train_acc,
            val_acc=last.val_acc,
        ))
        if out_dir is not None:
            write_csv(Path(out_dir) / "ablation.csv", ABLATION_HEADER, (r.row() for r in rows))
    return rows
