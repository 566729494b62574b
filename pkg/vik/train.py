"""Desk-scale supervised training: loss, evaluation, the epoch loop and its outputs.

A run directory receives::

    metrics.csv        epoch,step,train_loss,train_acc,val_acc,lr (rewritten after every epoch)
    last_good.vikc     parameters after the latest finished epoch
    best.vikc          best validation accuracy so far (when a validation split exists)
    final.vikc         parameters at the end of the run

Every checkpoint carries the optimizer moments, the generator state and the metrics
history, so ``train_loop(..., resume=checkpoint)`` continues a run exactly where
the checkpoint left it.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .backbone import Backbone
from .checkpoint import Checkpoint, checkpoint_save
from .config import RunConfig
from .data import Dataset, Prefetcher, epoch_plan
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .optim import OptimState, adamw_step, clip_grad_norm, lr_schedule
from .storage import write_csv

logger = logging.getLogger(__name__)

EVAL_BATCH = 256
METRICS_HEADER = ("epoch", "step", "train_loss", "train_acc", "val_acc", "lr")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``-log softmax(logits)[label]`` and its gradient ``(softmax - onehot) / B``."""
    b, k = logits.shape
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DataError(f"label {int(labels[bad[0]])} at index {int(bad[0])} outside 0..{k - 1}", module="train")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    return loss, (grad / b).astype(logits.dtype, copy=False)


class EvalResult(BaseModel):
    correct: int
    total: int
    loss: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def evaluate(model: Backbone, dataset: Dataset, batch_size: int = EVAL_BATCH) -> EvalResult:
    """Top-1 accuracy and mean loss in dataset order with frozen parameters."""
    want = (model.config.in_channels, *model.config.image_size)
    if dataset.image_shape != want:
        raise ShapeError(f"model expects images {want}, dataset has {dataset.image_shape}", module="train")
    correct, loss_sum = 0, 0.0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        logits = model(images)
        loss, _ = cross_entropy(logits, labels)
        loss_sum += loss * labels.size
        correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
    return EvalResult(correct=correct, total=len(dataset), loss=loss_sum / max(len(dataset), 1))


class EpochMetrics(BaseModel):
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    val_acc: float | None = None
    lr: float

    def row(self) -> list[str]:
        val = "" if self.val_acc is None else f"{self.val_acc:.9g}"
        return [str(self.epoch), str(self.step), f"{self.train_loss:.9g}", f"{self.train_acc:.9g}", val, f"{self.lr:.9g}"]


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    checkpoint: Checkpoint
    model: Backbone
    out_dir: Path | None = None
    paths: dict[str, Path] = field(default_factory=dict)


def _snapshot(run: RunConfig, model: Backbone, optim: OptimState, rng: np.random.Generator,
              history: list[EpochMetrics], data: str) -> Checkpoint:
    last = history[-1] if history else None
    meta = {
        "seed": run.seed,
        "data": data,
        "epoch": last.epoch if last else 0,
        "train_acc": last.train_acc if last else None,
        "val_acc": last.val_acc if last else None,
        "history": [m.model_dump() for m in history],
        "train": run.train.model_dump(mode="json"),
    }
    return Checkpoint(
        config=run.model,
        params={k: v.copy() for k, v in model.named_parameters()},
        optim=OptimState(lr=optim.lr, betas=optim.betas, eps=optim.eps, weight_decay=optim.weight_decay,
                         step=optim.step, m=dict(optim.m), v=dict(optim.v)),
        rng_state=rng.bit_generator.state,
        meta=meta,
    )


def train_step(model: Backbone, optim: OptimState, images: np.ndarray, labels: np.ndarray, lr: float,
               clip_norm: float | None) -> float:
    logits, tape = model.forward(images)
    loss, dlogits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss at optimizer step {optim.step + 1}", module="train")
    _, grads = model.backward(tape, dlogits)
    grads, _ = clip_grad_norm(grads, clip_norm)
    model.set_parameters(adamw_step(model.parameters(), grads, optim, lr=lr))
    return loss


def _restore(run: RunConfig, ckpt: Checkpoint, model: Backbone, rng: np.random.Generator,
             epochs: int) -> tuple[OptimState, list[EpochMetrics]]:
    if ckpt.config.digest() != run.model.digest():
        raise ConfigError("resume checkpoint was written for a different model config", module="train")
    if ckpt.optim is None or ckpt.rng_state is None:
        raise ConfigError("resume checkpoint has no optimizer or generator state", module="train")
    history = [EpochMetrics.model_validate(m) for m in ckpt.meta.get("history", [])]
    done = history[-1].epoch if history else 0
    if done >= epochs:
        raise ConfigError(f"checkpoint already finished epoch {done} of {epochs}", module="train")
    model.set_parameters(ckpt.params)
    rng.bit_generator.state = ckpt.rng_state
    return ckpt.optim, history


def train_loop(run: RunConfig, train_set: Dataset, val_set: Dataset | None = None, *,
               epochs: int | None = None, out_dir: Path | None = None, data: str = "synth",
               resume: Checkpoint | None = None) -> TrainResult:
    """Train from scratch, or continue from ``resume``; bit-deterministic given (run config, datasets).

    A resumed run reproduces the uninterrupted one byte for byte. A non-finite
    loss aborts with ``NumericalError`` and leaves ``last_good.vikc`` from the
    previous epoch in place.
    """
    cfg = run.train
    epochs = epochs or cfg.epochs
    rng = np.random.default_rng(run.seed)
    model = Backbone(run.model, rng)
    history: list[EpochMetrics] = []
    if resume is not None:
        optim, history = _restore(run, resume, model, rng, epochs)
    else:
        optim = OptimState.for_params(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                                      weight_decay=cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    paths: dict[str, Path] = {}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {name: out_dir / f"{name}.vikc" for name in ("last_good", "best", "final")}
        paths["metrics"] = out_dir / "metrics.csv"
        if resume is None:
            checkpoint_save(_snapshot(run, model, optim, rng, history, data), paths["last_good"])

    start = history[-1].epoch if history else 0
    if start:
        logger.info("⏩ resuming %s after epoch %d at step %d", run.model.name, start, optim.step)
    logger.info("🚀 training %s: %d params, %d epochs x %d steps", run.model.name, model.num_parameters(),
                epochs, steps_per_epoch)
    best_val = max((m.val_acc for m in history if m.val_acc is not None), default=-1.0)
    step, lr = optim.step, history[-1].lr if history else cfg.lr
    for epoch in range(start + 1, epochs + 1):
        plans = epoch_plan(n, cfg.batch_size, rng, flip=cfg.hflip)
        loss_sum = 0.0
        try:
            for images, labels in Prefetcher(train_set, plans, cfg.prefetch):
                lr = lr_schedule(step, total_steps, cfg.lr, cfg.min_lr, cfg.warmup_frac)
                loss_sum += train_step(model, optim, images, labels, lr, cfg.clip_norm) * labels.size
                step += 1
        except NumericalError:
            logger.error("aborting epoch %d at step %d; last good checkpoint: %s", epoch, step,
                         paths.get("last_good", "(not written)"))
            raise
        train_acc = evaluate(model, train_set).accuracy
        val_acc = evaluate(model, val_set).accuracy if val_set is not None and len(val_set) else None
        metrics = EpochMetrics(epoch=epoch, step=step, train_loss=loss_sum / n, train_acc=train_acc,
                               val_acc=val_acc, lr=lr)
        history.append(metrics)
        logger.info("epoch %d/%d loss %.4f train %.4f val %s lr %.2e", epoch, epochs, metrics.train_loss,
                    train_acc, "-" if val_acc is None else f"{val_acc:.4f}", lr)
        if out_dir is not None:
            write_csv(paths["metrics"], METRICS_HEADER, (m.row() for m in history))
            snap = _snapshot(run, model, optim, rng, history, data)
            checkpoint_save(snap, paths["last_good"])
            if val_acc is not None and val_acc > best_val:
                best_val = val_acc
                checkpoint_save(snap, paths["best"])

    final = _snapshot(run, model, optim, rng, history, data)
    if out_dir is not None:
        checkpoint_save(final, paths["final"])
    return TrainResult(history=history, checkpoint=final, model=model, out_dir=out_dir, paths=paths)
