"""Supervised fine-tuning: 3D lifting or action classification."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np

from .checkpoint import load_backbone, load_checkpoint
from .errors import ConfigError, DataError, NumericError
from .losses import NMPJPE_FORMS, loss_action, loss_finetune
from .metrics import metric_mpjpe, metric_top1
from .network import Model
from .optim import AdamW

TASKS = ("pose3d", "action")


@dataclass
class FinetuneConfig:
    lambda1: float = 0.5
    lambda2: float = 20.0
    epochs: int = 10
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    min_lr_ratio: float = 0.0
    init_checkpoint: Optional[str] = None
    task: str = "pose3d"
    val_fraction: float = 0.2
    eval_every: int = 1
    nmpjpe_form: str = "standard"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("finetune.lambda1 and finetune.lambda2 must be >= 0")
        if self.task not in TASKS:
            raise ConfigError(f"finetune.task must be one of {TASKS}")
        if self.nmpjpe_form not in NMPJPE_FORMS:
            raise ConfigError(f"finetune.nmpjpe_form must be one of {NMPJPE_FORMS}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("finetune.val_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("finetune.epochs, batch_size and eval_every must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_metric: float
    val_name: str = "val_mpjpe"
    wall_seconds: float = 0.0

    def to_line(self, wall=True):
        """One log line with a fixed field order; ``wall=False`` drops the run-dependent clock."""
        line = (f"epoch={self.epoch} step={self.step} train_loss={self.train_loss!r} "
                f"{self.val_name}={self.val_metric!r}")
        return line + f" wall_seconds={self.wall_seconds:.3f}" if wall else line


@dataclass
class FinetuneResult:
    model: Model
    log: list = field(default_factory=list)

    def metric_lines(self):
        """Log lines without the wall-clock column (bit-stable across runs)."""
        return [r.to_line(wall=False) for r in self.log]


def split_dataset(dataset, val_fraction):
    """Last ``val_fraction`` of the sequences become the validation split."""
    n_val = int(math.floor(len(dataset) * val_fraction + 0.5)) if val_fraction > 0 else 0
    if n_val >= len(dataset):
        n_val = len(dataset) - 1
    return list(dataset[:len(dataset) - n_val]), list(dataset[len(dataset) - n_val:])


def stack_inputs(pairs):
    return np.stack([inp.data for inp, _ in pairs])


def stack_targets(pairs):
    return np.stack([tgt.data for _, tgt in pairs])


def stack_labels(pairs):
    labels = [inp.action_label for inp, _ in pairs]
    if any(a is None for a in labels):
        raise DataError("action fine-tuning needs an action label on every record")
    return np.asarray(labels, dtype=np.int64)


def validate(model: Model, pairs, task="pose3d", batch_size=64):
    """Eval-mode MPJPE (pose3d) or Top-1 (action) over ``pairs``."""
    if not pairs:
        return float("nan")
    x = stack_inputs(pairs)
    if task == "action":
        logits = np.concatenate([model.predict_action(x[i:i + batch_size])
                                 for i in range(0, len(x), batch_size)])
        return metric_top1(logits, stack_labels(pairs))
    pred = np.concatenate([model.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return metric_mpjpe(pred, stack_targets(pairs))


def finetune_loop(model: Model, dataset, config: FinetuneConfig, optimizer=None, seed=0,
                  log_file=None, eval_fn=None):
    """Epoch loop minimizing the combined pose loss (or cross-entropy for actions).

    When ``config.init_checkpoint`` is set the backbone is loaded from it
    first; heads keep their fresh initialization.  Validation runs every
    ``eval_every`` epochs and after the last one; other epochs log NaN.
    ``eval_fn(model, val_pairs)`` overrides the validation metric.  With
    ``log_file`` each record is also written as a line.
    """
    if config.init_checkpoint:
        load_backbone(model, load_checkpoint(config.init_checkpoint))
    train, val = split_dataset(dataset, config.val_fraction)
    cfg = model.config
    for inp, _ in train + val:
        if inp.data.shape != (cfg.frames, cfg.joints, 3):
            raise DataError(f"record {inp.name!r} has shape {inp.data.shape}, "
                            f"model expects ({cfg.frames}, {cfg.joints}, 3)")
    x_all = stack_inputs(train)
    y_all = stack_targets(train)
    labels = stack_labels(train) if config.task == "action" else None
    bs = min(config.batch_size, len(train))
    steps_per_epoch = len(train) // bs
    optimizer = optimizer or AdamW(model.params, config.lr, weight_decay=config.weight_decay,
                                   total_steps=steps_per_epoch * config.epochs,
                                   warmup_steps=config.warmup_steps, min_lr_ratio=config.min_lr_ratio)
    rng = np.random.default_rng(seed)
    val_name = "val_top1" if config.task == "action" else "val_mpjpe"
    eval_fn = eval_fn or (lambda m, pairs: validate(m, pairs, config.task))
    result = FinetuneResult(model)
    fh = open(log_file, "w") if log_file else None
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            total = 0.0
            for k in range(steps_per_epoch):
                idx = order[k * bs:(k + 1) * bs]
                if config.task == "action":
                    loss = loss_action(model.forward(x_all[idx], "action", training=True), labels[idx])
                else:
                    pred = model.forward(x_all[idx], "pose", training=True)
                    loss = loss_finetune(pred, y_all[idx], config.lambda1, config.lambda2,
                                         config.nmpjpe_form)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.data)
                step += 1
            due = epoch % config.eval_every == 0 or epoch == config.epochs
            metric = eval_fn(model, val) if due and val else float("nan")
            rec = EpochRecord(epoch, step, total / steps_per_epoch, metric, val_name,
                              time.perf_counter() - start)
            result.log.append(rec)
            if fh:
                fh.write(rec.to_line() + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return result
