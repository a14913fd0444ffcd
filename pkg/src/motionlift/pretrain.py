"""Masked self-distillation pre-training with an EMA teacher.

The student sees M independently masked replicas of the embedded 2D input and
regresses, through a d -> d head, the layer-normalized average of the
teacher's last K layer outputs computed once on the unmasked input.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .errors import ConfigError, NumericError, ShapeError
from .network import Model
from .optim import AdamW

MASK_AXES = ("frames", "tokens")
LOSS_SUPPORTS = ("masked", "all")
# parameter-free target normalization; small enough that LN is idempotent to ~1e-8
TARGET_LN_EPS = 1e-12


@dataclass
class PretrainConfig:
    mask_prob: float = 0.8
    replicas: int = 3
    target_layers: int = 8
    tau_start: float = 0.999
    tau_end: float = 0.9999
    steps: int = 1000
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    mask_axis: str = "frames"
    loss_support: str = "masked"

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError("pretrain.mask_prob must lie in (0, 1)")
        if self.replicas < 1:
            raise ConfigError("pretrain.replicas must be >= 1")
        if self.target_layers < 1:
            raise ConfigError("pretrain.target_layers must be >= 1")
        for name in ("tau_start", "tau_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"pretrain.{name} must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("pretrain.steps and pretrain.batch_size must be positive")
        if self.mask_axis not in MASK_AXES:
            raise ConfigError(f"pretrain.mask_axis must be one of {MASK_AXES}")
        if self.loss_support not in LOSS_SUPPORTS:
            raise ConfigError(f"pretrain.loss_support must be one of {LOSS_SUPPORTS}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MaskPlan:
    batch: int
    replicas: int
    length: int
    mask: np.ndarray         # (B*M, L) bool, row m*B + b belongs to replica m of sample b
    fill_noise: np.ndarray   # (B*M, L, *slot_shape)
    per_row_count: int
    axis: str = "frames"


def mask_count(mask_prob, length):
    return int(np.floor(mask_prob * length + 0.5))


def make_mask_plan(batch, length, config: PretrainConfig, seed, slot_shape=()):
    """Exactly round(P*L) masked positions per row, drawn without replacement."""
    count = mask_count(config.mask_prob, length)
    if count < 1 or count >= length:
        raise ValueError(f"mask_prob={config.mask_prob} with L={length} masks {count} positions; "
                         "need between 1 and L-1")
    rows = batch * config.replicas
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((rows, length)), axis=1)[:, :count]
    mask = np.zeros((rows, length), dtype=bool)
    np.put_along_axis(mask, picks, True, axis=1)
    noise = rng.standard_normal((rows, length) + tuple(slot_shape))
    return MaskPlan(batch, config.replicas, length, mask, noise, count, config.mask_axis)


def replicate_for_multimask(f0, replicas):
    """Stack ``replicas`` copies along the batch axis: copy m of sample b at row m*B + b."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    f0 = ag.as_tensor(f0)
    if replicas == 1:
        return f0
    return ag.concat([f0] * replicas, axis=0)


def token_mask(plan: MaskPlan, frames, joints):
    """Per-token (B*M, T, J) boolean view of the plan."""
    if plan.axis == "frames":
        if plan.length != frames:
            raise ShapeError(f"frame mask length {plan.length} != T={frames}")
        return np.broadcast_to(plan.mask[:, :, None], (plan.mask.shape[0], frames, joints))
    if plan.length != frames * joints:
        raise ShapeError(f"token mask length {plan.length} != T*J={frames * joints}")
    return plan.mask.reshape(-1, frames, joints)


def apply_mask(f0, plan: MaskPlan):
    """Overwrite masked frames (or tokens) of replicated features with the plan's noise."""
    f0 = ag.as_tensor(f0)
    rows, t, j, d = f0.shape
    if rows != plan.mask.shape[0]:
        raise ShapeError(f"features have {rows} rows, mask plan has {plan.mask.shape[0]}")
    mask = token_mask(plan, t, j)
    noise = plan.fill_noise.reshape(rows, t, j, d)
    return ag.masked_fill(f0, mask[..., None], noise)


class TeacherState:
    """Frozen EMA copy of the student with a linearly increasing decay tau."""

    def __init__(self, model: Model, tau_start=0.999, tau_end=0.9999, total_steps=1, step=0):
        self.model = model.freeze()
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.total_steps = total_steps
        self.step = step
        self.forward_calls = 0
        self.forward_rows = []
        self._lock = threading.Lock()

    @classmethod
    def from_student(cls, student: Model, config: PretrainConfig, total_steps=None):
        return cls(student.copy(), config.tau_start, config.tau_end, total_steps or config.steps)

    @property
    def tau(self):
        frac = min(self.step / self.total_steps, 1.0) if self.total_steps > 0 else 1.0
        return self.tau_start + (self.tau_end - self.tau_start) * frac

    @property
    def params(self):
        return self.model.params

    def encode(self, x):
        """Unmasked eval-mode forward; returns LayerActivations without gradients."""
        with self._lock, ag.no_grad():
            self.forward_calls += 1
            self.forward_rows.append(int(np.shape(x)[0]))
            return self.model.encode(x, training=False)


def ema_update(teacher: TeacherState, student: Model):
    """delta <- tau*delta + (1 - tau)*theta at the current tau, then advance the schedule.

    Batch-norm running statistics are copied from the student, not averaged.
    """
    tp, sp = teacher.model.params, student.params
    bad = sorted(n for n in set(tp) | set(sp) if n not in tp or n not in sp or tp[n].shape != sp[n].shape)
    if bad:
        raise ShapeError(f"teacher/student tensors differ: {', '.join(bad)}")
    tau = teacher.tau
    new = {n: tau * tp[n].data + (1.0 - tau) * sp[n].data for n in tp}
    with teacher._lock:
        for n, arr in new.items():
            tp[n].data = arr
        for name, st in student.bn.items():
            teacher.model.bn[name].running_mean = st.running_mean.copy()
            teacher.model.bn[name].running_var = st.running_var.copy()
        teacher.step += 1
    return teacher


def _plain_ln(x, eps=TARGET_LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def build_target(activations, k):
    """LN(mean of LN(F_i) over the last ``k`` layers), parameter-free LN over channels.

    ``activations`` is a LayerActivations or a list of per-layer arrays.
    """
    layers = getattr(activations, "layers", activations)
    n = len(layers)
    if not 1 <= k <= n:
        raise ValueError(f"target_layers K={k} must lie in [1, {n}]")
    outs = [getattr(rec, "fused", rec) for rec in layers[n - k:]]
    outs = [o.data if isinstance(o, ag.Tensor) else np.asarray(o, dtype=np.float64) for o in outs]
    return _plain_ln(sum(_plain_ln(o) for o in outs) / k)


def pretrain_loss(student_features, target, plan: MaskPlan, support="masked"):
    """Mean squared error against the shared target, restricted to masked tokens.

    The target (B, T, J, d) is reused for every replica and never receives a
    gradient.
    """
    s = ag.as_tensor(student_features)
    target = target.data if isinstance(target, ag.Tensor) else np.asarray(target, dtype=np.float64)
    rows, t, j, d = s.shape
    if target.shape[1:] != (t, j, d) or rows != target.shape[0] * plan.replicas:
        raise ShapeError(f"student {s.shape} vs target {target.shape} with {plan.replicas} replicas")
    rep = np.concatenate([target] * plan.replicas, axis=0)
    if support == "masked":
        weight = token_mask(plan, t, j).astype(np.float64)
    elif support == "all":
        weight = np.ones((rows, t, j))
    else:
        raise ValueError(f"loss support must be one of {LOSS_SUPPORTS}")
    total = weight.sum()
    if total == 0:
        raise ValueError("pretrain loss over an empty mask")
    diff = s - rep
    per_token = (diff * diff).sum(axis=-1)
    return (per_token * weight).sum() * (1.0 / (total * d))


def _slot_shape(config: PretrainConfig, model: Model):
    cfg = model.config
    if config.mask_axis == "frames":
        return cfg.frames, (cfg.joints, cfg.dim)
    return cfg.frames * cfg.joints, (cfg.dim,)


def pretrain_step(student: Model, teacher: TeacherState, batch, config: PretrainConfig,
                  optimizer: AdamW, seed=0):
    """One self-distillation update; ``batch`` is (B, T, J, 3) 2D input only."""
    batch = np.asarray(batch, dtype=np.float64)
    b = batch.shape[0]
    if config.target_layers > student.config.layers:
        raise ConfigError(f"pretrain.target_layers={config.target_layers} exceeds "
                          f"model.layers={student.config.layers}")
    target = build_target(teacher.encode(batch), config.target_layers)

    length, slot = _slot_shape(config, student)
    plan = make_mask_plan(b, length, config, seed, slot)

    def hook(f0):
        return apply_mask(replicate_for_multimask(f0, config.replicas), plan)

    acts = student.encode(batch, training=True, feature_hook=hook)
    pred = student.pretrain_head(acts.final)
    loss = pretrain_loss(pred, target, plan, config.loss_support)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite pre-training loss at step {teacher.step}")
    student.zero_grad()
    loss.backward()
    optimizer.step()
    ema_update(teacher, student)
    return float(loss.data)


@dataclass
class PretrainResult:
    losses: list
    teacher: TeacherState
    steps: int = field(default=0)


def pretrain_loop(student: Model, inputs, config: PretrainConfig, seed=0, teacher=None,
                  optimizer=None, callback=None):
    """Run ``config.steps`` pre-training steps over the (S, T, J, 3) 2D inputs.

    Minibatches cycle through seeded permutations of the sequences.  Returns
    the per-step losses and the final teacher.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4:
        raise ShapeError(f"expected (S, T, J, 3) inputs, got {inputs.shape}")
    teacher = teacher or TeacherState.from_student(student, config)
    optimizer = optimizer or AdamW(student.params, config.lr, weight_decay=config.weight_decay,
                                   total_steps=config.steps, warmup_steps=config.warmup_steps)
    rng = np.random.default_rng(seed)
    seeds = np.random.SeedSequence(seed).spawn(config.steps)
    order, pos = rng.permutation(len(inputs)), 0
    bs = min(config.batch_size, len(inputs))
    losses = []
    for step in range(config.steps):
        if pos + bs > len(order):
            order, pos = rng.permutation(len(inputs)), 0
        idx = order[pos:pos + bs]
        pos += bs
        mask_seed = int(seeds[step].generate_state(1)[0])
        loss = pretrain_step(student, teacher, inputs[idx], config, optimizer, seed=mask_seed)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return PretrainResult(losses, teacher, config.steps)
