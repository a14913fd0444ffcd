"""Evaluation metrics and per-action report aggregation."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import DataError, NumericError, ShapeError
from .losses import loss_mpjpe

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(5.0, 150.0 + 1e-9, 5.0)
PROTOCOLS = ("p1", "p2", "pck", "auc", "action")
METRIC_NAMES = {"p1": "mpjpe", "p2": "pmpjpe", "pck": "pck", "auc": "auc", "action": "top1"}


def _arrays(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def metric_mpjpe(pred, gt):
    pred, gt = _arrays(pred, gt)
    if pred.ndim == 2:  # a single (J, 3) frame
        pred, gt = pred[None], gt[None]
    with ag.no_grad():
        return float(loss_mpjpe(pred, gt).data)


def procrustes_align(pred, gt):
    """Similarity-align ``pred`` to ``gt`` per frame.

    Accepts (J, 3) or (..., J, 3).  Rotation comes from the SVD of the centred
    cross-covariance with a reflection fix; scale is the least-squares optimum.
    """
    pred, gt = _arrays(pred, gt)
    if pred.shape[-1] != 3 or pred.shape[-2] < 3:
        raise ShapeError(f"procrustes needs (..., J>=3, 3) poses, got {pred.shape}")
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    p0 = pred - mu_p
    g0 = gt - mu_g
    if np.any(np.abs(g0).max(axis=(-2, -1)) == 0.0):
        raise NumericError("degenerate ground truth: all joints coincide")
    # cov = sum_j g0_j p0_j^T; want R maximizing tr(R^T cov)
    cov = np.swapaxes(g0, -1, -2) @ p0
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    s = s.copy()
    s[..., -1] *= d
    u = u.copy()
    u[..., :, -1] *= d[..., None]
    rot = u @ vt
    p_sq = (p0 * p0).sum(axis=(-2, -1))
    scale = np.where(p_sq > 0, s.sum(axis=-1) / np.where(p_sq > 0, p_sq, 1.0), 0.0)
    aligned = scale[..., None, None] * (p0 @ np.swapaxes(rot, -1, -2)) + mu_g
    return aligned


def metric_pmpjpe(pred, gt):
    pred, gt = _arrays(pred, gt)
    return metric_mpjpe(procrustes_align(pred, gt), gt)


def joint_errors(pred, gt):
    pred, gt = _arrays(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def metric_pck(pred, gt, threshold=PCK_THRESHOLD):
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    err = joint_errors(pred, gt)
    return float((err < threshold).mean() * 100.0)


def metric_auc(pred, gt, thresholds=AUC_THRESHOLDS):
    err = joint_errors(pred, gt).ravel()
    return float(np.mean([(err < t).mean() for t in thresholds]) * 100.0)


def metric_top1(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float((np.argmax(logits, axis=-1) == labels).mean() * 100.0)


@dataclass
class EvalReport:
    protocol: str
    overall: dict
    per_action: dict = field(default_factory=dict)
    sequence_count: int = 0
    frame_count: int = 0

    def to_dict(self):
        metric = METRIC_NAMES[self.protocol]
        actions = sorted(self.per_action, key=lambda a: (a is None, a if a is not None else 0))
        columns = ["none" if a is None else str(a) for a in actions]
        return {
            "protocol": self.protocol,
            "metric": metric,
            "columns": columns + ["avg"],
            "values": [self.per_action[a][metric] for a in actions] + [self.overall[metric]],
            "overall": self.overall,
            "sequence_count": self.sequence_count,
            "frame_count": self.frame_count,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _sequence_metric(protocol, pred, gt):
    if protocol == "p1":
        return metric_mpjpe(pred, gt)
    if protocol == "p2":
        return metric_pmpjpe(pred, gt)
    if protocol == "pck":
        return metric_pck(pred, gt)
    return metric_auc(pred, gt)


def _predictor(model, name):
    fn = getattr(model, name, None)
    if fn is not None:
        return fn
    if callable(model):
        return model
    raise TypeError(f"model provides neither {name}() nor __call__")


def evaluate(model, dataset, protocol="p1", unit_scale=1.0):
    """Run ``model`` over each (input2d, target3d) pair and aggregate.

    ``model`` is anything with ``predict(x)`` (and ``predict_action(x)`` for
    the action protocol) or a plain callable taking a (1, T, J, 3) array.
    Pose errors are multiplied by ``unit_scale`` before thresholding, e.g.
    1000 to report metre-scale data in millimetres.  Overall and per-action
    values are frame-weighted means of per-sequence values.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if not dataset:
        raise DataError("cannot evaluate an empty dataset")
    metric = METRIC_NAMES[protocol]
    sums = defaultdict(float)
    frames = defaultdict(int)
    total_sum, total_frames = 0.0, 0
    for inp, tgt in dataset:
        x = inp.data[None]
        if protocol == "action":
            if inp.action_label is None:
                raise DataError(f"record {inp.name!r} has no action label")
            logits = _predictor(model, "predict_action")(x)
            value = metric_top1(logits, [inp.action_label])
        else:
            pred = np.asarray(_predictor(model, "predict")(x))[0] * unit_scale
            value = _sequence_metric(protocol, pred, tgt.data * unit_scale)
        w = tgt.frames
        sums[inp.action_label] += value * w
        frames[inp.action_label] += w
        total_sum += value * w
        total_frames += w
    per_action = {a: {metric: sums[a] / frames[a]} for a in sums}
    return EvalReport(protocol, {metric: total_sum / total_frames}, per_action,
                      len(dataset), total_frames)
