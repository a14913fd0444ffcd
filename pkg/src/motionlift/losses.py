"""Differentiable training objectives.

Pose losses take (..., T, J, 3) predictions; any leading axes are batch axes.
Predictions may be Tensors (gradients flow) or arrays; ground truth is
always treated as constant.
"""

import numpy as np

from . import autograd as ag
from .errors import NumericError, ShapeError

NMPJPE_FORMS = ("standard", "literal")


def _pair(pred, gt):
    pred = ag.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, ag.Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim < 3 or pred.shape[-1] != 3:
        raise ShapeError(f"expected (..., T, J, 3) poses, got {pred.shape}")
    return pred, gt


def loss_mpjpe(pred, gt):
    pred, gt = _pair(pred, gt)
    return ag.norm(pred - gt, axis=-1).mean()


def loss_nmpjpe(pred, gt, form="standard"):
    """MPJPE after the least-squares scale s = <pred, gt> / <pred, pred>.

    The scale is computed per sequence (over T, J and xyz).  ``form="literal"``
    multiplies the unscaled MPJPE by s instead of scaling the prediction.
    """
    if form not in NMPJPE_FORMS:
        raise ValueError(f"nmpjpe form must be one of {NMPJPE_FORMS}")
    pred, gt = _pair(pred, gt)
    axes = (-3, -2, -1)
    denom = (pred * pred).sum(axis=axes, keepdims=True)
    if np.any(denom.data == 0.0):
        raise NumericError("N-MPJPE undefined for an all-zero prediction")
    scale = (pred * gt).sum(axis=axes, keepdims=True) / denom
    if form == "standard":
        return loss_mpjpe(scale * pred, gt)
    per_seq = ag.norm(pred - gt, axis=-1).mean(axis=(-2, -1))
    return (scale.reshape(per_seq.shape) * per_seq).mean()


def loss_velocity(pred, gt):
    pred, gt = _pair(pred, gt)
    if pred.shape[-3] < 2:
        raise ShapeError("velocity loss needs at least 2 frames")
    v_pred = pred[..., 1:, :, :] - pred[..., :-1, :, :]
    v_gt = gt[..., 1:, :, :] - gt[..., :-1, :, :]
    return ag.norm(v_pred - v_gt, axis=-1).mean()


def loss_finetune(pred, gt, lambda1=0.5, lambda2=20.0, nmpjpe_form="standard"):
    total = loss_mpjpe(pred, gt)
    if lambda1:
        total = total + lambda1 * loss_nmpjpe(pred, gt, nmpjpe_form)
    if lambda2:
        total = total + lambda2 * loss_velocity(pred, gt)
    return total


def loss_action(logits, labels):
    """Mean cross-entropy of (B, C) logits against integer labels."""
    logits = ag.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not pair up")
    c = logits.shape[1]
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    logp = ag.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(labels)), labels].mean()
