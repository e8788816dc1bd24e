"""Training losses on ``(B, N, 3)`` source fields."""

from __future__ import annotations

import numpy as np

from .ops import ShapeError
from .tensor import Tensor, node

LOSS_KINDS = ("l1", "l2", "cosine", "l1_plus_recon")
DEFAULT_LAMBDA_REC = 1e-4


def _check(pred: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    return target


def l1(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    t = _check(pred, target)
    diff = pred.values - t
    k = pred.dtype.type(1.0 / diff.size)
    return node(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,),
                lambda g: (np.sign(diff) * (g * k),), "l1")


def l2(pred: Tensor, target) -> Tensor:
    t = _check(pred, target)
    diff = pred.values - t
    k = pred.dtype.type(2.0 / diff.size)
    return node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,),
                lambda g: (diff * (g * k),), "l2")


def cosine(pred: Tensor, target) -> Tensor:
    """1 − mean per-voxel cosine over the voxels where both vectors are nonzero."""
    t = _check(pred, target)
    p = pred.values
    np_ = np.sqrt((p * p).sum(axis=-1, keepdims=True))
    nt = np.sqrt((t * t).sum(axis=-1, keepdims=True))
    valid = (np_ > 0) & (nt > 0)
    count = int(valid.sum())
    safe_p = np.where(valid, np_, 1)
    safe_t = np.where(valid, nt, 1)
    cos = np.where(valid, (p * t).sum(axis=-1, keepdims=True) / (safe_p * safe_t), 0)
    value = 1.0 - (cos.sum() / count if count else 0.0)

    def back(g):
        if not count:
            return (np.zeros_like(p),)
        dcos = t / (safe_p * safe_t) - cos * p / (safe_p * safe_p)
        return (np.where(valid, dcos, 0) * (-g / count),)

    return node(np.asarray(value, dtype=pred.dtype), (pred,), back, "cosine")


def l1_plus_recon(pred: Tensor, target, gain: np.ndarray, y: np.ndarray,
                  lambda_rec: float = DEFAULT_LAMBDA_REC) -> Tensor:
    """``l1 + λ_rec · mean_b ‖L vec(pred_b) − y_b‖²``."""
    base = l1(pred, target)
    bsz = pred.shape[0]
    gain = np.asarray(gain, dtype=pred.dtype)
    y = np.asarray(y, dtype=pred.dtype).reshape(bsz, -1)
    flat = pred.values.reshape(bsz, -1)
    if gain.shape != (y.shape[1], flat.shape[1]):
        raise ShapeError(f"lead field {gain.shape} does not match prediction/measurement")
    resid = flat @ gain.T - y
    k = pred.dtype.type(lambda_rec / bsz)
    rec = node(np.asarray((resid * resid).sum() * k, dtype=pred.dtype), (pred,),
               lambda g: (((resid @ gain) * (2 * k * g)).reshape(pred.shape),), "recon")
    from .ops import add

    return add(base, rec)


def compute_loss(kind: str, pred: Tensor, target, gain=None, y=None,
                 lambda_rec: float = DEFAULT_LAMBDA_REC) -> Tensor:
    if kind == "l1":
        return l1(pred, target)
    if kind == "l2":
        return l2(pred, target)
    if kind == "cosine":
        return cosine(pred, target)
    if kind == "l1_plus_recon":
        if gain is None or y is None:
            raise ValueError("l1_plus_recon needs the lead field gain and the measurements")
        return l1_plus_recon(pred, target, gain, y, lambda_rec)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
