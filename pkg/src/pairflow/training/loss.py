"""Sequence loss over all refinement iterates, and flow error metrics."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import tensor as T
from ..tensor import ContractError, Tensor

# end-point-error histogram bin edges, in pixels
EPE_BINS = (0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, np.inf)


def _valid_mask(valid, shape) -> np.ndarray:
    B, _, H, W = shape
    v = np.ones((B, H, W), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(B, H, W)
    if not v.any():
        raise ContractError("validity mask is empty")
    return v


def sequence_loss(preds: Sequence[Tensor], gt, valid=None, gamma: float = 0.8) -> Tensor:
    """``sum_i gamma^(N-i) * mean_valid ||gt - pred_i||_1``.

    The per-pixel norm sums |du| + |dv|; the mean runs over valid pixels.
    """
    if not 0.0 < gamma <= 1.0:
        raise ContractError(f"gamma must lie in (0, 1], got {gamma}")
    gt = np.asarray(gt)
    if gt.ndim == 3:
        gt = gt[None]
    v = _valid_mask(valid, gt.shape)
    w = Tensor(np.broadcast_to(v[:, None], gt.shape).astype(np.float64))
    gt_t = Tensor(gt)
    n = len(preds)
    total = None
    for i, pred in enumerate(preds, 1):
        if pred.shape != gt.shape:
            pred = T.reshape(pred, gt.shape)
        err = T.sum(T.absolute(pred - gt_t) * w) * (gamma ** (n - i) / v.sum())
        total = err if total is None else total + err
    return total


def evaluate(pred, gt, valid=None) -> dict:
    """EPE, KITTI-style F1-all (percent) and an EPE histogram over valid pixels."""
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    v = _valid_mask(valid, gt.shape)
    epe = np.sqrt(((pred - gt) ** 2).sum(axis=1))[v]
    mag = np.sqrt((gt ** 2).sum(axis=1))[v]
    outlier = (epe > 3.0) & (epe > 0.05 * mag)
    hist, _ = np.histogram(epe, bins=np.array(EPE_BINS))
    return {
        "epe": float(epe.mean()),
        "f1_all": float(100.0 * outlier.mean()),
        "epe_hist": hist.tolist(),
        "bins": [float(b) for b in EPE_BINS],
    }
