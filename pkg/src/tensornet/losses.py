"""Losses returning ``(value, gradient)``; values are accumulated in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..errors import DegenerateBatchError, StructuralError, ValidationError

PRED_CLAMP = 1e-7


def pairwise_sq_distances(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    norms = (f * f).sum(axis=1)
    d = norms[:, None] + norms[None, :] - 2.0 * (f @ f.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def pair_labels(product_ids: list[str], cells: list[int] | None = None) -> np.ndarray:
    """1 where two samples share a product (and, when ``cells`` is given, a position cell); zero diagonal."""
    ids = np.asarray(product_ids)
    labels = ids[:, None] == ids[None, :]
    if cells is not None:
        c = np.asarray(cells)
        labels &= c[:, None] == c[None, :]
    np.fill_diagonal(labels, False)
    return labels.astype(np.uint8)


def dbl_loss(features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Distance-based logistic loss over a batch of flattened fingerprints ``(B, D)``.

    ``p_ij = softmax_{k != i}(-d_ik)`` with squared Euclidean ``d``; each anchor
    contributes ``-log sum_{j positive} p_ij`` and anchors without positives are
    skipped. Returns the mean over counted anchors and its gradient.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise StructuralError(f"DBL needs a (B >= 2, D) feature matrix, got shape {f.shape}")
    lab = np.asarray(labels).astype(bool)
    if lab.shape != (f.shape[0], f.shape[0]):
        raise StructuralError(f"label matrix {lab.shape} does not match batch size {f.shape[0]}")
    np.fill_diagonal(lab, False)

    logits = -pairwise_sq_distances(f)
    np.fill_diagonal(logits, -np.inf)
    lse_all = logsumexp(logits, axis=1)
    pos_logits = np.where(lab, logits, -np.inf)
    anchors = lab.any(axis=1)
    count = int(anchors.sum())
    if count == 0:
        raise DegenerateBatchError("no anchor in the batch has a positive pair")

    lse_pos = logsumexp(pos_logits[anchors], axis=1)
    loss = float(-(lse_pos - lse_all[anchors]).mean())

    p = np.exp(logits - lse_all[:, None])
    q = np.zeros_like(p)
    q[anchors] = np.exp(pos_logits[anchors] - lse_pos[:, None])
    # dL/dd_ij = (q_ij - p_ij) / A for counted anchors
    s = np.where(anchors[:, None], (q - p) / count, 0.0)
    t = s + s.T
    grad = 2.0 * (t.sum(axis=1)[:, None] * f - t @ f)
    return loss, grad


@dataclass(frozen=True)
class DiceFocal:
    loss: float
    dice: float
    focal: float
    grad: np.ndarray


def dice_focal_loss(
    pred: np.ndarray,
    truth: np.ndarray,
    *,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth: float = 1.0,
) -> DiceFocal:
    """
    Dice (global sums, smoothing ``smooth``) plus mean focal loss with constant ``alpha``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the clamp is treated as the
    identity in the gradient.
    """
    p_raw = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p_raw.shape != t.shape:
        raise StructuralError(f"prediction {p_raw.shape} and truth {t.shape} differ in shape")
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("truth must be binary")
    p = np.clip(p_raw, PRED_CLAMP, 1.0 - PRED_CLAMP)
    n = p.size

    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + smooth
    dice = 1.0 - (2.0 * inter + smooth) / denom
    d_dice = -(2.0 * t * denom - (2.0 * inter + smooth)) / denom**2

    p_t = np.where(t == 1, p, 1.0 - p)
    one_minus = 1.0 - p_t
    log_pt = np.log(p_t)
    focal_px = -alpha * one_minus**gamma * log_pt
    focal = float(focal_px.mean())
    d_focal_dpt = alpha * gamma * one_minus ** (gamma - 1.0) * log_pt - alpha * one_minus**gamma / p_t
    d_focal = np.where(t == 1, d_focal_dpt, -d_focal_dpt) / n

    return DiceFocal(loss=dice + focal, dice=dice, focal=focal, grad=d_dice + d_focal)
