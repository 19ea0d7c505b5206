from __future__ import annotations

from typing import Tuple

import numpy as np

from ..errors import ShapeMismatchError
from ..nn.functional import entropy_grad_logits, entropy_rows, safe_log, softmax_vjp


def _check(y_hat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if y_hat.ndim != 2 or mask.shape != (y_hat.shape[0],):
        raise ShapeMismatchError("mask length must equal batch size", probs=y_hat.shape, mask=mask.shape)
    return mask


def tta_loss(y_hat: np.ndarray, mask: np.ndarray, lambda_max: float) -> float:
    """Mean entropy of the selected samples minus lambda_max times the entropy
    of the batch-mean prediction (taken over all samples)."""
    mask = _check(y_hat, mask)
    selected = entropy_rows(y_hat[mask]).mean() if mask.any() else 0.0
    y_bar = y_hat.mean(axis=0)
    return float(selected - lambda_max * entropy_rows(y_bar))


def tta_loss_grad(y_hat: np.ndarray, mask: np.ndarray, lambda_max: float) -> np.ndarray:
    """Gradient of `tta_loss` with respect to the logits that produced y_hat."""
    mask = _check(y_hat, mask)
    n = y_hat.shape[0]
    grad = np.zeros_like(y_hat)
    k = int(mask.sum())
    if k:
        grad[mask] = entropy_grad_logits(y_hat[mask]) / k
    if lambda_max:
        y_bar = y_hat.mean(axis=0)
        # dH(y_bar)/dy_bar = -(log y_bar + 1), each row contributes 1/n
        d_bar = -(safe_log(y_bar) + 1.0)
        grad -= lambda_max * softmax_vjp(y_hat, np.broadcast_to(d_bar / n, y_hat.shape))
    return grad


def gce_loss(y_hat: np.ndarray, c_o: np.ndarray, mask: np.ndarray, q: float) -> float:
    """Generalized cross entropy (1 - p^q) / q on the original prediction, averaged over selected samples."""
    mask = _check(y_hat, mask)
    if not mask.any():
        return 0.0
    p = y_hat[np.arange(len(c_o)), c_o][mask]
    return float(np.mean((1.0 - p ** q) / q))


def gce_loss_grad(y_hat: np.ndarray, c_o: np.ndarray, mask: np.ndarray, q: float) -> np.ndarray:
    mask = _check(y_hat, mask)
    grad = np.zeros_like(y_hat)
    k = int(mask.sum())
    if not k:
        return grad
    rows = np.arange(len(c_o))
    p = y_hat[rows, c_o]
    onehot = np.zeros_like(y_hat)
    onehot[rows, c_o] = 1.0
    # d/dz (1 - p_c^q)/q = -p_c^q (e_c - p)
    grad = -(p ** q)[:, None] * (onehot - y_hat) / k
    grad[~mask] = 0.0
    return grad


def loss_and_grad(kind: str, y_hat: np.ndarray, c_o: np.ndarray, mask: np.ndarray, lambda_max: float, q: float) -> Tuple[float, np.ndarray]:
    if kind == "gce":
        return gce_loss(y_hat, c_o, mask, q), gce_loss_grad(y_hat, c_o, mask, q)
    return tta_loss(y_hat, mask, lambda_max), tta_loss_grad(y_hat, mask, lambda_max)
