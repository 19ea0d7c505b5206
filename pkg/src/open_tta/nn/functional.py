from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from scipy.special import softmax as _softmax

from ..errors import InvalidDistributionError, NonFiniteError

LOG_CLAMP = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax (max-subtracted)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax input contains non-finite values")
    return _softmax(logits, axis=-1)


def safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_CLAMP))


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy -sum p log p of one distribution, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidDistributionError("entropy expects a single row", ndim=p.ndim)
    if np.any(p < 0):
        raise InvalidDistributionError("negative probability", min=float(p.min()))
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise InvalidDistributionError("probabilities do not sum to 1", sum=total)
    return float(-np.sum(p * safe_log(p)))


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    return -np.sum(probs * safe_log(probs), axis=-1)


def entropy_grad_logits(probs: np.ndarray) -> np.ndarray:
    """d H(softmax(z)) / dz, row-wise: -p * (log p + H)."""
    h = entropy_rows(probs)
    return -probs * (safe_log(probs) + h[..., None])


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back onto the logits, row-wise."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(probs, axis=-1).astype(np.int64)


def log_sum_exp(logits: np.ndarray) -> np.ndarray:
    return logsumexp(logits, axis=-1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lse = log_sum_exp(logits)
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)
