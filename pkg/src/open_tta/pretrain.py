from __future__ import annotations

import numpy as np
from tqdm import tqdm

from .data.synthetic import LabeledPool
from .errors import DivergenceError, EmptyEvaluationError
from .nn.backprop import ForwardTrace, backward, forward
from .nn.functional import argmax_rows, cross_entropy, cross_entropy_grad
from .nn.model import ParamScope, SmallClassifier, StatsMode
from .nn.optim import Adam
from .utils.logger import get_logger

logger = get_logger(__name__)

BN_MOMENTUM = 0.1


def _update_running_stats(model: SmallClassifier, trace: ForwardTrace, momentum: float) -> None:
    n = trace.batch_size
    for blk, cache in zip(model.layers, trace.layers):
        unbiased = cache.var * n / (n - 1)
        blk.bn.running_mean[...] = (1.0 - momentum) * blk.bn.running_mean + momentum * cache.mean
        blk.bn.running_var[...] = (1.0 - momentum) * blk.bn.running_var + momentum * unbiased


def pretrain_source(
    model: SmallClassifier,
    train: LabeledPool,
    epochs: int,
    lr: float,
    batch_size: int = 128,
    seed: int = 0,
    progress: bool = False,
) -> SmallClassifier:
    """Supervised cross-entropy training with batch statistics; running
    statistics follow an EMA (momentum 0.1). Returns a copy in SOURCE mode.
    With epochs == 0 a single pass only populates the running statistics."""
    if len(train) == 0:
        raise EmptyEvaluationError("training set is empty")
    out = model.copy()
    out.set_stats_mode(StatsMode.TEST_BATCH)
    rng = np.random.default_rng([seed, 11])
    opt = Adam(lr)

    def batches():
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) >= 2:
                yield train.features[idx], train.labels[idx]

    if epochs == 0:
        for xb, _ in batches():
            _, trace = forward(out, xb)
            _update_running_stats(out, trace, BN_MOMENTUM)

    for epoch in tqdm(range(epochs), disable=not progress, desc="pretrain"):
        losses = []
        for xb, yb in batches():
            logits, trace = forward(out, xb)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError("pretraining loss is not finite", epoch=epoch)
            _update_running_stats(out, trace, BN_MOMENTUM)
            grads = backward(out, trace, cross_entropy_grad(logits, yb), ParamScope.ALL_PARAMS)
            opt.step(out, grads)
            losses.append(loss)
        logger.debug(f"epoch {epoch + 1}/{epochs} loss={np.mean(losses):.4f}")

    out.set_stats_mode(StatsMode.SOURCE)
    out.validate()
    return out


def evaluate_accuracy(model: SmallClassifier, pool: LabeledPool) -> float:
    """Clean accuracy with the model's current statistics mode."""
    if len(pool) == 0:
        raise EmptyEvaluationError("evaluation pool is empty")
    logits, _ = forward(model, pool.features)
    return float(np.mean(argmax_rows(logits) == pool.labels))
