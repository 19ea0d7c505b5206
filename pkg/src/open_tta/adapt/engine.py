from __future__ import annotations

from dataclasses import dataclass
from typing import Annotated, Callable, Iterable, Literal, Optional, Protocol, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ..data.streams import LabeledBatch
from ..errors import NonFiniteError, OpenTTAError, ShapeMismatchError
from ..nn.backprop import ForwardTrace, GradientSet, backward, forward
from ..nn.functional import argmax_rows, log_sum_exp, softmax
from ..nn.model import ParamScope, SmallClassifier, StatsMode
from ..nn.optim import Adam, Sgd
from ..utils.logger import get_logger
from .losses import loss_and_grad
from .runlog import RunLog, StepRecord
from .selection import SelectAll, SelectionStrategy, apply_strategy, selection_scores

logger = get_logger(__name__)


class _Spec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SgdSpec(_Spec):
    kind: Literal["sgd"] = "sgd"


class AdamSpec(_Spec):
    kind: Literal["adam"] = "adam"
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class SelectedEntropy(_Spec):
    kind: Literal["selected_entropy"] = "selected_entropy"


class Gce(_Spec):
    kind: Literal["gce"] = "gce"
    q: float = Field(0.8, gt=0.0, le=1.0)


OptimizerSpec = Annotated[Union[SgdSpec, AdamSpec], Field(discriminator="kind")]
LossKind = Annotated[Union[SelectedEntropy, Gce], Field(discriminator="kind")]


class AdaptationConfig(_Spec):
    # tent: gradient adaptation; source: frozen source model; bn_adapt: test-batch statistics only
    method: Literal["tent", "source", "bn_adapt"] = "tent"
    strategy: SelectionStrategy = Field(default_factory=SelectAll)
    scope: ParamScope = ParamScope.AFFINE_ONLY
    lambda_max: float = Field(0.5, ge=0.0)
    # None -> 0.5 for affine-only, 0.05 for all parameters; 0 freezes theta_a
    learning_rate: Optional[float] = Field(None, ge=0.0)
    optimizer: OptimizerSpec = Field(default_factory=AdamSpec)
    batch_size: int = Field(200, ge=1)
    loss: LossKind = Field(default_factory=SelectedEntropy)
    update_every: int = Field(1, ge=1)
    seed: int = 0

    @property
    def effective_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.5 if self.scope == ParamScope.AFFINE_ONLY else 0.05

    def describe(self) -> str:
        if self.method != "tent":
            return self.method
        base = "tent" if self.scope == ParamScope.AFFINE_ONLY else "ent"
        if self.loss.kind == "gce":
            base = f"gce(q={self.loss.q:g})"
        return f"{base}+{self.strategy.describe()}"


@dataclass
class ModelPair:
    theta_o: SmallClassifier
    theta_a: SmallClassifier

    def __post_init__(self) -> None:
        if self.theta_o.signature != self.theta_a.signature:
            raise ShapeMismatchError("theta_o and theta_a architectures differ")
        if self.theta_o is self.theta_a:
            raise ShapeMismatchError("theta_o and theta_a must be distinct objects")
        self.theta_o.freeze()

    @classmethod
    def from_pretrained(cls, model: SmallClassifier, method: str = "tent") -> "ModelPair":
        """Both models in test-batch statistics mode, except for the `source`
        method which keeps the stored statistics."""
        mode = StatsMode.SOURCE if method == "source" else StatsMode.TEST_BATCH
        theta_o = model.copy()
        theta_a = model.copy()
        theta_o.set_stats_mode(mode)
        theta_a.set_stats_mode(mode)
        return cls(theta_o, theta_a)


@dataclass
class PairPrediction:
    y_tilde: np.ndarray
    y_hat: np.ndarray
    c_o: np.ndarray
    c_a: np.ndarray
    logits_tilde: np.ndarray
    logits_hat: np.ndarray
    trace_hat: ForwardTrace


def predict_pair(pair: ModelPair, features: np.ndarray) -> PairPrediction:
    logits_tilde, _ = forward(pair.theta_o, features)
    logits_hat, trace_hat = forward(pair.theta_a, features)
    y_tilde = softmax(logits_tilde)
    y_hat = softmax(logits_hat)
    return PairPrediction(
        y_tilde=y_tilde,
        y_hat=y_hat,
        c_o=argmax_rows(y_tilde),
        c_a=argmax_rows(y_hat),
        logits_tilde=logits_tilde,
        logits_hat=logits_hat,
        trace_hat=trace_hat,
    )


class AdaptationState:
    """Optimizer moments plus the gradient accumulator used when update_every > 1."""

    def __init__(self, config: AdaptationConfig) -> None:
        lr = config.effective_learning_rate
        if isinstance(config.optimizer, AdamSpec):
            self.optimizer: Union[Sgd, Adam] = Adam(lr, config.optimizer.beta1, config.optimizer.beta2, config.optimizer.eps)
        else:
            self.optimizer = Sgd(lr)
        self.accum: Optional[GradientSet] = None
        self.accum_count = 0
        self.steps_seen = 0


def make_adaptation_state(config: AdaptationConfig) -> AdaptationState:
    return AdaptationState(config)


def tta_step(pair: ModelPair, state: AdaptationState, config: AdaptationConfig, batch: LabeledBatch, step: int = 0) -> StepRecord:
    pred = predict_pair(pair, batch.features)
    scores = selection_scores(pred.y_tilde, pred.y_hat, pred.logits_tilde, pred.logits_hat, pred.c_o)
    mask = apply_strategy(config.strategy, scores)
    q = config.loss.q if isinstance(config.loss, Gce) else 1.0
    loss, dlogits = loss_and_grad(config.loss.kind, pred.y_hat, pred.c_o, mask, config.lambda_max, q)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite adaptation loss", step=step)

    record = StepRecord(
        step=step,
        round_id=batch.round_id,
        domain_id=batch.domain_id,
        labels=batch.labels.copy(),
        open_flags=batch.open_flags.copy(),
        c_o=pred.c_o,
        c_a=pred.c_a,
        conf_tilde=scores.conf_tilde,
        conf_hat=scores.conf_hat,
        logit_tilde=scores.logit_tilde,
        logit_hat=scores.logit_hat,
        max_hat=scores.max_hat,
        entropy_hat=scores.entropy_hat,
        msp=scores.max_hat,
        max_logit=pred.logits_hat.max(axis=1),
        energy=log_sum_exp(pred.logits_hat),
        selected=mask,
        num_classes=scores.num_classes,
        loss=float(loss),
        num_selected=int(mask.sum()),
    )

    state.steps_seen += 1
    if config.method != "tent" or not mask.any():
        return record

    grads = backward(pair.theta_a, pred.trace_hat, dlogits, config.scope)
    if not grads.is_finite():
        raise NonFiniteError("non-finite gradient", step=step)
    state.accum = grads if state.accum is None else state.accum.added(grads)
    state.accum_count += 1
    if state.steps_seen % config.update_every != 0:
        return record

    update = state.accum.scaled(1.0 / state.accum_count)
    state.accum, state.accum_count = None, 0
    if config.effective_learning_rate == 0.0:
        return record
    before = pair.theta_a.flat_parameters(config.scope)
    moments = state.optimizer.snapshot()
    record.update_norm = state.optimizer.step(pair.theta_a, update)
    if not (np.isfinite(record.update_norm) and np.all(np.isfinite(pair.theta_a.flat_parameters(config.scope)))):
        # roll back parameters and optimizer moments together
        pair.theta_a.load_flat_parameters(config.scope, before)
        state.optimizer.restore(moments)
        raise NonFiniteError("update produced non-finite parameters", step=step)
    record.updated = True
    return record


class RecordSink(Protocol):
    def write(self, record: StepRecord) -> None: ...


def run_scenario(
    pair: ModelPair,
    config: AdaptationConfig,
    stream: Iterable[LabeledBatch],
    sink: Optional[RecordSink] = None,
    progress: bool = False,
    total: Optional[int] = None,
    on_round_end: Optional[Callable[[int, RunLog], None]] = None,
) -> RunLog:
    """Adapt online over `stream`; every record holds pre-update predictions.

    A failing step stops the run; the log returned is marked aborted and holds
    every completed step.
    """
    state = make_adaptation_state(config)
    log = RunLog(meta={"method": config.describe()})
    current_round: Optional[int] = None
    step = 0
    for batch in tqdm(stream, total=total, disable=not progress, desc=config.describe()):
        if current_round is not None and batch.round_id != current_round and on_round_end is not None:
            on_round_end(current_round, log)
        current_round = batch.round_id
        if batch.size < 2:
            log.skipped_batches += 1
            logger.warning(f"Skipping batch of size {batch.size} (round {batch.round_id}, domain {batch.domain_id})")
            continue
        try:
            record = tta_step(pair, state, config, batch, step)
        except OpenTTAError as e:
            log.status = "aborted"
            log.error = str(e)
            logger.error(f"Step {step} failed, aborting run: {e}")
            return log
        log.records.append(record)
        if sink is not None:
            sink.write(record)
        logger.debug(f"step={step} round={batch.round_id} domain={batch.domain_id} loss={record.loss:.5f} selected={record.num_selected}/{record.batch_size}")
        step += 1
    if current_round is not None and on_round_end is not None:
        on_round_end(current_round, log)
    return log
