from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Annotated, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ConfigValidationError, ShapeMismatchError
from .corruptions import CorruptionOp, default_corruption_sequence
from .synthetic import LabeledPool, SyntheticSourceSpec, sample_classes


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray  # C marks an open-set sample
    open_flags: np.ndarray
    domain_id: int
    round_id: int
    index_in_domain: int = 0
    short: bool = False

    def __post_init__(self) -> None:
        n = self.labels.shape[0]
        if self.features.shape[0] != n or self.open_flags.shape != (n,):
            raise ShapeMismatchError("batch arrays disagree on size", features=self.features.shape, labels=self.labels.shape)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


class OpenSetOff(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    mode: Literal["off"] = "off"


class OpenSetMixed(BaseModel):
    """Half of every batch comes from clusters of unseen classes.

    Without explicit means, open clusters mirror the closed means through their
    centroid, scaled by `mirror_scale`.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")
    mode: Literal["mixed"] = "mixed"
    open_class_means: Optional[List[List[float]]] = None
    mirror_scale: float = Field(2.5, gt=0.0)


OpenSetSpec = Annotated[Union[OpenSetOff, OpenSetMixed], Field(discriminator="mode")]


class ScenarioSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: Optional[SyntheticSourceSpec] = None
    corruption_sequence: List[CorruptionOp] = Field(default_factory=default_corruption_sequence, min_length=1)
    rounds: int = Field(50, ge=1)
    open_set: OpenSetSpec = Field(default_factory=OpenSetMixed)
    batch_size: Optional[int] = Field(None, ge=1)
    # closed-set test samples per domain
    pool_per_domain: int = Field(400, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="before")
    @classmethod
    def _yaml_off(cls, data):
        # bare `off` in YAML loads as False
        if isinstance(data, dict) and isinstance(data.get("open_set"), dict) and data["open_set"].get("mode") is False:
            data = dict(data, open_set=dict(data["open_set"], mode="off"))
        return data

    @property
    def is_mixed(self) -> bool:
        return isinstance(self.open_set, OpenSetMixed)

    def resolved(self) -> Tuple[SyntheticSourceSpec, int, int]:
        if self.source is None or self.batch_size is None:
            raise ConfigValidationError("scenario needs a source spec and a batch size")
        return self.source, self.batch_size, self.seed or 0


def open_class_means(scenario: ScenarioSpec) -> np.ndarray:
    source, _, _ = scenario.resolved()
    assert isinstance(scenario.open_set, OpenSetMixed)
    if scenario.open_set.open_class_means is not None:
        means = np.asarray(scenario.open_set.open_class_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != source.dim:
            raise ShapeMismatchError("open_class_means must have the source dimension", dim=source.dim, shape=means.shape)
        return means
    closed = source.resolved_means()
    centroid = closed.mean(axis=0)
    return centroid - scenario.open_set.mirror_scale * (closed - centroid)


def _balanced_counts(total: int, k: int) -> np.ndarray:
    counts = np.full(k, total // k)
    counts[: total % k] += 1
    return counts


@dataclass
class EvalPools:
    closed: LabeledPool
    open_features: Optional[np.ndarray]


def build_test_pools(scenario: ScenarioSpec) -> EvalPools:
    """The clean test pools every domain re-corrupts. Fixed for the whole scenario."""
    source, _, seed = scenario.resolved()
    means = source.resolved_means()
    rng = np.random.default_rng([seed, 1])
    feats, labels = sample_classes(means, source.class_cov_scale, _balanced_counts(scenario.pool_per_domain, source.num_classes), rng)
    closed = LabeledPool(feats, labels, source.num_classes)
    open_feats = None
    if scenario.is_mixed:
        omeans = open_class_means(scenario)
        rng_o = np.random.default_rng([seed, 2])
        open_feats, _ = sample_classes(omeans, source.class_cov_scale, _balanced_counts(scenario.pool_per_domain, len(omeans)), rng_o)
    return EvalPools(closed, open_feats)


def domain_batches(scenario: ScenarioSpec, round_id: int, domain_id: int, pools: Optional[EvalPools] = None) -> List[LabeledBatch]:
    """Batches of one (round, domain) position. Pure function of the spec and position."""
    source, n, seed = scenario.resolved()
    pools = pools or build_test_pools(scenario)
    op: CorruptionOp = scenario.corruption_sequence[domain_id]
    rng = np.random.default_rng([seed, 3, round_id, domain_id])
    c = source.num_classes

    perm_c = rng.permutation(len(pools.closed))
    xc = op.apply(pools.closed.features[perm_c], rng)
    yc = pools.closed.labels[perm_c]
    xo = None
    if pools.open_features is not None:
        perm_o = rng.permutation(pools.open_features.shape[0])
        xo = op.apply(pools.open_features[perm_o], rng)

    k_closed = math.ceil(n / 2) if xo is not None else n
    k_open = n // 2 if xo is not None else 0
    out: List[LabeledBatch] = []
    o_off = 0
    for b, start in enumerate(range(0, len(yc), k_closed)):
        fc = xc[start : start + k_closed]
        lc = yc[start : start + k_closed]
        r = len(lc)
        n_open = 0
        if xo is not None:
            n_open = k_open if r == k_closed else min(r, k_open)
        fo = xo[o_off : o_off + n_open] if xo is not None else np.zeros((0, source.dim))
        o_off += n_open
        feats = np.concatenate([fc, fo])
        labels = np.concatenate([lc, np.full(n_open, c, dtype=np.int64)])
        flags = np.concatenate([np.zeros(r, dtype=bool), np.ones(n_open, dtype=bool)])
        order = rng.permutation(len(labels))
        out.append(
            LabeledBatch(
                features=feats[order],
                labels=labels[order],
                open_flags=flags[order],
                domain_id=domain_id,
                round_id=round_id,
                index_in_domain=b,
                short=len(labels) < n,
            )
        )
    return out


def stream_length(scenario: ScenarioSpec) -> int:
    _, n, _ = scenario.resolved()
    k_closed = math.ceil(n / 2) if scenario.is_mixed else n
    per_domain = math.ceil(scenario.pool_per_domain / k_closed)
    return scenario.rounds * len(scenario.corruption_sequence) * per_domain


def make_stream(scenario: ScenarioSpec) -> Iterator[LabeledBatch]:
    """Rounds in order, domains in order within a round, never resetting."""
    pools = build_test_pools(scenario)
    for r in range(scenario.rounds):
        for d in range(len(scenario.corruption_sequence)):
            yield from domain_batches(scenario, r, d, pools)
