"""Experiment runs: pretraining, scenario execution with persisted bundles, sweeps.

A result bundle directory holds

    config_input.yaml     byte copy of the input config (defaults dumped as YAML)
    config_resolved.json  the validated config with every default filled in
    runlog.jsonl          per-step records (see adapt.runlog)
    samples.csv           one row per adapted sample
    metrics.json          {"schema": "open_tta.metrics", "version": 1, "metrics": {...}}
    error_by_round.csv, selection_by_round.csv, confidence_drop.csv
    bundle.json           paths, status, config hash, engine version, duration
    run.log               log lines of this run
"""
from __future__ import annotations

import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from . import __version__
from .adapt.engine import ModelPair, run_scenario
from .adapt.runlog import RunLog, RunLogWriter, write_samples_csv
from .config import ExperimentConfig, LoadedConfig, Settings, get_settings
from .data.streams import build_test_pools, domain_batches, make_stream, stream_length
from .data.synthetic import LabeledPool, generate_source
from .data.tabular import load_tabular
from .errors import ConfigValidationError, EmptyEvaluationError, OpenTTAError, RunAbortedError, ShapeMismatchError
from .metrics.gradsim import GradSimMatrix, grad_cos_sim
from .metrics.online import (
    confidence_drop_stats,
    error_by_round,
    error_rate,
    selection_stats,
    selection_stats_by_round,
    trend_correlation,
)
from .metrics.separation import NegativesMode, OodScoreKind, ood_eval
from .nn.backprop import forward, per_sample_gradients
from .nn.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from .nn.functional import argmax_rows
from .nn.model import SmallClassifier
from .pretrain import evaluate_accuracy, pretrain_source
from .utils.io import canonical_json, sha256_bytes, write_json
from .utils.logger import add_file_handler, get_logger, remove_file_handler

logger = get_logger(__name__)

METRICS_SCHEMA = "open_tta.metrics"
BUNDLE_SCHEMA = "open_tta.bundle"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# pretraining


def source_pools(cfg: ExperimentConfig) -> Tuple[LabeledPool, LabeledPool]:
    train, holdout = generate_source(cfg.source)
    c = cfg.source.num_classes
    if cfg.pretrain.train_path:
        train = load_tabular(cfg.pretrain.train_path, c)
    if cfg.pretrain.holdout_path:
        holdout = load_tabular(cfg.pretrain.holdout_path, c)
    for name, pool in (("train", train), ("holdout", holdout)):
        if len(pool) and pool.features.shape[1] != cfg.source.dim:
            raise ShapeMismatchError(f"{name} pool dimension differs from source.dim", dim=cfg.source.dim, got=pool.features.shape[1])
    return train, holdout


def checkpoint_path(cfg: ExperimentConfig, settings: Settings) -> str:
    if cfg.checkpoint:
        return cfg.checkpoint
    key = canonical_json({"seed": cfg.seed, "source": cfg.source.model_dump(mode="json"), "pretrain": cfg.pretrain.model_dump(mode="json")})
    return os.path.join(settings.checkpoint_dir, f"source-{sha256_bytes(key.encode('utf-8'))[:12]}.ckpt")


@dataclass
class PretrainResult:
    model: SmallClassifier
    accuracy: Optional[float]
    checkpoint_path: str
    checkpoint_sha256: str


def pretrain_from_config(cfg: ExperimentConfig, settings: Optional[Settings] = None, progress: Optional[bool] = None) -> PretrainResult:
    settings = settings or get_settings()
    progress = settings.show_progress if progress is None else progress
    train, holdout = source_pools(cfg)
    logger.info(f"Pretraining on {len(train)} samples: hidden={cfg.pretrain.hidden} epochs={cfg.pretrain.epochs} lr={cfg.pretrain.learning_rate:g}")
    model = SmallClassifier.init(cfg.source.dim, cfg.pretrain.hidden, cfg.source.num_classes, seed=cfg.seed)
    model = pretrain_source(
        model,
        train,
        epochs=cfg.pretrain.epochs,
        lr=cfg.pretrain.learning_rate,
        batch_size=cfg.pretrain.batch_size,
        seed=cfg.seed,
        progress=progress,
    )
    acc = evaluate_accuracy(model, holdout) if len(holdout) else None
    path = checkpoint_path(cfg, settings)
    save_checkpoint(model, path)
    digest = sha256_bytes(to_bytes(model))
    acc_txt = "n/a" if acc is None else f"{acc:.4f}"
    logger.info(f"Saved checkpoint {path} (sha256 {digest[:12]}), held-out accuracy {acc_txt}")
    return PretrainResult(model, acc, path, digest)


def load_source_model(cfg: ExperimentConfig, settings: Settings, auto_pretrain: bool = False) -> SmallClassifier:
    path = checkpoint_path(cfg, settings)
    if not os.path.exists(path):
        if not auto_pretrain:
            raise FileNotFoundError(f"checkpoint not found: {path} (run `pretrain` first)")
        logger.info(f"No checkpoint at {path}, pretraining first")
        return pretrain_from_config(cfg, settings).model
    model = load_checkpoint(path)
    if model.input_dim != cfg.source.dim or model.num_classes != cfg.source.num_classes:
        raise ShapeMismatchError(
            "checkpoint does not match the source spec",
            path=path,
            checkpoint=(model.input_dim, model.num_classes),
            source=(cfg.source.dim, cfg.source.num_classes),
        )
    return model


# ---------------------------------------------------------------------------
# metrics


def gradsim_on_final_round(cfg: ExperimentConfig, model: SmallClassifier) -> GradSimMatrix:
    """Per-sample entropy gradients of the final model on closed-set samples of
    the final round, walking domains backwards until enough are collected."""
    scenario = cfg.scenario
    pools = build_test_pools(scenario)
    last = scenario.rounds - 1
    grads, truth, preds = [], [], []
    collected = 0
    for d in reversed(range(len(scenario.corruption_sequence))):
        for batch in domain_batches(scenario, last, d, pools):
            if batch.size < 2:
                continue
            g = per_sample_gradients(model, batch.features, cfg.adaptation.scope)
            logits, _ = forward(model, batch.features)
            closed = ~batch.open_flags
            grads.append(g[closed])
            truth.append(batch.labels[closed])
            preds.append(argmax_rows(logits)[closed])
            collected += int(closed.sum())
            if collected >= cfg.gradsim_samples:
                break
        if collected >= cfg.gradsim_samples:
            break
    if not grads:
        raise EmptyEvaluationError("no closed-set samples for gradient similarity")
    k = cfg.gradsim_samples
    return grad_cos_sim(np.concatenate(grads)[:k], np.concatenate(truth)[:k], np.concatenate(preds)[:k], cfg.source.num_classes)


def _guard(fn, *args, **kwargs) -> Any:
    try:
        return fn(*args, **kwargs)
    except OpenTTAError as e:
        return {"error": str(e)}


def _error_metrics(log: RunLog) -> Dict[str, Any]:
    series = error_by_round(log.records)
    return {
        "overall": error_rate(log.records),
        "overall_including_open": error_rate(log.records, exclude_open=False),
        "round_1": float(series.iloc[0]),
        "final_round": float(series.iloc[-1]),
        "per_round": [{"round": int(r), "value": float(v)} for r, v in series.items()],
    }


def _selection_metrics(log: RunLog) -> Dict[str, Any]:
    per_round = selection_stats_by_round(log.records)
    defined = per_round["precision"].dropna().astype(float)
    return {
        "pooled": selection_stats(log.records).to_dict(),
        "mean_round_precision": float(defined.mean()) if len(defined) else None,
        "per_round": [
            {"round": int(r.round), "precision": None if pd.isna(r.precision) else float(r.precision), "recall": None if pd.isna(r.recall) else float(r.recall)}
            for r in per_round.itertuples()
        ],
    }


def _confidence_drop_metrics(log: RunLog) -> Dict[str, Any]:
    rows = confidence_drop_stats(log.records)
    return {
        "per_round": [
            {"round": s.round_id, "num_samples": s.num_samples, "num_dropped": s.num_dropped, "wrong_fraction": s.wrong_fraction}
            for s in rows
        ],
        "count_trend_spearman": trend_correlation([s.num_dropped for s in rows]),
    }


def _ood_metrics(log: RunLog) -> Dict[str, Any]:
    final_round = max(r.round_id for r in log.records)
    out: Dict[str, Any] = {}
    for kind in OodScoreKind:
        out[kind.value] = {}
        for mode in NegativesMode:
            out[kind.value][mode.value] = {
                "pooled": _guard(lambda: ood_eval(log.records, kind, mode).to_dict()),
                "final_round": _guard(lambda: ood_eval(log.records, kind, mode, round_id=final_round).to_dict()),
            }
    return out


def compute_metrics(cfg: ExperimentConfig, log: RunLog, final_model: SmallClassifier) -> Dict[str, Any]:
    """Metrics JSON payload. Contains nothing time- or host-dependent."""
    if not log.records:
        raise EmptyEvaluationError("run produced no records")
    out: Dict[str, Any] = {
        "num_steps": len(log.records),
        "num_samples": int(sum(r.batch_size for r in log.records)),
        "skipped_batches": log.skipped_batches,
        "method": cfg.adaptation.describe(),
    }
    if "error" in cfg.metrics:
        out["error"] = _guard(_error_metrics, log)
    if "selection" in cfg.metrics:
        out["selection"] = _selection_metrics(log)
    if "confidence_drop" in cfg.metrics:
        out["confidence_drop"] = _confidence_drop_metrics(log)
    if "ood" in cfg.metrics:
        out["ood"] = _ood_metrics(log)
    if "gradsim" in cfg.metrics:
        out["gradsim"] = _guard(lambda: gradsim_on_final_round(cfg, final_model).to_dict())
    return out


def _series_csvs(directory: str, log: RunLog) -> None:
    err = error_by_round(log.records)
    pd.DataFrame({"round": err.index.astype(int), "value": err.to_numpy()}).to_csv(os.path.join(directory, "error_by_round.csv"), index=False)
    selection_stats_by_round(log.records).to_csv(os.path.join(directory, "selection_by_round.csv"), index=False)
    drops = confidence_drop_stats(log.records)
    pd.DataFrame(
        {
            "round": [d.round_id for d in drops],
            "value": [d.num_dropped for d in drops],
            "wrong_fraction": [d.wrong_fraction for d in drops],
        }
    ).to_csv(os.path.join(directory, "confidence_drop.csv"), index=False)


# ---------------------------------------------------------------------------
# adaptation runs


@dataclass
class ResultBundle:
    directory: str
    status: str
    config_hash: str
    engine_version: str
    duration_seconds: float
    runlog_path: str
    samples_path: str
    metrics_path: Optional[str]
    config_input_path: str
    config_resolved_path: str
    bundle_path: str
    metrics: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None


def default_output_dir(cfg: ExperimentConfig, settings: Settings) -> str:
    label = re.sub(r"[^A-Za-z0-9._-]+", "_", cfg.adaptation.describe()).strip("_")
    return os.path.join(settings.export_dir, f"{label}-{cfg.config_hash()[:10]}")


def _write_config_snapshots(directory: str, loaded: LoadedConfig) -> Tuple[str, str]:
    input_path = os.path.join(directory, "config_input.yaml")
    raw = loaded.raw
    if raw is None:
        raw = yaml.safe_dump(loaded.config.resolved_dict(), sort_keys=True).encode("utf-8")
    with open(input_path, "wb") as f:
        f.write(raw)
    resolved_path = os.path.join(directory, "config_resolved.json")
    write_json(resolved_path, loaded.config.resolved_dict())
    return input_path, resolved_path


def run_adaptation(
    loaded: LoadedConfig,
    settings: Optional[Settings] = None,
    out_dir: Optional[str] = None,
    progress: Optional[bool] = None,
    auto_pretrain: bool = False,
) -> ResultBundle:
    """Run the configured scenario online and persist a result bundle.

    An aborted run still writes its partial run log and bundle.json, then
    raises RunAbortedError.
    """
    settings = settings or get_settings()
    progress = settings.show_progress if progress is None else progress
    cfg = loaded.config
    directory = out_dir or cfg.output_dir or default_output_dir(cfg, settings)
    os.makedirs(directory, exist_ok=True)
    fh = add_file_handler(os.path.join(directory, "run.log"))
    started = time.perf_counter()
    try:
        chash = cfg.config_hash()
        input_path, resolved_path = _write_config_snapshots(directory, loaded)
        source = load_source_model(cfg, settings, auto_pretrain=auto_pretrain)
        pair = ModelPair.from_pretrained(source, cfg.adaptation.method)

        runlog_path = os.path.join(directory, "runlog.jsonl")
        writer = RunLogWriter(runlog_path, {"config_hash": chash, "engine_version": __version__, "method": cfg.adaptation.describe()})

        def round_done(round_id: int, log: RunLog) -> None:
            recs = log.for_round(round_id)
            try:
                logger.info(f"Round {round_id + 1}/{cfg.scenario.rounds}: error={error_rate(recs):.4f} steps={len(recs)}")
            except EmptyEvaluationError:
                logger.info(f"Round {round_id + 1}/{cfg.scenario.rounds}: no closed-set samples")

        logger.info(f"Adapting with {cfg.adaptation.describe()} for {cfg.scenario.rounds} round(s), config {chash[:12]}")
        try:
            log = run_scenario(
                pair,
                cfg.adaptation,
                make_stream(cfg.scenario),
                sink=writer,
                progress=progress,
                total=stream_length(cfg.scenario),
                on_round_end=round_done,
            )
        except Exception as e:
            writer.close("aborted", str(e))
            raise
        writer.close(log.status, log.error, log.skipped_batches)

        samples_path = os.path.join(directory, "samples.csv")
        write_samples_csv(log.records, samples_path)

        metrics: Dict[str, Any] = {}
        metrics_path: Optional[str] = None
        if log.status == "completed" and log.records:
            metrics = compute_metrics(cfg, log, pair.theta_a)
            metrics_path = os.path.join(directory, "metrics.json")
            write_json(metrics_path, {"schema": METRICS_SCHEMA, "version": SCHEMA_VERSION, "metrics": metrics})
            _series_csvs(directory, log)

        bundle = ResultBundle(
            directory=directory,
            status=log.status,
            config_hash=chash,
            engine_version=__version__,
            duration_seconds=time.perf_counter() - started,
            runlog_path=runlog_path,
            samples_path=samples_path,
            metrics_path=metrics_path,
            config_input_path=input_path,
            config_resolved_path=resolved_path,
            bundle_path=os.path.join(directory, "bundle.json"),
            metrics=metrics,
            error=log.error,
        )
        _write_bundle_file(bundle)
        if log.status != "completed":
            raise RunAbortedError("adaptation run aborted", directory=directory, error=log.error)
        if not log.records:
            raise EmptyEvaluationError("adaptation run produced no records", directory=directory)
        logger.info(f"Bundle written to {directory} in {bundle.duration_seconds:.1f}s")
        return bundle
    finally:
        remove_file_handler(fh)


def _write_bundle_file(bundle: ResultBundle) -> None:
    def rel(p: Optional[str]) -> Optional[str]:
        return None if p is None else os.path.relpath(p, bundle.directory)

    write_json(
        bundle.bundle_path,
        {
            "schema": BUNDLE_SCHEMA,
            "version": SCHEMA_VERSION,
            "status": bundle.status,
            "error": bundle.error,
            "config_hash": bundle.config_hash,
            "engine_version": bundle.engine_version,
            "duration_seconds": round(bundle.duration_seconds, 3),
            "paths": {
                "runlog": rel(bundle.runlog_path),
                "samples": rel(bundle.samples_path),
                "metrics": rel(bundle.metrics_path),
                "config_input": rel(bundle.config_input_path),
                "config_resolved": rel(bundle.config_resolved_path),
            },
        },
    )


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("strategy", "lr", "batch_size")


def strategy_from_value(value: Any) -> Dict[str, Any]:
    """`confidence_difference` or a mapping like {kind: confidence_threshold, p: 0.8}."""
    if isinstance(value, str):
        return {"kind": value}
    if isinstance(value, dict) and "kind" in value:
        return dict(value)
    raise ConfigValidationError("strategy values must be a kind name or a mapping with `kind`", value=value)


@dataclass
class SweepCell:
    method: str
    axis: str
    value: Any
    config: ExperimentConfig
    directory: str


def plan_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence[Any],
    methods: Sequence[Any] = (),
    root: str = ".",
) -> List[SweepCell]:
    if axis not in SWEEP_AXES:
        raise ConfigValidationError(f"sweep axis must be one of {SWEEP_AXES}", axis=axis)
    if not values:
        raise ConfigValidationError("sweep axis is empty", axis=axis)
    cells: List[SweepCell] = []
    if axis == "strategy":
        for v in values:
            c = cfg.with_updates(**{"adaptation.strategy": strategy_from_value(v)})
            cells.append(SweepCell(c.adaptation.describe(), axis, c.adaptation.strategy.describe(), c, ""))
    else:
        key = "adaptation.learning_rate" if axis == "lr" else "adaptation.batch_size"
        strategies = [strategy_from_value(m) for m in methods] or [cfg.adaptation.strategy.model_dump(mode="json")]
        for s in strategies:
            for v in values:
                c = cfg.with_updates(**{"adaptation.strategy": s, key: v})
                cells.append(SweepCell(c.adaptation.describe(), axis, v, c, ""))
    for i, cell in enumerate(cells):
        label = re.sub(r"[^A-Za-z0-9._-]+", "_", f"{i:02d}-{cell.method}-{axis}={cell.value}").strip("_")
        cell.directory = os.path.join(root, label)
    return cells


def _run_cell(cell: SweepCell, settings: Settings) -> Dict[str, Any]:
    row: Dict[str, Any] = {"method": cell.method, "axis": cell.axis, "value": cell.value, "directory": cell.directory}
    try:
        bundle = run_adaptation(LoadedConfig(cell.config), settings, out_dir=cell.directory, progress=False)
    except (OpenTTAError, OSError) as e:
        row.update(status="failed", error=str(e))
        return row
    m = bundle.metrics
    err = m.get("error", {})
    sel = m.get("selection", {}).get("pooled", {})
    conf_diff = m.get("ood", {}).get("conf_diff", {}).get("include_closed_wrong", {}).get("final_round", {})
    row.update(
        status=bundle.status,
        error=None,
        round_1_error=err.get("round_1"),
        final_error=err.get("final_round"),
        overall_error=err.get("overall"),
        precision=sel.get("precision"),
        recall=sel.get("recall"),
        auroc_conf_diff=conf_diff.get("auroc"),
    )
    return row


@dataclass
class SweepResult:
    cells: pd.DataFrame
    summary: pd.DataFrame
    cells_path: str
    summary_path: str


def summarize_sweep(cells: pd.DataFrame) -> pd.DataFrame:
    """Mean and (population) standard deviation of the final error per method."""
    ok = cells[cells["status"] == "completed"] if "status" in cells else cells.iloc[0:0]
    rows = []
    for method in dict.fromkeys(cells["method"]):
        vals = ok.loc[ok["method"] == method, "final_error"].dropna().astype(float).to_numpy()
        rows.append(
            {
                "method": method,
                "cells": int((cells["method"] == method).sum()),
                "completed": int(len(vals)),
                "mean_final_error": float(vals.mean()) if len(vals) else None,
                "std_final_error": float(vals.std(ddof=0)) if len(vals) else None,
            }
        )
    return pd.DataFrame(rows, columns=["method", "cells", "completed", "mean_final_error", "std_final_error"])


def run_sweep(
    loaded: LoadedConfig,
    axis: str,
    values: Sequence[Any],
    methods: Sequence[Any] = (),
    settings: Optional[Settings] = None,
    out_dir: Optional[str] = None,
    workers: Optional[int] = None,
    progress: Optional[bool] = None,
) -> SweepResult:
    """One bundle per cell under `out_dir`; failed cells are recorded and the sweep continues."""
    settings = settings or get_settings()
    progress = settings.show_progress if progress is None else progress
    workers = workers or settings.sweep_workers
    cfg = loaded.config
    root = out_dir or cfg.output_dir or os.path.join(settings.export_dir, f"sweep-{axis}-{cfg.config_hash()[:10]}")
    plan_sweep(cfg, axis, values, methods, root)
    os.makedirs(root, exist_ok=True)

    # every cell shares the source model; pretrain once in this process
    ckpt = checkpoint_path(cfg, settings)
    if not os.path.exists(ckpt):
        pretrain_from_config(cfg, settings, progress=progress)
    cfg = cfg.with_updates(checkpoint=ckpt, output_dir=None)
    cells = plan_sweep(cfg, axis, values, methods, root)
    logger.info(f"Sweep over {axis}: {len(cells)} cell(s), {workers} worker(s), output {root}")

    rows: List[Dict[str, Any]] = []
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, c, settings) for c in cells]
            for fut in tqdm(futures, disable=not progress, desc="sweep"):
                rows.append(fut.result())
    else:
        for c in tqdm(cells, disable=not progress, desc="sweep"):
            rows.append(_run_cell(c, settings))
    for r in rows:
        if r["status"] != "completed":
            logger.error(f"Sweep cell {r['directory']} failed: {r['error']}")

    table = pd.DataFrame(rows)
    summary = summarize_sweep(table)
    cells_path = os.path.join(root, "sweep_cells.csv")
    summary_path = os.path.join(root, "sweep_summary.csv")
    table.to_csv(cells_path, index=False)
    summary.to_csv(summary_path, index=False)
    logger.info(f"Saved sweep tables: {cells_path}, {summary_path}")
    return SweepResult(table, summary, cells_path, summary_path)
