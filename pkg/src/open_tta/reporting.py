from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from .errors import BundleFormatError, SchemaVersionError
from .experiment import BUNDLE_SCHEMA, METRICS_SCHEMA, SCHEMA_VERSION
from .utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class LoadedBundle:
    name: str
    directory: str
    bundle: Dict[str, Any]
    metrics: Dict[str, Any]


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"corrupted JSON in {path}: {e.msg} at line {e.lineno}", path=path)
    if not isinstance(doc, dict):
        raise BundleFormatError(f"expected a JSON object in {path}", path=path)
    return doc


def _check_schema(doc: Dict[str, Any], schema: str, path: str) -> None:
    if doc.get("schema") != schema or doc.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported schema in {path}",
            path=path,
            schema=doc.get("schema"),
            version=doc.get("version"),
            expected=f"{schema}@{SCHEMA_VERSION}",
        )


def load_bundle(path: str) -> LoadedBundle:
    """`path` is a bundle directory or its bundle.json."""
    directory = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    bundle_path = os.path.join(directory, "bundle.json")
    bundle = _read_json(bundle_path)
    _check_schema(bundle, BUNDLE_SCHEMA, bundle_path)
    rel = (bundle.get("paths") or {}).get("metrics")
    if rel is None:
        raise BundleFormatError(f"bundle has no metrics (status {bundle.get('status')})", path=bundle_path)
    metrics_path = os.path.join(directory, rel)
    metrics_doc = _read_json(metrics_path)
    _check_schema(metrics_doc, METRICS_SCHEMA, metrics_path)
    name = os.path.basename(os.path.normpath(directory))
    return LoadedBundle(name, directory, bundle, metrics_doc.get("metrics", {}))


@dataclass
class Summary:
    bundle: str
    config_hash: str
    method: str
    round_1_error: Optional[float]
    final_error: Optional[float]
    overall_error: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    auroc_conf_diff: Optional[float]
    auroc_msp: Optional[float]
    fpr95_conf_diff: Optional[float]
    gradsim_diagonal: Optional[float]
    gradsim_off_diagonal: Optional[float]
    drop_trend: Optional[float]


NUMERIC_COLUMNS = [f.name for f in fields(Summary)][3:]


def _dig(d: Any, *keys: str) -> Any:
    for k in keys:
        if not isinstance(d, dict):
            return None
        d = d.get(k)
    return d


def compute_summary(b: LoadedBundle) -> Summary:
    m = b.metrics
    ood = m.get("ood", {})
    return Summary(
        bundle=b.name,
        config_hash=str(b.bundle.get("config_hash", "")),
        method=str(m.get("method", "")),
        round_1_error=_dig(m, "error", "round_1"),
        final_error=_dig(m, "error", "final_round"),
        overall_error=_dig(m, "error", "overall"),
        precision=_dig(m, "selection", "pooled", "precision"),
        recall=_dig(m, "selection", "pooled", "recall"),
        auroc_conf_diff=_dig(ood, "conf_diff", "include_closed_wrong", "final_round", "auroc"),
        auroc_msp=_dig(ood, "msp", "include_closed_wrong", "final_round", "auroc"),
        fpr95_conf_diff=_dig(ood, "conf_diff", "include_closed_wrong", "final_round", "fpr_at_tpr95"),
        gradsim_diagonal=_dig(m, "gradsim", "mean_diagonal"),
        gradsim_off_diagonal=_dig(m, "gradsim", "mean_off_diagonal"),
        drop_trend=_dig(m, "confidence_drop", "count_trend_spearman"),
    )


def summary_table(summaries: Sequence[Summary]) -> pd.DataFrame:
    """One row per metric, one column per bundle; with exactly two bundles a
    `delta` column holds second minus first."""
    df = pd.DataFrame([asdict(s) for s in summaries]).set_index("bundle").T
    if len(summaries) == 2:
        a, b = df.columns
        first = pd.to_numeric(df[a].where(df.index.isin(NUMERIC_COLUMNS)), errors="coerce")
        second = pd.to_numeric(df[b].where(df.index.isin(NUMERIC_COLUMNS)), errors="coerce")
        df["delta"] = second - first
    return df


def error_curves(bundles: Sequence[LoadedBundle]) -> pd.DataFrame:
    cols = {}
    for b in bundles:
        series = _dig(b.metrics, "error", "per_round") or []
        cols[b.name] = pd.Series({int(p["round"]): p["value"] for p in series}, dtype="float64")
    df = pd.DataFrame(cols)
    df.index.name = "round"
    return df.reset_index()


def auroc_table(bundles: Sequence[LoadedBundle]) -> pd.DataFrame:
    rows = []
    for b in bundles:
        for kind, modes in (b.metrics.get("ood") or {}).items():
            for mode, scopes in modes.items():
                for scope, res in scopes.items():
                    rows.append(
                        {
                            "bundle": b.name,
                            "score": kind,
                            "negatives": mode,
                            "rounds": scope,
                            "auroc": res.get("auroc"),
                            "fpr_at_tpr95": res.get("fpr_at_tpr95"),
                            "error": res.get("error"),
                        }
                    )
    return pd.DataFrame(rows, columns=["bundle", "score", "negatives", "rounds", "auroc", "fpr_at_tpr95", "error"])


def precision_recall_table(bundles: Sequence[LoadedBundle]) -> pd.DataFrame:
    rows = []
    for b in bundles:
        for p in _dig(b.metrics, "selection", "per_round") or []:
            rows.append({"bundle": b.name, "round": p["round"], "precision": p["precision"], "recall": p["recall"]})
    return pd.DataFrame(rows, columns=["bundle", "round", "precision", "recall"])


@dataclass
class Report:
    text: str
    summaries: List[Summary]
    paths: Dict[str, str]


def build_report(paths: Sequence[str], out_dir: Optional[str] = None) -> Report:
    if not paths:
        raise BundleFormatError("no bundles given")
    bundles = [load_bundle(p) for p in paths]
    seen: Dict[str, int] = {}
    for b in bundles:
        seen[b.name] = seen.get(b.name, 0) + 1
        if seen[b.name] > 1:
            b.name = f"{b.name}#{seen[b.name]}"
    summaries = [compute_summary(b) for b in bundles]
    table = summary_table(summaries)
    lines = ["Bundles:"]
    for s in summaries:
        lines.append(f"  {s.bundle}: method={s.method} config={s.config_hash[:12]}")
    lines.append("")
    lines.append(table.to_string(float_format=lambda v: f"{v:.4f}"))
    text = "\n".join(lines)

    written: Dict[str, str] = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        frames = {
            "summary": table.reset_index().rename(columns={"index": "metric"}),
            "error_curves": error_curves(bundles),
            "auroc": auroc_table(bundles),
            "precision_recall": precision_recall_table(bundles),
        }
        for name, frame in frames.items():
            p = os.path.join(out_dir, f"{name}.csv")
            frame.to_csv(p, index=False)
            written[name] = p
        logger.info(f"Saved report CSVs to {out_dir}")
    return Report(text, summaries, written)
