"""Per-step adaptation records and their on-disk formats.

`runlog.jsonl`: first line is a header object
    {"schema": "open_tta.runlog", "version": 1, "meta": {...}}
followed by one JSON object per adapted batch holding the StepRecord fields
(per-sample fields as lists). A final `{"footer": {...}}` line carries the run
status; an aborted run still leaves every completed step on disk.

`samples.csv`: first line `# schema=open_tta.samples version=1`, then one CSV
row per sample with the per-sample StepRecord fields plus step/round/domain.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, IO, List, Optional

import numpy as np
import pandas as pd

from ..errors import SchemaVersionError
from ..utils.io import canonical_json

RUNLOG_SCHEMA = "open_tta.runlog"
SAMPLES_SCHEMA = "open_tta.samples"
SCHEMA_VERSION = 1

_INT_FIELDS = ("labels", "c_o", "c_a")
_BOOL_FIELDS = ("open_flags", "selected")
_FLOAT_FIELDS = (
    "conf_tilde",
    "conf_hat",
    "logit_tilde",
    "logit_hat",
    "max_hat",
    "entropy_hat",
    "msp",
    "max_logit",
    "energy",
)
PER_SAMPLE_FIELDS = _INT_FIELDS + _BOOL_FIELDS + _FLOAT_FIELDS


@dataclass
class StepRecord:
    step: int
    round_id: int
    domain_id: int
    labels: np.ndarray
    open_flags: np.ndarray
    c_o: np.ndarray
    c_a: np.ndarray
    conf_tilde: np.ndarray
    conf_hat: np.ndarray
    logit_tilde: np.ndarray
    logit_hat: np.ndarray
    max_hat: np.ndarray
    entropy_hat: np.ndarray
    msp: np.ndarray
    max_logit: np.ndarray
    energy: np.ndarray
    selected: np.ndarray
    num_classes: int
    loss: float
    num_selected: int
    update_norm: float = 0.0
    updated: bool = False

    @property
    def batch_size(self) -> int:
        return int(self.labels.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "StepRecord":
        kw = dict(d)
        for name in _INT_FIELDS:
            kw[name] = np.asarray(kw[name], dtype=np.int64)
        for name in _BOOL_FIELDS:
            kw[name] = np.asarray(kw[name], dtype=bool)
        for name in _FLOAT_FIELDS:
            kw[name] = np.asarray(kw[name], dtype=np.float64)
        return cls(**kw)


@dataclass
class RunLog:
    records: List[StepRecord] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    status: str = "completed"
    error: Optional[str] = None
    skipped_batches: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def rounds(self) -> List[int]:
        return sorted({r.round_id for r in self.records})

    def for_round(self, round_id: int) -> List[StepRecord]:
        return [r for r in self.records if r.round_id == round_id]


def samples_frame(records: List[StepRecord]) -> pd.DataFrame:
    """One row per sample across all records."""
    if not records:
        cols = ["step", "round_id", "domain_id", *PER_SAMPLE_FIELDS]
        return pd.DataFrame({c: pd.Series(dtype="float64") for c in cols})
    cols: Dict[str, np.ndarray] = {
        "step": np.concatenate([np.full(r.batch_size, r.step) for r in records]),
        "round_id": np.concatenate([np.full(r.batch_size, r.round_id) for r in records]),
        "domain_id": np.concatenate([np.full(r.batch_size, r.domain_id) for r in records]),
    }
    for name in PER_SAMPLE_FIELDS:
        cols[name] = np.concatenate([getattr(r, name) for r in records])
    return pd.DataFrame(cols)


class RunLogWriter:
    """Streams records to `runlog.jsonl` as they are produced."""

    def __init__(self, path: str, meta: Dict[str, Any]) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self._fh: Optional[IO[str]] = open(path, "w", encoding="utf-8")
        self._fh.write(canonical_json({"schema": RUNLOG_SCHEMA, "version": SCHEMA_VERSION, "meta": meta}) + "\n")

    def write(self, record: StepRecord) -> None:
        assert self._fh is not None
        self._fh.write(canonical_json(record.to_dict()) + "\n")
        self._fh.flush()

    def close(self, status: str = "completed", error: Optional[str] = None, skipped_batches: int = 0) -> None:
        if self._fh is None:
            return
        footer = {"status": status, "error": error, "skipped_batches": skipped_batches}
        self._fh.write(canonical_json({"footer": footer}) + "\n")
        self._fh.close()
        self._fh = None


def write_runlog(log: RunLog, path: str) -> None:
    w = RunLogWriter(path, log.meta)
    for rec in log.records:
        w.write(rec)
    w.close(log.status, log.error, log.skipped_batches)


def read_runlog(path: str) -> RunLog:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise SchemaVersionError("empty run log", path=path)
    header = json.loads(lines[0])
    if header.get("schema") != RUNLOG_SCHEMA or header.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError("unsupported run log schema", path=path, schema=header.get("schema"), version=header.get("version"))
    log = RunLog(meta=header.get("meta", {}), status="aborted")
    for ln in lines[1:]:
        obj = json.loads(ln)
        if "footer" in obj:
            log.status = obj["footer"]["status"]
            log.error = obj["footer"]["error"]
            log.skipped_batches = obj["footer"]["skipped_batches"]
            continue
        log.records.append(StepRecord.from_dict(obj))
    return log


def write_samples_csv(records: List[StepRecord], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df = samples_frame(records)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema={SAMPLES_SCHEMA} version={SCHEMA_VERSION}\n")
        df.to_csv(f, index=False)


def read_samples_csv(path: str) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if first != f"# schema={SAMPLES_SCHEMA} version={SCHEMA_VERSION}":
        raise SchemaVersionError("unsupported samples schema", path=path, header=first)
    return pd.read_csv(path, skiprows=1)
