"""Environment settings and the experiment config tree.

Experiment configs are YAML files with the top-level keys

    seed, source, scenario, adaptation, pretrain, metrics, output_dir, checkpoint

Every key is optional; missing ones take the defaults below. `seed` fills the
seeds of source/scenario/adaptation that are not set explicitly, the scenario
always uses the top-level `source`, and `scenario.batch_size` defaults to
`adaptation.batch_size`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .adapt.engine import AdaptationConfig
from .data.streams import ScenarioSpec
from .data.synthetic import SyntheticSourceSpec
from .errors import ConfigValidationError
from .utils.io import canonical_json, sha256_bytes


@dataclass
class Settings:
    app_log_level: str = "INFO"
    export_dir: str = "./runs"
    checkpoint_dir: str = "./checkpoints"
    default_seed: int = 0
    sweep_workers: int = 1
    show_progress: bool = True


def get_settings() -> Settings:
    # Load env from env.txt first (if present), then .env
    load_dotenv(dotenv_path="env.txt", override=False)
    load_dotenv(override=False)

    def _get(name: str, default: str) -> str:
        val = os.getenv(name)
        return default if val is None or val == "" else val

    def _to_bool(v: str) -> bool:
        return v.strip().lower() in ("1", "true", "yes", "on")

    return Settings(
        app_log_level=_get("APP_LOG_LEVEL", "INFO"),
        export_dir=_get("EXPORT_DIR", "./runs"),
        checkpoint_dir=_get("CHECKPOINT_DIR", "./checkpoints"),
        default_seed=int(_get("DEFAULT_SEED", "0")),
        sweep_workers=max(1, int(_get("SWEEP_WORKERS", "1"))),
        show_progress=_to_bool(_get("SHOW_PROGRESS", "true")),
    )


MetricName = Literal["error", "selection", "confidence_drop", "ood", "gradsim"]
ALL_METRICS: List[str] = ["error", "selection", "confidence_drop", "ood", "gradsim"]


class PretrainSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(128, ge=2)
    # external pools replace the synthetic train / held-out sets
    train_path: Optional[str] = None
    holdout_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_hidden(self) -> "PretrainSpec":
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        return self


def _as_dict(value: Any) -> Dict[str, Any]:
    if value is None:
        return {}
    if isinstance(value, BaseModel):
        return value.model_dump()
    if isinstance(value, dict):
        return dict(value)
    raise ValueError(f"expected a mapping, got {type(value).__name__}")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    source: SyntheticSourceSpec = Field(default_factory=SyntheticSourceSpec)
    scenario: ScenarioSpec = Field(default_factory=ScenarioSpec)
    adaptation: AdaptationConfig = Field(default_factory=AdaptationConfig)
    pretrain: PretrainSpec = Field(default_factory=PretrainSpec)
    metrics: List[MetricName] = Field(default_factory=lambda: list(ALL_METRICS))
    output_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    # closed-set samples from the final round used for the gradient-similarity matrix
    gradsim_samples: int = Field(400, ge=2)

    @model_validator(mode="before")
    @classmethod
    def _propagate(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        seed = data.get("seed", 0)
        source = _as_dict(data.get("source"))
        if source.get("seed") is None:
            source["seed"] = seed
        adaptation = _as_dict(data.get("adaptation"))
        if adaptation.get("seed") is None:
            adaptation["seed"] = seed
        scenario = _as_dict(data.get("scenario"))
        if scenario.get("seed") is None:
            scenario["seed"] = seed
        if scenario.get("source") is not None and _as_dict(scenario["source"]) != source:
            raise ValueError("scenario.source must match the top-level source; set `source` only")
        scenario["source"] = source
        batch = adaptation.get("batch_size", AdaptationConfig.model_fields["batch_size"].default)
        if scenario.get("batch_size") is None:
            scenario["batch_size"] = batch
        elif scenario["batch_size"] != batch:
            raise ValueError(f"scenario.batch_size {scenario['batch_size']} differs from adaptation.batch_size {batch}")
        data.update(source=source, adaptation=adaptation, scenario=scenario)
        return data

    @model_validator(mode="after")
    def _check_metrics(self) -> "ExperimentConfig":
        if len(set(self.metrics)) != len(self.metrics):
            raise ValueError("metrics list has duplicates")
        return self

    def resolved_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.resolved_dict()).encode("utf-8"))

    def with_updates(self, **changes: Any) -> "ExperimentConfig":
        """Re-validated copy with top-level or dotted-key changes applied."""
        data = self.resolved_dict()
        keys = [k.replace("__", ".") for k in changes]
        # derived fields are filled again by the validator
        data["scenario"].pop("source", None)
        if "adaptation.batch_size" in keys or "adaptation" in keys:
            data["scenario"]["batch_size"] = None
        if "seed" in keys:
            for section in ("source", "scenario", "adaptation"):
                data[section]["seed"] = None
        for key, value in zip(keys, changes.values()):
            _set_dotted(data, key, value)
        return validate_config(data)


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = [p for p in dotted.split(".") if p]
    if not parts:
        raise ConfigValidationError("empty override key", key=dotted)
    node = data
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = {}
            node[p] = nxt
        elif not isinstance(nxt, dict):
            raise ConfigValidationError("override path crosses a scalar", key=dotted, at=p)
        node = nxt
    node[parts[-1]] = value


def parse_override(item: str):
    """`a.b.c=value` with the value parsed as a YAML scalar or flow collection."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigValidationError("override must look like key=value", override=item)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigValidationError(f"override value is not valid YAML: {e}", override=item)
    return key.strip(), value


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = [f"{'.'.join(str(x) for x in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigValidationError("invalid experiment config: " + "; ".join(lines))


@dataclass
class LoadedConfig:
    config: ExperimentConfig
    # raw bytes of the input file; None when built from defaults
    raw: Optional[bytes] = None
    path: Optional[str] = None


def load_experiment_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> LoadedConfig:
    """File values, then `--set` overrides, then --seed / --out."""
    raw: Optional[bytes] = None
    data: Dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = f.read()
        try:
            loaded = yaml.safe_load(raw.decode("utf-8"))
        except (yaml.YAMLError, UnicodeDecodeError) as e:
            raise ConfigValidationError(f"config is not valid YAML: {e}", path=path)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigValidationError("config root must be a mapping", path=path)
        data = loaded
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(data, key, value)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = out
    return LoadedConfig(validate_config(data), raw, path)
