"""Experiment config files: YAML with one section per concern.

Resolution order, later wins: built-in defaults, the config file, then
``--set section.key=value`` overrides from the command line.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from dcfl.errors import ConfigError
from dcfl.model import MlpConfig
from dcfl.orchestrator import RunConfig
from dcfl.partition import PartitionConfig, alpha_from_json
from dcfl.selection import SelectionConfig, SelectionMode, TargetKind
from dcfl.strategies import StrategyConfig, StrategyKind

ALPHA_GRID = ["inf", 5, 2, 1, 0.5, 0.2, 0.1]

DEFAULTS: dict[str, dict[str, Any]] = {
    "dataset": {
        "name": "covtype",          # covtype | mnist | synthetic
        "path": "",                 # covtype CSV (.data or .data.gz)
        "mnist_images": [],         # IDX image files, concatenated in order
        "mnist_labels": [],         # IDX label files, same order
        "subsample": 0,             # keep this many samples before splitting; 0 keeps all
        "train_fraction": 0.8,
        "seed": 0,                  # subsample + train/test split
        "synthetic_classes": 2,
        "synthetic_dim": 54,
        "synthetic_per_class": 2500,
        "synthetic_separation": 1.0,
    },
    "partition": {
        "num_clients": 100,
        "alpha_local": 2.0,
        "alpha_global": 2.0,
        "seed": 0,
        "federation_file": "",      # reuse a file written by `partition`
    },
    "model": {
        "hidden": "auto",           # auto: [45, 30, 15] for covtype, [128, 64] otherwise
        "dropout": 0.2,
    },
    "strategy": {
        "kind": "fedavg",           # fedavg | fedatt | fedprox
        "mu": 0.01,
        "epsilon": 1.2,
    },
    "selection": {
        "m": 10,
        "m_dc": 5,
        "target": "none",           # none | real | balanced
        "mode": "none",             # none | greedy | exhaustive | random
    },
    "run": {
        "rounds": 100,
        "local_epochs": 3,
        "batch_size": 32,
        "eta": 0.05,
        "repeats": 3,
        "master_seed": 0,
        "secure_agg": True,
        "jobs": 1,
    },
    "sweep": {
        "axis": "alpha_local",      # alpha_local | alpha_global | m_dc
        "values": ALPHA_GRID,
        "strategies": ["fedavg", "fedatt", "fedprox"],
        "targets": ["none", "real", "balanced"],
        "modes": ["greedy"],
        "repartition_per_repeat": False,
    },
    "output": {
        "dir": "runs",
    },
}

_ALPHA_KEYS = {("partition", "alpha_local"), ("partition", "alpha_global")}


def describe_defaults() -> str:
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"  {section}.{key} = {json.dumps(value)}")
    return "\n".join(lines)


def _coerce(section: str, key: str, value: Any) -> Any:
    default = DEFAULTS[section][key]
    where = f"{section}.{key}"
    try:
        if (section, key) in _ALPHA_KEYS:
            a = alpha_from_json(value)
            if not a > 0:
                raise ValueError("must be > 0")
            return a
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "1"):
                    return True
                if value.lower() in ("false", "no", "0"):
                    return False
                raise ValueError("not a boolean")
            return bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ValueError("expected a list")
            return value
        if key == "hidden":
            if value == "auto":
                return value
            if not isinstance(value, list) or not value:
                raise ValueError("expected 'auto' or a list of layer widths")
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {where}: bad value {value!r} ({exc})") from None


def merge(base: dict, updates: dict, origin: str) -> dict:
    out = copy.deepcopy(base)
    if not isinstance(updates, dict):
        raise ConfigError(f"{origin}: top level must be a mapping of sections")
    for section, keys in updates.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown config section {section!r}")
        if keys is None:
            continue
        if not isinstance(keys, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in keys.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{origin}: unknown config key {section}.{key}")
            out[section][key] = _coerce(section, key, value)
    return out


def parse_override(text: str) -> dict:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    section, key = dotted.strip().split(".", 1)
    return {section: {key: yaml.safe_load(raw)}}


def load_config(path: str | Path | None, overrides: list[str] = ()) -> dict:
    cfg = merge(DEFAULTS, {}, "defaults")
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML ({exc})") from None
        cfg = merge(cfg, data, str(path))
    for ov in overrides:
        cfg = merge(cfg, parse_override(ov), "--set")
    return cfg


def _jsonable(cfg: dict) -> dict:
    def fix(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, list):
            return [fix(x) for x in v]
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        return v
    return fix(cfg)


def canonical_json(cfg: dict) -> str:
    return json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))


def result_relevant(cfg: dict) -> dict:
    """The config minus ``output`` and ``run.jobs``, neither of which affects any number."""
    relevant = {k: dict(v) for k, v in cfg.items() if k != "output"}
    relevant["run"].pop("jobs", None)
    return json.loads(canonical_json(relevant))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(result_relevant(cfg)).encode()).hexdigest()[:12]


def hidden_layers(cfg: dict) -> list[int]:
    hidden = cfg["model"]["hidden"]
    if hidden == "auto":
        return [45, 30, 15] if cfg["dataset"]["name"] == "covtype" else [128, 64]
    return list(hidden)


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully resolved config (``raw``) and the typed views built from it."""

    raw: dict

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> ExperimentSpec:
        return cls(load_config(path, overrides))

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def run_config(self, feature_dim: int, num_classes: int) -> RunConfig:
        return build_run_config(self.raw, feature_dim, num_classes)

    def sweep(self) -> dict:
        return sweep_settings(self.raw)


def build_run_config(cfg: dict, feature_dim: int, num_classes: int) -> RunConfig:
    try:
        sel = cfg["selection"]
        mode = SelectionMode(sel["mode"])
        target = TargetKind(sel["target"])
        run = cfg["run"]
        return RunConfig(
            rounds=run["rounds"],
            local_epochs=run["local_epochs"],
            batch_size=run["batch_size"],
            eta=run["eta"],
            strategy=StrategyConfig(StrategyKind(cfg["strategy"]["kind"]),
                                    cfg["strategy"]["mu"], cfg["strategy"]["epsilon"]),
            selection=SelectionConfig(sel["m"], sel["m_dc"], target, mode),
            model=MlpConfig((feature_dim, *hidden_layers(cfg), num_classes),
                            cfg["model"]["dropout"]),
            partition=PartitionConfig(cfg["partition"]["num_clients"],
                                      cfg["partition"]["alpha_local"],
                                      cfg["partition"]["alpha_global"],
                                      cfg["partition"]["seed"]),
            repeats=run["repeats"],
            master_seed=run["master_seed"],
            secure_agg=run["secure_agg"],
            jobs=run["jobs"],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def sweep_settings(cfg: dict) -> dict:
    sw = cfg["sweep"]
    if not sw["values"]:
        raise ConfigError("config key sweep.values: sweep list is empty")
    if sw["axis"] not in ("alpha_local", "alpha_global", "m_dc"):
        raise ConfigError(f"config key sweep.axis: unknown axis {sw['axis']!r}")
    for key, allowed in (("strategies", {k.value for k in StrategyKind}),
                         ("targets", {k.value for k in TargetKind}),
                         ("modes", {k.value for k in SelectionMode} - {"none"})):
        if not sw[key]:
            raise ConfigError(f"config key sweep.{key}: list is empty")
        bad = [v for v in sw[key] if v not in allowed]
        if bad:
            raise ConfigError(f"config key sweep.{key}: unknown entries {bad}")
    try:
        if sw["axis"] == "m_dc":
            values = [int(v) for v in sw["values"]]
        else:
            values = [alpha_from_json(v) for v in sw["values"]]
    except (TypeError, ValueError):
        raise ConfigError(f"config key sweep.values: bad entries {sw['values']}") from None
    return {**sw, "values": values}
