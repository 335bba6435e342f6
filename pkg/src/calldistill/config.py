"""Declarative run configuration: one versioned YAML/JSON file drives a run.

Every tunable lives here with an explicit default; no seed is ever derived
from the wall clock. Sections mirror the pipeline stages, and unknown keys
are rejected so typos fail fast.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1

DEFAULT_CONFIG: dict[str, Any] = {
    "config_version": CONFIG_VERSION,
    "seed": 1234,
    "deterministic": True,
    "paths": {
        "corpus": None,            # raw transcripts (JSONL)
        "out_dir": "out",
        "embeddings": None,        # optional embedding store file
        "returns": None,           # returns CSV for IC
        "labels": None,
        "pretrain_labels": None,
        "topics": None,
        "topic_stats": None,
        "scores": None,
        "panel": None,
        "topic_model": None,
        "sentiment_model": None,
        "filtered": None,
        "sample_discovery": None,
        "sample_labeling": None,
    },
    "teacher": {
        "endpoint": "mock:",
        "model": "teacher-default",
        "batch_size": 20,
        "with_sentiment": True,
        "parallel": 4,
        "max_retries": 3,
        "backoff_base": 0.5,
        "mock": {
            "seed": 7,
            "topics": None,        # None selects the built-in vocabulary
            "bad_format_rate": 0.0,
            "unknown_topic_rate": 0.0,
            "bad_sentiment_rate": 0.0,
        },
    },
    "embedding": {
        "endpoint": "mock:",
        "dim": 768,
        "normalize": True,
    },
    "sampling": {
        "discovery": {"fraction": 0.01, "count": None, "seed": 11},
        "labeling": {
            "fraction": 0.1, "count": None, "seed": 13,
            "exclude_discovery": True,
        },
    },
    "reduction": {
        "method": "threshold",     # threshold | cluster | teacher
        "threshold": 0.02,
        "cumulative": False,
        "k": 8,
        "seed": 17,
        "review_examples": 3,
        "elbow_max_k": 10,
    },
    "split": {"seed": 23},
    "search": {
        "trials": 50,
        "seed": 19,
        "max_epochs": 100,
        "patience": 5,
        "averaging": "macro",
    },
    "sentiment": {
        "approach": "direct",      # direct | transfer
        "seed": 31,
        "max_epochs": 100,
        "patience": 5,
        "config": {
            "hidden_layers": 1,
            "first_layer_size": 128,
            "dropout_rate": 0.0,
            "with_batch_norm": True,
            "layer_ratio": 1.0,
            "learning_rate": 0.001,
            "batch_size": 64,
        },
    },
    "features": {
        "mode": "hard",            # hard | likelihood
        "sentiment_mode": "topic_restricted",  # topic_restricted | literal
    },
    "ic": {
        "feature": "p_Earnings",
        "method": "spearman",
        "horizon": 1,
        "min_obs": 10,
    },
    "filter": {
        "theta_hi": 0.5,
        "theta_med": 0.2,
        "theta_lo": 0.2,
        "targets": [
            "earnings_outlook",
            "earnings_trailing",
            "revenue_outlook",
            "revenue_trailing",
        ],
    },
    "trends": {"grouping": "sector"},  # market | sector
    "validate": {"sample_size": 200, "seed": 29},
    "report": {"figures": True},
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict) and base[key]:
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


class RunConfig:
    """Validated configuration with section access by attribute."""

    def __init__(self, data: dict[str, Any]):
        self.data = data

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["paths"]["out_dir"])

    def path(self, name: str) -> Path | None:
        value = self.data["paths"].get(name)
        return Path(value) if value else None

    def snapshot(self) -> dict:
        """Copy of the effective config with the output root normalized,
        so manifests from relocated runs stay byte-identical."""
        snap = copy.deepcopy(self.data)
        snap["paths"]["out_dir"] = "."
        return snap

    @classmethod
    def from_file(
        cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None
    ) -> "RunConfig":
        data: dict[str, Any] = {}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            try:
                loaded = yaml.safe_load(text)
            except yaml.YAMLError as exc:
                raise ConfigError(f"could not parse {path}: {exc}") from exc
            if loaded is None:
                loaded = {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path} must contain a mapping at the top level")
            data = loaded
        merged = _merge(DEFAULT_CONFIG, data)
        for key, value in (overrides or {}).items():
            ref = merged
            parts = key.split(".")
            for part in parts[:-1]:
                ref = ref[part]
            ref[parts[-1]] = value
        config = cls(merged)
        config.validate()
        return config

    def validate(self) -> None:
        d = self.data
        if int(d["config_version"]) != CONFIG_VERSION:
            raise ConfigError(
                f"unsupported config_version {d['config_version']}, expected {CONFIG_VERSION}"
            )
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        choices = {
            ("reduction", "method"): ("threshold", "cluster", "teacher"),
            ("sentiment", "approach"): ("direct", "transfer"),
            ("features", "mode"): ("hard", "likelihood"),
            ("features", "sentiment_mode"): ("topic_restricted", "literal"),
            ("ic", "method"): ("spearman", "pearson"),
            ("trends", "grouping"): ("market", "sector"),
            ("search", "averaging"): ("macro", "micro", "weighted"),
        }
        for (section, key), allowed in choices.items():
            value = d[section][key]
            if value not in allowed:
                raise ConfigError(
                    f"{section}.{key} must be one of {allowed}, got {value!r}"
                )
        for section, key in (
            ("teacher", "batch_size"), ("search", "trials"),
            ("ic", "horizon"), ("ic", "min_obs"), ("embedding", "dim"),
        ):
            if int(d[section][key]) < 1:
                raise ConfigError(f"{section}.{key} must be >= 1")
        for sample in ("discovery", "labeling"):
            spec = d["sampling"][sample]
            if spec["fraction"] is not None and not 0.0 < float(spec["fraction"]) <= 1.0:
                raise ConfigError(f"sampling.{sample}.fraction must be in (0, 1]")
        thresholds = d["filter"]
        for key in ("theta_hi", "theta_med", "theta_lo"):
            if not 0.0 <= float(thresholds[key]) <= 1.0:
                raise ConfigError(f"filter.{key} must be in [0, 1]")
        unknown_targets = set(d["filter"]["targets"]) - {
            "earnings_outlook", "earnings_trailing",
            "revenue_outlook", "revenue_trailing",
        }
        if unknown_targets:
            raise ConfigError(f"unknown filter targets: {sorted(unknown_targets)}")

    def require_paths(self, *names: str) -> dict[str, Path]:
        """Resolve the named inputs and fail if any is missing on disk."""
        resolved: dict[str, Path] = {}
        missing: list[str] = []
        for name in names:
            p = self.path(name)
            if p is None:
                missing.append(f"paths.{name} is not set")
            elif not p.exists():
                missing.append(f"paths.{name} does not exist: {p}")
            else:
                resolved[name] = p
        if missing:
            raise ConfigError("; ".join(missing))
        return resolved


def dump_config(config: RunConfig, path: str | Path) -> None:
    """Write the effective config with the output root normalized, matching
    the manifest convention so relocated runs dump identical bytes."""
    Path(path).write_text(
        json.dumps(config.snapshot(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
