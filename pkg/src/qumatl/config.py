"""Flat key/value run configuration shared by every CLI command.

A config file is a flat YAML mapping (JSON works too). A run manifest can be
passed wherever a config is expected; its ``config`` snapshot is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Union

import yaml

from .data import DatasetError, GeneratorConfig, even_groups
from .harness import ExperimentSpec
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).split(",") if v.strip())


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _strs(value) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def _groups(value) -> Optional[tuple[tuple[int, ...], ...]]:
    """``"0,1,2;3,4"`` or a list of lists; empty means one group per annotator."""
    if value in (None, ""):
        return None
    if isinstance(value, (list, tuple)):
        return tuple(tuple(int(k) for k in g) for g in value)
    return tuple(_ints(part) for part in str(value).split(";") if part.strip())


def _bool_free_int(value) -> int:
    if isinstance(value, bool):
        raise ValueError("expected an integer")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError("expected an integer")
    return int(value)


def _real(value) -> float:
    if isinstance(value, bool):
        raise ValueError("expected a number")
    return float(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    required: bool = False


KEYS: dict[str, Key] = {
    "seed": Key(_bool_free_int, None, required=True),
    "num_annotators": Key(_bool_free_int, None, required=True),
    "num_classes": Key(_bool_free_int, None, required=True),
    # generator
    "num_samples": Key(_bool_free_int, 2000),
    "num_tokens": Key(_bool_free_int, 8),
    "content_dim": Key(_bool_free_int, 4),
    "num_groups": Key(_bool_free_int, 0),
    "correlation_groups": Key(_groups, None),
    "noise_rate": Key(_real, 0.1),
    "position_scale": Key(_real, 1.0),
    "weight_jitter": Key(_real, 0.3),
    "bias_scale": Key(_real, 0.1),
    # model
    "hidden_dim": Key(_bool_free_int, 16),
    "num_heads": Key(_bool_free_int, 2),
    "ffn_dim": Key(_bool_free_int, 32),
    "num_blocks": Key(_bool_free_int, 1),
    # training
    "variant": Key(str, "full"),
    "max_epochs": Key(_bool_free_int, 60),
    "patience": Key(_bool_free_int, 25),
    "batch_size": Key(_bool_free_int, 32),
    "base_lr": Key(_real, 3e-3),
    "weight_decay": Key(_real, 0.01),
    "max_grad_norm": Key(_real, 1.0),
    "warmup_frac": Key(_real, 0.2),
    "split": Key(_floats, (0.8, 0.1, 0.1)),
    # experiments
    "variants": Key(_strs, ("full", "base", "unifiedHead", "noSelfAttn", "pooledPremv")),
    "sparsity_rates": Key(_floats, (0.0, 0.4)),
    "seeds": Key(_ints, ()),
    "jobs": Key(_bool_free_int, 1),
    "attn_samples": Key(_bool_free_int, 16),
    "repetitions": Key(_bool_free_int, 3),
}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def snapshot(self) -> dict:
        """JSON-friendly copy of every resolved key."""
        out = {}
        for k, v in sorted(self.values.items()):
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[k] = v
        return out

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["seeds"] or (self.values["seed"],)

    def generator(self) -> GeneratorConfig:
        v = self.values
        groups = v["correlation_groups"]
        if groups is None and v["num_groups"] > 0:
            groups = even_groups(v["num_annotators"], v["num_groups"])
        return GeneratorConfig(
            num_samples=v["num_samples"],
            num_annotators=v["num_annotators"],
            num_classes=v["num_classes"],
            num_tokens=v["num_tokens"],
            content_dim=v["content_dim"],
            correlation_groups=groups,
            noise_rate=v["noise_rate"],
            seed=v["seed"],
            position_scale=v["position_scale"],
            weight_jitter=v["weight_jitter"],
            bias_scale=v["bias_scale"],
        )

    def model(self, raw_dim: Optional[int] = None) -> ModelConfig:
        v = self.values
        return ModelConfig(
            num_annotators=v["num_annotators"],
            num_classes=v["num_classes"],
            num_tokens=v["num_tokens"],
            raw_dim=raw_dim if raw_dim is not None else self.generator().raw_dim,
            hidden_dim=v["hidden_dim"],
            num_heads=v["num_heads"],
            ffn_dim=v["ffn_dim"],
            seed=v["seed"],
            num_blocks=v["num_blocks"],
        )

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            max_epochs=v["max_epochs"],
            patience=v["patience"],
            batch_size=v["batch_size"],
            base_lr=v["base_lr"],
            weight_decay=v["weight_decay"],
            max_grad_norm=v["max_grad_norm"],
            warmup_frac=v["warmup_frac"],
            seed=v["seed"],
            variant=v["variant"],
        )

    def experiment(self) -> ExperimentSpec:
        v = self.values
        return ExperimentSpec(
            generator=self.generator(),
            train=self.train(),
            variants=v["variants"],
            sparsity_rates=v["sparsity_rates"],
            seeds=self.seeds,
            hidden_dim=v["hidden_dim"],
            num_heads=v["num_heads"],
            ffn_dim=v["ffn_dim"],
            num_blocks=v["num_blocks"],
            fractions=v["split"],
        )


def _validate(cfg: RunConfig) -> None:
    """Build every downstream config once so bad values fail before any work."""
    checks = [
        (("num_samples", "num_annotators", "num_classes", "num_tokens", "content_dim", "num_groups",
          "correlation_groups", "noise_rate"), lambda: cfg.generator().validate()),
        (("hidden_dim", "num_heads", "ffn_dim", "num_blocks"), cfg.model),
        (("max_epochs", "patience", "batch_size", "base_lr", "weight_decay", "max_grad_norm",
          "warmup_frac", "variant"), cfg.train),
        (("variants", "sparsity_rates", "seeds"), cfg.experiment),
    ]
    for keys, build in checks:
        try:
            build()
        except (ValueError, DatasetError) as exc:
            raise ConfigError(f"invalid value among keys {', '.join(keys)}: {exc}") from exc
    split = cfg["split"]
    if len(split) != 3 or any(f <= 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"key split: {split} must be three positive fractions summing to 1")
    for key in ("jobs", "attn_samples", "repetitions"):
        if cfg[key] < 1:
            raise ConfigError(f"key {key}: must be >= 1")
    if cfg["num_groups"] < 0:
        raise ConfigError("key num_groups: must be >= 0")


def resolve(raw: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    merged = dict(raw)
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    missing = sorted(k for k, spec in KEYS.items() if spec.required and merged.get(k) is None)
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    values = {}
    for key, spec in KEYS.items():
        if key not in merged:
            values[key] = spec.default
            continue
        try:
            values[key] = spec.parse(merged[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key {key}: cannot parse {merged[key]!r} ({exc})") from exc
    cfg = RunConfig(values)
    _validate(cfg)
    return cfg


def read_config_file(path: Union[str, Path]) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not a flat key/value document ({exc})") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key/value mapping")
    if "manifest_version" in doc:
        doc = doc["config"]
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: key {key} is nested; the config must be flat")
    return doc


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    return resolve(read_config_file(path), overrides)


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value read as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    key = key.strip().lstrip("-").replace("-", "_")
    try:
        parsed = yaml.safe_load(value) if value.strip() else ""
    except yaml.YAMLError:
        parsed = value
    return key, parsed
