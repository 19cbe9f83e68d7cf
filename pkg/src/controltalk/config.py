"""Run configuration: one tree of settings for every command.

A run is configured from three layers, later layers winning:

1. dataclass defaults,
2. an optional JSON config file,
3. ``CONTROLTALK_*`` environment variables.

Environment keys map onto the tree with double underscores between
levels: ``CONTROLTALK_TRAIN__LEARNING_RATE=5e-4`` sets
``train.learning_rate``; values are parsed as JSON when possible and
kept as strings otherwise.  Unknown keys fail loudly with
:class:`~controltalk.errors.ConfigError` rather than being ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import torch

from .corpus import CorpusConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .model import InferenceConfig, ModelConfig
from .sync import SyncTrainConfig
from .training import TrainConfig

ENV_PREFIX = "CONTROLTALK_"


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, bundled so manifests can reproduce runs."""

    corpus_dir: str = "corpus"
    out_dir: str = "runs/latest"
    expert_path: str = ""
    model_path: str = ""
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sync: SyncTrainConfig = field(default_factory=SyncTrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_expert_path(self) -> Path:
        return Path(self.expert_path) if self.expert_path else Path(self.out_dir) / "expert.pt"

    def resolved_model_path(self) -> Path:
        return Path(self.model_path) if self.model_path else Path(self.out_dir) / "model.pt"


def _type_hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value: Any, target: Any, keypath: str) -> Any:
    """Convert a plain JSON value to the annotated field type."""
    if dataclasses.is_dataclass(target):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{keypath}: expected an object, got {type(value).__name__}")
        return _from_mapping(target, value, keypath)
    origin = typing.get_origin(target)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{keypath}: expected a list, got {type(value).__name__}")
        args = typing.get_args(target)
        if args and args[-1] is not Ellipsis and len(args) != len(value):
            raise ConfigError(f"{keypath}: expected {len(args)} entries, got {len(value)}")
        return tuple(value)
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target in (int, float, str, bool) and not isinstance(value, target):
        raise ConfigError(
            f"{keypath}: expected {target.__name__}, got {type(value).__name__} ({value!r})"
        )
    return value


def _from_mapping(cls, data: Mapping[str, Any], keypath: str = ""):
    hints = _type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} under '{keypath or 'top level'}'; "
            f"valid keys: {sorted(names)}"
        )
    kwargs = {
        k: _coerce(v, hints[k], f"{keypath}.{k}" if keypath else k) for k, v in data.items()
    }
    return cls(**kwargs)


def config_to_dict(cfg: Any) -> dict[str, Any]:
    """Plain-JSON view of a (possibly nested) config dataclass."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def config_hash(cfg: Any) -> str:
    """Stable content hash of a config tree."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _env_overrides(env: Mapping[str, str]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if not all(path):
            raise ConfigError(f"malformed environment override {key}")
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key} conflicts with a scalar key")
        node[path[-1]] = _parse_env_value(env[key])
    return tree


def _merge(base: dict[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def load_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and env vars."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        _merge(data, loaded)
    _merge(data, _env_overrides(os.environ if env is None else env))
    return _from_mapping(RunConfig, data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def versions() -> dict[str, str]:
    """Interpreter and library versions recorded in every run manifest."""
    from . import __version__

    return {
        "controltalk": __version__,
        "torch": torch.__version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
    }


def write_manifest(
    out_dir: str | Path, command: str, cfg: RunConfig, extra: dict[str, Any] | None = None
) -> Path:
    """Record enough provenance to re-run a command bit-exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seeds": {
            "run": cfg.seed,
            "corpus": cfg.corpus.seed,
            "model": cfg.model.seed,
            "sync": cfg.sync.seed,
            "train": cfg.train.seed,
            "eval": cfg.eval.seed,
        },
        "versions": versions(),
    }
    if extra:
        manifest.update(extra)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
