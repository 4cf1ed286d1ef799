"""Run configuration: JSON documents validated strictly against dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .denoiser import PRESETS, ModelConfig
from .sampler import SampleConfig
from .tensorfmt import DEFAULT_CHANNELS
from .train import TrainConfig

OUT_ENV = "FIELDFLOW_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    preset: str = "tiny"
    d_model: int | None = None
    encoder_depth: int | None = None
    encoder_heads: int | None = None
    depth: int | None = None
    n_heads: int | None = None
    mlp_ratio: float = 4.0
    patch: tuple[int, int, int, int] = (2, 8, 8, 8)
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    history: int = 10
    horizon: int = 10
    time_embed_dim: int = 256
    rope_base: float = 10000.0
    prediction: str = "x"
    eps_stab: float = 1e-4

    def to_model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        d, le, he, lj, hj = PRESETS[self.preset]
        try:
            return ModelConfig(
                d_model=self.d_model or d, encoder_depth=self.encoder_depth or le,
                encoder_heads=self.encoder_heads or he, depth=self.depth or lj, n_heads=self.n_heads or hj,
                mlp_ratio=self.mlp_ratio, patch=tuple(self.patch), channels=tuple(self.channels),
                history=self.history, horizon=self.horizon, time_embed_dim=self.time_embed_dim,
                rope_base=self.rope_base, prediction=self.prediction, eps_stab=self.eps_stab,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class DataSection:
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    eval_stride: int = 1
    eval_max_windows: int | None = None


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataSection = field(default_factory=DataSection)
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    threads: int = 1

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV, self.out_dir))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed, train=dataclasses.replace(self.train, seed=seed),
            sample=dataclasses.replace(self.sample, seed=seed),
        )


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is typing.Union or origin is types.UnionType:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        last = None
        for a in inner:
            try:
                return _coerce(a, value, where)
            except ConfigError as exc:
                last = exc
        raise last
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
            items = [_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value))]
        else:
            elem = args[0] if args else typing.Any
            items = [_coerce(elem, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(RunConfig, data)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def write_manifest(cfg: RunConfig, out_dir: Path, command: str, extra: dict | None = None) -> Path:
    import numpy
    import torch

    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "versions": {"fieldflow": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": numpy.__version__},
        **(extra or {}),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
