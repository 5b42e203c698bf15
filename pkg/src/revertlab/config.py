"""Run configuration: one YAML (or JSON) file per run, validated on load."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .miprobe import BinningConfig
from .revertlm import PurifierConfig, TrainRecipe, load_defaults
from .tinylm import TapPoint


class ConfigError(ValueError):
    pass


# Only these keys may be overridden from the environment, and only with paths.
ENV_PATH_OVERRIDES = {
    "REVERTLAB_OUT": "output_dir",
    "REVERTLAB_CORPUS_FILE": "corpus.path",
    "REVERTLAB_VICTIM": "victim.checkpoint",
    "REVERTLAB_ATTACKER": "attacker.checkpoint",
    "REVERTLAB_CAPTURES": "attacker.captures",
}


@dataclass(frozen=True)
class CorpusSpec:
    source: str = "synthetic"
    path: str | None = None
    n: int = 6250
    ratios: tuple[float, float, float] = (0.88, 0.04, 0.08)
    aux_fraction: float = 0.1
    max_seq_len: int = 32


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "decoder_only"
    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 32


def _default(section: str, key: str):
    return field(default_factory=lambda: load_defaults()[section][key])


@dataclass(frozen=True)
class VictimSpec:
    epochs: int = _default("victim", "epochs")
    batch_size: int = _default("victim", "batch_size")
    lr: float = _default("victim", "lr")
    denoise_prob: float = _default("victim", "denoise_prob")
    checkpoint: str | None = None


@dataclass(frozen=True)
class AttackerSpec:
    d_model: int = _default("attacker", "d_model")
    n_blocks: int = _default("attacker", "n_blocks")
    n_heads: int = _default("attacker", "n_heads")
    d_ff: int = _default("attacker", "d_ff")
    max_prefix: int = _default("attacker", "max_prefix")
    knowledge: str = "black_box"
    checkpoint: str | None = None
    captures: str | None = None


@dataclass(frozen=True)
class MIScanSpec:
    binning: BinningConfig = BinningConfig(n_bins=30, dim_reduction="random_projection", projection_k=2)
    probe_len: int = 4
    n_samples: int = 1750
    positions: tuple[str, ...] = ("embedding", "attention_out", "ffn_out", "block_out")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusSpec = CorpusSpec()
    model: ModelSpec = ModelSpec()
    victim: VictimSpec = field(default_factory=VictimSpec)
    taps: tuple[str, ...] = ("0:block_out",)
    purifier: PurifierConfig = field(default_factory=PurifierConfig.default)
    recipe: TrainRecipe = field(default_factory=TrainRecipe.default)
    attacker: AttackerSpec = field(default_factory=AttackerSpec)
    mi: MIScanSpec = MIScanSpec()
    sweep_blocks: tuple[int, ...] = (0,)
    ablation_tap: str = "0:block_out"
    decode: str = "greedy"
    output_dir: str = "runs/default"

    def tap_points(self) -> list[TapPoint]:
        return [TapPoint.parse(t) for t in self.taps]

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _DATACLASS_FIELDS.get((cls, name))
        if sub is not None:
            value = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        if cls is TrainRecipe:
            return TrainRecipe.default(**kwargs)
        if cls is PurifierConfig:
            return PurifierConfig.default(**kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_DATACLASS_FIELDS = {
    (RunConfig, "corpus"): CorpusSpec,
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "victim"): VictimSpec,
    (RunConfig, "purifier"): PurifierConfig,
    (RunConfig, "recipe"): TrainRecipe,
    (RunConfig, "attacker"): AttackerSpec,
    (RunConfig, "mi"): MIScanSpec,
    (MIScanSpec, "binning"): BinningConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.tap_points()
        TapPoint.parse(cfg.ablation_tap)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.corpus.source not in ("synthetic", "file"):
        raise ConfigError("corpus.source must be 'synthetic' or 'file'")
    if cfg.corpus.source == "file" and not cfg.corpus.path:
        raise ConfigError("corpus.source 'file' needs corpus.path")
    if cfg.attacker.knowledge not in ("black_box", "white_box"):
        raise ConfigError("attacker.knowledge must be black_box or white_box")


def _apply_env(data: dict) -> dict:
    data = json.loads(json.dumps(data))
    for env, dotted in ENV_PATH_OVERRIDES.items():
        if env in os.environ:
            node = data
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = os.environ[env]
    return data


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file, or the ``config`` block of a run manifest."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if isinstance(data, dict) and "manifest_version" in data:
            data = data["config"]
    return config_from_dict(_apply_env(data))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
