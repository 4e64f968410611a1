"""Experiment configuration file (JSON) with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .losses import LossConfig
from .models import EncoderConfig, HEADS
from .decode import STRATEGIES
from .train import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class SynthSection:
    n_train: int = 2000
    n_dev: int = 500
    n_docs: int = 1000
    authors: dict = field(default_factory=dict)

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(**{**self.authors, "seed": seed})


@dataclass
class DataSection:
    train: str | None = None
    dev: str | None = None
    pretrain: str | None = None
    docs: str | None = None
    label_offset: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    head: str = "linear"
    strict: bool = True
    strategy: str = "map"
    out: str = "runs/default"
    encoder: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **self.train,
            seed=self.seed,
            head=self.head,
            strategy=self.strategy,
            strict=self.strict,
            loss=LossConfig(**self.loss),
            encoder=dict(self.encoder),
        )

    def path(self, value: str | None, what: str, must_exist: bool = True) -> Path:
        if value is None:
            raise ConfigFileError(f"config has no data path for {what!r}")
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigFileError(f"{what} path does not exist: {p}")
        return p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


_NESTED = {"data": DataSection, "synth": SynthSection}
_FREE = {
    "encoder": {f.name for f in fields(EncoderConfig)} - {"vocab_size"},
    "loss": {f.name for f in fields(LossConfig)},
    "train": {f.name for f in fields(TrainConfig)} - {"seed", "head", "strategy", "strict", "loss", "encoder"},
    "authors": {f.name for f in fields(SynthConfig)} - {"seed"},
}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigFileError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigFileError(f"{where}: unknown key(s) {', '.join(unknown)}")


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    _check_keys(raw, top, "config")
    kw = dict(raw)
    for name, cls in _NESTED.items():
        if name in kw:
            allowed = {f.name for f in fields(cls)}
            _check_keys(kw[name], allowed, name)
            sub = dict(kw[name])
            if name == "synth" and "authors" in sub:
                _check_keys(sub["authors"], _FREE["authors"], "synth.authors")
            kw[name] = cls(**sub)
    for name in ("encoder", "loss", "train"):
        if name in kw:
            _check_keys(kw[name], _FREE[name], name)
    cfg = ExperimentConfig(**kw, base_dir=base_dir)
    if cfg.head not in HEADS:
        raise ConfigFileError(f"head must be one of {HEADS}, got {cfg.head!r}")
    if cfg.strategy not in STRATEGIES:
        raise ConfigFileError(f"strategy must be one of {STRATEGIES}, got {cfg.strategy!r}")
    try:
        cfg.train_config().validate()
        cfg.synth.synth_config(cfg.seed).validate()
    except (TypeError, ValueError) as e:
        raise ConfigFileError(str(e)) from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    return parse_config(raw, path.parent)
