"""Flat ``key = value`` experiment configuration files."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .continual import CHECKPOINT_EPOCHS, TrainSpec
from .dataset import DEFAULT_SCHEDULE, RoundSchedule
from .errors import ConfigError
from .lora import LoraConfig
from .model import PRESETS, BackboneConfig, preset
from .pretrain import PretrainSpec


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


@dataclass
class ExperimentConfig:
    seed: int
    csv: tuple[Path, ...] = ()
    few_shot: str = "fewshot"
    schedule: str = "default"
    holdout_per_class: int = 20
    max_len: int = 64
    backbone: str = "desk"
    backbone_path: Path | None = None
    pretrain_epochs: int = 12
    pretrain_lr: float = 2e-3
    rank: int = 8
    alpha: float = 16.0
    targets: str = "q,v"
    epochs: int = 15
    lr: float = 2e-5
    full_lr: float | None = None
    batch_size: int = 16
    eval_epochs: tuple[int, ...] = CHECKPOINT_EPOCHS
    mode: str = "both"
    rehearsal: float = 0.0
    freeze_inherited: bool = False
    warm_start: bool = True
    devices: int = 2
    epsilon: float = 0.02
    out: Path = Path("out")
    source: Path | None = field(default=None, compare=False)

    _PARSERS = {
        "seed": int, "holdout_per_class": int, "max_len": int, "pretrain_epochs": int,
        "pretrain_lr": float, "rank": int, "alpha": float, "epochs": int, "lr": float,
        "full_lr": float, "batch_size": int, "eval_epochs": _ints, "rehearsal": float,
        "freeze_inherited": _bool, "warm_start": _bool, "devices": int, "epsilon": float,
    }
    _PATHS = ("backbone_path", "out")

    @classmethod
    def from_text(cls, text: str, base: Path | None = None, check_files: bool = True) -> "ExperimentConfig":
        base = Path(base or ".")
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            key = key.strip().replace("-", "_")
            if key in raw:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
        known = {f.name for f in fields(cls)} - {"source"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "seed" not in raw:
            raise ConfigError("config must set seed")
        kwargs = {}
        for key, value in raw.items():
            try:
                if key == "csv":
                    kwargs[key] = tuple(base / p.strip() for p in value.split(",") if p.strip())
                elif key in cls._PATHS:
                    kwargs[key] = base / value
                elif key in cls._PARSERS:
                    kwargs[key] = cls._PARSERS[key](value)
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        cfg = cls(**kwargs)
        cfg.check(check_files)
        return cfg

    @classmethod
    def load(cls, path, check_files: bool = True, **overrides) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = cls.from_text(path.read_text(encoding="utf-8"), path.parent, check_files)
        cfg.source = path
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        cfg.check(check_files)
        return cfg

    def check(self, check_files: bool = True):
        if self.mode not in ("lora", "full", "both"):
            raise ConfigError(f"mode must be lora, full or both; got {self.mode!r}")
        if self.backbone not in PRESETS:
            raise ConfigError(f"unknown backbone preset {self.backbone!r}")
        if not self.csv:
            raise ConfigError("config needs at least one csv path")
        self.round_schedule()
        self.train_spec("lora")
        self.lora_config()
        if check_files:
            for p in list(self.csv) + [self.backbone_path]:
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"referenced file does not exist: {p}")

    def round_schedule(self) -> RoundSchedule:
        try:
            return RoundSchedule(DEFAULT_SCHEDULE) if self.schedule == "default" else RoundSchedule.parse(self.schedule)
        except ValueError as exc:
            raise ConfigError(f"bad schedule: {exc}") from exc

    def backbone_config(self, vocab_size: int) -> BackboneConfig:
        return preset(self.backbone, vocab_size=vocab_size, max_len=self.max_len, seed=self.seed)

    def lora_config(self) -> LoraConfig:
        targets = tuple(t.strip() for t in self.targets.split(",") if t.strip())
        return LoraConfig(rank=self.rank, alpha=self.alpha, targets=targets)

    def train_spec(self, mode: str) -> TrainSpec:
        lr = self.full_lr if mode == "full" and self.full_lr is not None else self.lr
        return TrainSpec(epochs=self.epochs, lr=lr, batch_size=self.batch_size, mode=mode,
                         seed=self.seed, eval_epochs=self.eval_epochs, rehearsal=self.rehearsal,
                         freeze_inherited=self.freeze_inherited, warm_start=self.warm_start)

    def pretrain_spec(self) -> PretrainSpec:
        return PretrainSpec(epochs=self.pretrain_epochs, lr=self.pretrain_lr, seed=self.seed)

    def modes(self) -> tuple[str, ...]:
        return ("lora", "full") if self.mode == "both" else (self.mode,)
