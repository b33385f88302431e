"""Run configuration: one flat set of keys shared by config files and CLI flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .gsm import GsmConfig

MODES = ("base", "gsm", "gsm_no_reselection", "lottery")

# Long-running schedules and targets, enabled by ``full_reproduction``.
FULL_SCHEDULE = [(160, 3e-2), (40, 3e-3), (40, 3e-4)]
FULL_COMPRESSION = {"lenet-300-100": 60.0, "lenet-5": 125.0}


@dataclass
class RunConfig:
    mode: str = "gsm"
    model: str = "lenet-300-100"
    dataset: str = "mnist"
    data_dir: str | None = None
    train_size: int | None = None
    test_size: int | None = None
    seed: int = 0
    batch_size: int = 256
    # GSM stage
    beta: float = 0.99
    eta: float = 5e-4
    lr_schedule: list = field(default_factory=lambda: [(30, 3e-2), (8, 3e-3), (8, 3e-4)])
    compression: float = 10.0
    q: int | None = None
    tau: float = 1e-4
    # base / ticket training
    base_beta: float = 0.9
    base_lr_schedule: list = field(default_factory=lambda: [(12, 3e-2), (4, 3e-3), (4, 3e-4)])
    eval_interval: int = 2000
    output_dir: str = "runs"
    base_checkpoint: str | None = None
    full_reproduction: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be at least 1")
        try:
            self.lr_schedule = [(int(e), float(a)) for e, a in self.lr_schedule]
            self.base_lr_schedule = [(int(e), float(a)) for e, a in self.base_lr_schedule]
        except (TypeError, ValueError):
            raise ConfigError("schedules must be lists of (epochs, alpha) pairs") from None
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.full_reproduction:
            self.lr_schedule = list(FULL_SCHEDULE)
            self.base_lr_schedule = list(FULL_SCHEDULE)
            self.compression = FULL_COMPRESSION.get(self.model, self.compression)
        self.gsm_config()
        self.base_config()

    def gsm_config(self) -> GsmConfig:
        return GsmConfig(self.beta, self.eta, self.lr_schedule, self.q, self.batch_size)

    def base_config(self) -> GsmConfig:
        return GsmConfig(self.base_beta, self.eta, self.base_lr_schedule, None, self.batch_size)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(s) for s in self.lr_schedule]
        d["base_lr_schedule"] = [list(s) for s in self.base_lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


CONFIG_KEYS = [f.name for f in dataclasses.fields(RunConfig)]


def parse_schedule(text: str) -> list[tuple[int, float]]:
    """``"30:3e-2,8:3e-3"`` -> [(30, 0.03), (8, 0.003)]."""
    try:
        return [(int(e), float(a)) for e, a in (item.split(":") for item in text.split(","))]
    except ValueError:
        raise ConfigError(f"bad schedule {text!r}; expected epochs:alpha[,epochs:alpha...]") from None


def load_config(path) -> dict:
    """Read a YAML mapping of RunConfig keys. Unknown keys are rejected."""
    path = Path(path)
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    return doc


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
