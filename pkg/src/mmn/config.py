"""Run configuration: profile defaults, config-file loading and precedence."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

from .datasets import DESK_SIZES, PAPER_SIZES
from .inverse import DEFAULT_GAMMA, NASettings
from .nn import NetworkSpec
from .simulators import ConfigurationError, get_problem
from .training import TrainSettings

OUTPUT_ROOT_ENV = "MMN_OUTPUT_ROOT"

PAPER_HIDDEN = {"sine": [500] * 4, "arm": [500] * 3, "shell": [1700] * 15}
PAPER_BACKWARD_HIDDEN = {"sine": [500] * 4, "arm": [500] * 3, "shell": [2000] * 14}
PAPER_N_PRIME = {"sine": 40000, "arm": 40000, "shell": 250000}


@dataclass
class RunConfig:
    problem: str = "sine"
    profile: str = "paper"
    seed: int = 1
    out: str = ""
    run_id: str = ""
    sizes: Optional[List[int]] = None
    forward_hidden: Optional[List[int]] = None
    backward_hidden: Optional[List[int]] = None
    batch_norm: Optional[bool] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    forward_batch_size: Optional[int] = None
    forward_lr: Optional[float] = None
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-6
    k: int = 6
    n_prime: Optional[int] = None
    augment: bool = True
    gamma: float = DEFAULT_GAMMA
    na_restarts: int = 50
    na_steps: int = 300
    na_lr: float = 0.01
    t_max: int = 6
    workers: int = 1
    sim_cmd: Optional[str] = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; choose desk or paper")
        get_problem(self.problem)
        defaults = PROFILES[self.profile](self.problem)
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if not self.out:
            self.out = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        if not self.run_id:
            self.run_id = f"{self.problem}-{self.profile}-s{self.seed}"
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.run_id

    def forward_spec(self, dim_x: int, dim_y: int) -> NetworkSpec:
        return NetworkSpec(dim_x, dim_y, tuple(self.forward_hidden), self.batch_norm)

    def backward_spec(self, dim_x: int, dim_y: int) -> NetworkSpec:
        return NetworkSpec(dim_y, dim_x, tuple(self.backward_hidden), self.batch_norm)

    def forward_settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.forward_batch_size, self.forward_lr,
                             self.patience, self.min_lr, self.threshold)

    def backward_settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.batch_size, self.lr,
                             self.patience, self.min_lr, self.threshold)

    def na_settings(self) -> NASettings:
        return NASettings(self.na_restarts, self.na_steps, self.na_lr, self.gamma, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None

    def echo(self, directory=None) -> Path:
        d = Path(directory) if directory else self.run_dir
        d.mkdir(parents=True, exist_ok=True)
        path = d / "config.echo"
        path.write_text(self.dumps())
        return path


def _paper(problem: str) -> dict:
    return {
        "sizes": list(PAPER_SIZES[problem]),
        "forward_hidden": PAPER_HIDDEN[problem],
        "backward_hidden": PAPER_BACKWARD_HIDDEN[problem],
        "batch_norm": True,
        "epochs": 500,
        "batch_size": 1024,
        "lr": 1e-3,
        "forward_batch_size": 1024,
        "forward_lr": 1e-3,
        "n_prime": PAPER_N_PRIME[problem],
    }


def _desk(problem: str) -> dict:
    return {
        "sizes": list(DESK_SIZES),
        "forward_hidden": [128] * 3,
        "backward_hidden": [128] * 3,
        "batch_norm": False,
        "epochs": 100,
        "batch_size": 64,
        "lr": 1e-3,
        "forward_batch_size": 8,
        "forward_lr": 2e-3,
        "n_prime": 10000,
    }


PROFILES = {"paper": _paper, "desk": _desk}


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Defaults < config file < command-line flags (flags given as None are unset)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return RunConfig.from_dict(merged)


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return data
