"""Module to handle environment variables and experiment configuration"""

import hashlib
import json
import os
from dataclasses import dataclass, fields, replace
from _compat import StrEnum
from pathlib import Path
from typing import Any, Mapping, TypeVar

import tomli

from neural_model import MinMode, TrainConfig
from prototypes import SelectionStrategy

# search space of the grid command
PER_CLASS_GRID = (5, 10, 15, 20)
RATIO_GRID = (0.3, 0.5, 0.8, 0.9)


class ConfigVars(StrEnum):
    OUTPUT_DIR = "WARPNET_OUTPUT_DIR"
    LOG_LEVEL = "WARPNET_LOG_LEVEL"
    N_JOBS = "WARPNET_N_JOBS"
    UCR_DIR = "WARPNET_UCR_DIR"


class ConfigError(ValueError):
    pass


class TauMode(StrEnum):
    CALIBRATED = "calibrated"
    FIXED = "fixed"


def get_log_level() -> str:
    return os.environ.get(ConfigVars.LOG_LEVEL, "INFO").upper()


def get_ucr_dir() -> Path | None:
    v = os.environ.get(ConfigVars.UCR_DIR)
    return Path(v) if v else None


def env_overrides() -> dict[str, Any]:
    """Experiment fields that may come from the environment"""
    out: dict[str, Any] = {}
    if v := os.environ.get(ConfigVars.OUTPUT_DIR):
        out["output_dir"] = v
    if v := os.environ.get(ConfigVars.N_JOBS):
        try:
            out["n_jobs"] = int(v)
        except ValueError:
            raise ConfigError(f"{ConfigVars.N_JOBS} must be an integer, got {v!r}") from None
    return out


def _as_int(name: str, v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, str)):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {v!r}") from None


def _as_float(name: str, v: Any) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {v!r}") from None


E = TypeVar("E", bound=StrEnum)


def _as_enum(name: str, kind: type[E], v: Any) -> E:
    try:
        return kind(v)
    except ValueError:
        choices = ", ".join(str(e) for e in kind)
        raise ConfigError(f"{name} must be one of {choices}, got {v!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment. Values are coerced and range-checked on construction; a bad value raises
    ConfigError. patience = 0 and grad_clip = 0 mean "off" (TOML has no null).
    """

    train_path: Path | None = None
    test_path: Path | None = None
    dataset_name: str = ""
    per_class: int = 10
    shorten_ratio: float = 0.8
    strategy: SelectionStrategy = SelectionStrategy.RANDOM
    selection_seed: int = 0
    train_seed: int = 0
    subsample_seed: int = 0
    tau_mode: TauMode = TauMode.CALIBRATED
    tau: float = 1.0
    sentinel: float = 1e12
    calibration_size: int = 32
    min_mode: MinMode = MinMode.DIRECT
    lr: float = 0.01
    epochs: int = 30
    patience: int | None = 5
    grad_clip: float | None = 10.0
    rates: tuple[float, ...] = (1.0,)
    repeats: int = 1
    normalize: bool = True
    output_dir: Path = Path("runs")
    n_jobs: int = 1

    def __post_init__(self) -> None:
        def put(name: str, value: Any) -> None:
            object.__setattr__(self, name, value)

        for name in ("train_path", "test_path"):
            v = getattr(self, name)
            put(name, None if v in (None, "") else Path(v))
        put("output_dir", Path(self.output_dir))
        put("dataset_name", str(self.dataset_name))
        for name in ("per_class", "selection_seed", "train_seed", "subsample_seed",
                     "calibration_size", "epochs", "repeats", "n_jobs"):
            put(name, _as_int(name, getattr(self, name)))
        for name in ("shorten_ratio", "tau", "sentinel", "lr"):
            put(name, _as_float(name, getattr(self, name)))
        put("strategy", _as_enum("strategy", SelectionStrategy, self.strategy))
        put("tau_mode", _as_enum("tau_mode", TauMode, self.tau_mode))
        put("min_mode", _as_enum("min_mode", MinMode, self.min_mode))
        if self.patience is not None:
            p = _as_int("patience", self.patience)
            put("patience", p if p > 0 else None)
        if self.grad_clip is not None:
            g = _as_float("grad_clip", self.grad_clip)
            put("grad_clip", g if g > 0 else None)
        rates = self.rates
        if isinstance(rates, (int, float, str)):
            rates = (rates,)
        put("rates", tuple(_as_float("rates", r) for r in rates))
        if not isinstance(self.normalize, bool):
            raise ConfigError(f"normalize must be true or false, got {self.normalize!r}")
        self._check_ranges()

    def _check_ranges(self) -> None:
        checks = [
            (self.per_class >= 1, f"per_class must be >= 1, got {self.per_class}"),
            (0 < self.shorten_ratio <= 1,
             f"shorten_ratio must be in (0, 1], got {self.shorten_ratio}"),
            (self.tau > 0, f"tau must be > 0, got {self.tau}"),
            (self.sentinel > 0, f"sentinel must be > 0, got {self.sentinel}"),
            (self.calibration_size >= 1,
             f"calibration_size must be >= 1, got {self.calibration_size}"),
            (self.lr >= 0, f"lr must be >= 0, got {self.lr}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.repeats >= 1, f"repeats must be >= 1, got {self.repeats}"),
            (self.n_jobs >= 1 or self.n_jobs == -1,
             f"n_jobs must be >= 1 or -1, got {self.n_jobs}"),
            (len(self.rates) >= 1, "rates must not be empty"),
            (all(0 < r <= 1 for r in self.rates),
             f"every rate must be in (0, 1], got {self.rates}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = v.as_posix()
            elif isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, StrEnum):
                v = str(v)
            out[f.name] = v
        return out

    def hash(self) -> str:
        """
        md5 of the canonical JSON of every field that affects results. Paths enter by file
        name only; output_dir and n_jobs are left out.
        """
        d = self.to_dict()
        for name in ("train_path", "test_path"):
            if d[name] is not None:
                d[name] = Path(d[name]).name
        del d["output_dir"], d["n_jobs"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.md5(blob.encode("utf-8")).hexdigest()

    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.train_path is not None:
            return self.train_path.stem.removesuffix("_TRAIN")
        return "dataset"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            seed=self.train_seed,
            patience=self.patience,
            grad_clip=self.grad_clip,
            mode=self.min_mode,
        )

    def repeat(self, r: int) -> "ExperimentConfig":
        """Replicate r: every seed shifted by r"""
        return replace(
            self,
            selection_seed=self.selection_seed + r,
            train_seed=self.train_seed + r,
            subsample_seed=self.subsample_seed + r,
        )


def load_config_file(path: Path | str) -> dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"Invalid config file {path}: {e}") from None


def build_config(
    cli_values: Mapping[str, Any], config_file: Path | str | None = None
) -> ExperimentConfig:
    """defaults < environment < CLI flags < config file"""
    merged = env_overrides()
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    if config_file is not None:
        merged.update(load_config_file(config_file))
    return ExperimentConfig.from_mapping(merged)
