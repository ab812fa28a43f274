"""Run configuration: a flat TOML file plus an optional ``[synth]`` table."""
from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoder import CONTEXT_MODES, EncoderConfig, receptive_field
from .errors import ConfigError
from .features import SMA_WINDOWS, RegimeParams

MODES = ("cmi", "direct")


@dataclass
class SynthConfig:
    n_stocks: int = 8
    n_days: int = 600
    start: str = "2014-01-02"
    drift: float = 0.01
    noise: float = 0.004
    switch_prob: float = 0.03
    intraday_noise: float = 0.002

    def regime(self) -> RegimeParams:
        return RegimeParams(drift=self.drift, noise=self.noise, switch_prob=self.switch_prob,
                            intraday_noise=self.intraday_noise)


@dataclass
class RunConfig:
    # encoder
    blocks: int = 6
    kernel_size: int = 2
    channels: int = 77
    latent_dim: int = 96
    window: int = 64
    use_identity: bool = True
    context_mode: str = "attention"
    # optimisation
    mode: str = "cmi"
    lr: float = 1e-4
    batch: int = 256
    epochs: int = 50
    seed: int = 0
    # downstream head
    head_epochs: int = 1000
    head_l2: float = 1e-4
    # labels and features
    up_thresh: float = 0.0055
    down_thresh: float = -0.005
    sma_windows: list[int] = field(default_factory=lambda: list(SMA_WINDOWS))
    train_start: str = "2014-01-01"
    train_end: str = "2015-08-01"
    test_start: str = "2015-10-01"
    test_end: str = "2016-01-01"
    # paths
    data_dir: str = "data"
    dataset: str = "dataset.cmi"
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def train_range(self) -> tuple[str, str]:
        return (self.train_start, self.train_end)

    @property
    def test_range(self) -> tuple[str, str]:
        return (self.test_start, self.test_end)

    def encoder_config(self, n_stocks: int) -> EncoderConfig:
        return EncoderConfig(blocks=self.blocks, kernel_size=self.kernel_size, channels=self.channels,
                             latent_dim=self.latent_dim, window=self.window, use_identity=self.use_identity,
                             n_stocks=n_stocks, context_mode=self.context_mode)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"context_mode must be one of {CONTEXT_MODES}, got {self.context_mode!r}")
        for name in ("blocks", "kernel_size", "channels", "latent_dim", "window", "batch", "head_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.lr <= 0 or self.head_l2 < 0:
            raise ConfigError("epochs must be >= 0, lr > 0 and head_l2 >= 0")
        if receptive_field(self.blocks, self.kernel_size) < self.window:
            raise ConfigError(f"receptive field {receptive_field(self.blocks, self.kernel_size)} "
                              f"is shorter than window {self.window}")
        if self.down_thresh >= self.up_thresh:
            raise ConfigError("down_thresh must be below up_thresh")
        if not self.sma_windows or min(self.sma_windows) < 1:
            raise ConfigError("sma_windows must be positive integers")
        try:
            days = [dt.date.fromisoformat(d) for d in
                    (self.train_start, self.train_end, self.test_start, self.test_end)]
        except ValueError as exc:
            raise ConfigError(f"bad date in config: {exc}") from None
        if days[1] < days[0] or days[3] < days[2]:
            raise ConfigError("a date range ends before it starts")
        if days[0] < days[1] and days[2] < days[3] and days[0] < days[3] and days[2] < days[1]:
            raise ConfigError("train and test date ranges overlap")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        synth = data.pop("synth", {}) or {}
        if isinstance(synth, SynthConfig):
            synth = dataclasses.asdict(synth)
        synth_known = {f.name for f in dataclasses.fields(SynthConfig)}
        bad = sorted(set(synth) - synth_known)
        if bad:
            raise ConfigError(f"unknown [synth] key(s): {', '.join(bad)}")
        for f in dataclasses.fields(cls):
            if f.name in data and f.name != "synth":
                data[f.name] = _coerce(f.name, data[f.name], f.type)
        return cls(synth=SynthConfig(**synth), **data)

    def replace(self, **changes) -> "RunConfig":
        merged = self.to_dict()
        merged.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(merged)


def _coerce(name: str, value, type_name):
    kind = str(type_name)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if kind == "str":
        if isinstance(value, (dt.date,)):
            return value.isoformat()
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if kind.startswith("list"):
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{name} must be a list of integers")
        return list(value)
    return value


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = RunConfig.from_dict(data)
    # relative paths resolve against the config file's directory
    base = path.parent
    for key in ("data_dir", "dataset"):
        value = getattr(cfg, key)
        if not Path(value).is_absolute():
            setattr(cfg, key, str(base / value))
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Render a config as TOML that ``load_config`` reads back."""
    lines = []
    synth_lines = ["", "[synth]"]
    for key, value in cfg.to_dict().items():
        if key == "synth":
            for skey, svalue in value.items():
                synth_lines.append(f"{skey} = {_toml_value(svalue)}")
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines + synth_lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'
