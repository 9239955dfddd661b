"""INI run configuration: one section per module, one seed for everything.

Example::

    [run]
    seed = 0

    [dataset]
    n_identities_source = 16
    shift_magnitude = 0.6

    [train]
    learning_rate = 0.001
    lr_schedule = 8:0.1

    [losses]
    lambda_sd_t = 1.0

    [erase]
    prob = 0.4

Unset keys keep their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .aulm import EraseConfig
from .datagen import DatasetSpec
from .losses import LossWeights
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is ``section.key``."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"invalid config field {field!r}: {reason}")
        self.field = field
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            seed, dataclasses.replace(self.dataset, seed=seed), dataclasses.replace(self.train, seed=seed)
        )

    def replace_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def to_dict(self) -> dict:
        return config_to_dict(self)


_SECTIONS = {
    "dataset": (DatasetSpec, {"seed"}),
    "train": (TrainConfig, {"seed", "loss_weights", "erase"}),
    "losses": (LossWeights, set()),
    "erase": (EraseConfig, set()),
}


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    text = text.strip()
    if not text or text.lower() == "none":
        return ()
    out = []
    for part in text.split(","):
        epoch, _, mult = part.partition(":")
        out.append((int(epoch), float(mult)))
    return tuple(out)


def _coerce(raw: str, default: Any, name: str) -> Any:
    raw = raw.strip()
    if name == "lr_schedule":
        return _parse_schedule(raw)
    if name == "widths":
        return tuple(int(v) for v in raw.split(","))
    if name == "exp_clamp":
        return None if raw.lower() == "none" else float(raw)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _blame(message: str, names) -> str | None:
    # constructors name the offending field in their message
    for name in sorted(names, key=len, reverse=True):
        if re.search(rf"\b{re.escape(name)}\b", message):
            return name
    return None


def _build(section: str, cls, values: dict, extra: dict | None = None):
    try:
        obj = cls(**values, **(extra or {}))
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except ValueError as err:
        name = _blame(str(err), [f.name for f in dataclasses.fields(cls)]) or "?"
        raise ConfigError(f"{section}.{name}", str(err)) from None


def parse_config(parser: configparser.ConfigParser) -> RunConfig:
    known = set(_SECTIONS) | {"run"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(section, f"unknown section; expected one of {sorted(known)}")

    seed = 0
    if parser.has_section("run"):
        for key in parser["run"]:
            if key != "seed":
                raise ConfigError(f"run.{key}", "unknown key")
        try:
            seed = int(parser["run"].get("seed", "0"))
        except ValueError as err:
            raise ConfigError("run.seed", str(err)) from None

    values: dict[str, dict] = {}
    for section, (cls, hidden) in _SECTIONS.items():
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls) if f.name not in hidden}
        values[section] = {}
        if not parser.has_section(section):
            continue
        for key, raw in parser[section].items():
            if key not in defaults:
                raise ConfigError(f"{section}.{key}", "unknown key")
            try:
                values[section][key] = _coerce(raw, defaults[key], key)
            except ValueError as err:
                raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}: {err}") from None

    weights = _build("losses", LossWeights, values["losses"])
    erase = _build("erase", EraseConfig, values["erase"])
    dataset = _build("dataset", DatasetSpec, values["dataset"], {"seed": seed})
    train = _build("train", TrainConfig, values["train"], {"seed": seed, "loss_weights": weights, "erase": erase})
    try:
        erase.check_image(dataset.image_height, dataset.image_width)
    except ValueError as err:
        raise ConfigError("erase.erase_h", str(err)) from None
    return RunConfig(seed, dataset, train)


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI file; ``None`` gives the default benchmark configuration."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive (P, K, M_t)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("<file>", f"config file {str(path)!r} not found")
        try:
            parser.read(path)
        except configparser.Error as err:
            raise ConfigError("<file>", str(err)) from None
    return parse_config(parser)


def _ini_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ", ".join(f"{e}:{m!r}" for e, m in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, dict] = {"run": {"seed": cfg.seed}}
    sources = {"dataset": cfg.dataset, "train": cfg.train, "losses": cfg.train.loss_weights, "erase": cfg.train.erase}
    for section, (cls, hidden) in _SECTIONS.items():
        obj = sources[section]
        out[section] = {f.name: getattr(obj, f.name) for f in dataclasses.fields(cls) if f.name not in hidden}
    return out


def write_config(cfg: RunConfig, path: str | Path) -> Path:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in config_to_dict(cfg).items():
        parser[section] = {k: _ini_value(v) for k, v in values.items()}
    path = Path(path)
    with path.open("w") as fh:
        parser.write(fh)
    return path
