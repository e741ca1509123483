"""Experiment configuration: an INI-style file with one section per module,
strict unknown-key rejection, and CLI flag overrides that win over the file.

The parsed :class:`ExperimentConfig` round-trips: ``parse(serialize(cfg))``
yields an identical config.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from typing import Optional

from ssl_infolab.losses import OBJECTIVE_NAMES, SslObjectiveConfig
from ssl_infolab.trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class DataConfig:
    kind: str = "two_moons"            # two_moons | prototypes | csv
    n: int = 512
    noise: float = 0.08
    input_scale: float = 1.0
    view_noise: float = 0.05
    n_prototypes: int = 12
    dim: int = 4
    rank: int = 2
    n_classes: int = 2
    separation_floor: float = 2.0
    noise_scale: float = 0.05
    spread: float = 4.0
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("two_moons", "prototypes", "csv"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("csv data needs a path")


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (32, 32)
    embed_dim: int = 8
    activation: str = "relu"
    leaky_slope: float = 0.1

    def dims(self, input_dim: int) -> list:
        return [input_dim, *self.hidden, self.embed_dim]


@dataclass(frozen=True)
class BoundConfig:
    delta: float = 0.1
    n_labeled: int = 200
    m_unlabeled: int = 200
    n_test: int = 400
    ridge: float = 0.0
    ensemble_size: int = 8
    n_sign_draws: int = 2048


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    objective_name: str = "vicreg"
    objective: SslObjectiveConfig = field(default_factory=SslObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if self.objective_name not in OBJECTIVE_NAMES:
            raise ConfigError(f"unknown objective {self.objective_name!r}")


_SECTION_FIELDS = {
    "experiment": ("schema_version", "seed", "out_dir"),
    "data": tuple(DataConfig.__dataclass_fields__),
    "network": tuple(NetworkConfig.__dataclass_fields__),
    "objective": ("name",) + tuple(SslObjectiveConfig.__dataclass_fields__),
    "train": tuple(TrainConfig.__dataclass_fields__),
    "bound": tuple(BoundConfig.__dataclass_fields__),
}

_INT_FIELDS = {"schema_version", "seed", "n", "n_prototypes", "dim", "rank", "n_classes",
               "embed_dim", "epochs", "batch_size", "diagnostics_every",
               "probe_batch_size", "max_steps", "n_labeled", "m_unlabeled", "n_test",
               "ensemble_size", "n_sign_draws"}
_STR_FIELDS = {"out_dir", "kind", "path", "activation", "name", "entropy_plugin",
               "cov_mode", "optimizer"}
_TUPLE_FIELDS = {"hidden"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _STR_FIELDS:
        return raw
    if key in _TUPLE_FIELDS:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    if key == "max_steps":
        return None if raw.lower() in ("", "none") else int(raw)
    if key in _INT_FIELDS:
        return int(raw)
    return float(raw)


def _format_value(key: str, value) -> str:
    if key in _TUPLE_FIELDS:
        return ",".join(str(int(v)) for v in value)
    if key == "max_steps" and value is None:
        return "none"
    return str(value)


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse an INI experiment config; ``overrides`` maps "section.key" to raw
    string values and wins over the file.  Unknown sections or keys are
    rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}") from exc

    values: dict[str, dict] = {s: {} for s in _SECTION_FIELDS}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = _parse_value(key, raw)
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTION_FIELDS or key not in _SECTION_FIELDS[section]:
            raise ConfigError(f"unknown override {dotted!r}")
        values[section][key] = _parse_value(key, raw)

    try:
        objective_kwargs = dict(values["objective"])
        objective_name = objective_kwargs.pop("name", "vicreg")
        return ExperimentConfig(
            **values["experiment"],
            data=DataConfig(**values["data"]),
            network=NetworkConfig(**values["network"]),
            objective_name=objective_name,
            objective=SslObjectiveConfig(**objective_kwargs),
            train=TrainConfig(**values["train"]),
            bound=BoundConfig(**values["bound"]),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    sections = {
        "experiment": {"schema_version": cfg.schema_version, "seed": cfg.seed,
                       "out_dir": cfg.out_dir},
        "data": cfg.data.__dict__,
        "network": cfg.network.__dict__,
        "objective": {"name": cfg.objective_name, **cfg.objective.__dict__},
        "train": cfg.train.__dict__,
        "bound": cfg.bound.__dict__,
    }
    for name, body in sections.items():
        parser[name] = {k: _format_value(k, v) for k, v in body.items()}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def with_objective(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Copy of the config running a different named objective."""
    return replace(cfg, objective_name=name)
