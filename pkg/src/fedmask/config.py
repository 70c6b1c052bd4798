"""Run configuration: defaults, TOML loading, validation."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fedmask.costmodel import ParametricBaseline
from fedmask.masking import MaskingError, ModulusConfig

PARTITION_LAWS = ("iid", "skewed")
SELECTION_STRATEGIES = ("uniform", "capability")
TRANSPORTS = ("bus", "socket")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    clients: int = 10
    selection_fraction: float = 0.3
    min_cohort: int = 2
    rounds: int = 25
    model_dim: int = 8
    samples_per_client: int = 50
    partition_law: str = "iid"
    noise_std: float = 0.0
    learning_rate: float = 0.1
    epochs: int = 3
    batch_size: int = 10
    model_kind: str = "linear"
    frac_bits: int = 24
    max_abs_component: float = 256.0
    max_count: int = 65536
    selection_strategy: str = "uniform"
    require_gpu: bool = False
    max_traffic_load: int = 100
    transport: str = "bus"
    seed: int = 0
    baseline: ParametricBaseline = field(
        default_factory=lambda: ParametricBaseline(0.0, 0.0, 0.0))

    @property
    def cohort_size(self) -> int:
        return math.ceil(self.selection_fraction * self.clients)

    def modulus_config(self) -> ModulusConfig:
        return ModulusConfig(frac_bits=self.frac_bits,
                             max_abs_component=self.max_abs_component,
                             max_count=self.max_count,
                             max_clients=self.clients)

    def validate(self) -> None:
        if self.clients < 2:
            raise ConfigError(f"need at least 2 clients, got {self.clients}")
        if not 0 < self.selection_fraction <= 1:
            raise ConfigError("selection_fraction must be in (0, 1], got "
                              f"{self.selection_fraction}")
        if self.min_cohort < 2:
            raise ConfigError(f"min_cohort must be at least 2, got "
                              f"{self.min_cohort}")
        if self.cohort_size < self.min_cohort:
            raise ConfigError(
                f"cohort of {self.cohort_size} is below the minimum of "
                f"{self.min_cohort}: raise selection_fraction or clients")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be positive, got {self.rounds}")
        if self.model_dim < 1:
            raise ConfigError(f"model_dim must be positive, got "
                              f"{self.model_dim}")
        if self.samples_per_client < 1:
            raise ConfigError("samples_per_client must be positive, got "
                              f"{self.samples_per_client}")
        if self.partition_law not in PARTITION_LAWS:
            raise ConfigError(f"unknown partition_law {self.partition_law!r};"
                              f" choose from {PARTITION_LAWS}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got "
                              f"{self.noise_std}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got "
                              f"{self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got "
                              f"{self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got "
                              f"{self.batch_size}")
        if self.samples_per_client > self.max_count:
            raise ConfigError(
                f"samples_per_client {self.samples_per_client} exceeds the "
                f"masked-count bound max_count={self.max_count}")
        if self.selection_strategy not in SELECTION_STRATEGIES:
            raise ConfigError(
                f"unknown selection_strategy {self.selection_strategy!r}; "
                f"choose from {SELECTION_STRATEGIES}")
        if not 0 <= self.max_traffic_load <= 100:
            raise ConfigError(f"max_traffic_load must be in [0, 100], got "
                              f"{self.max_traffic_load}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}; "
                              f"choose from {TRANSPORTS}")
        try:
            self.modulus_config().validate()
        except MaskingError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kwargs) -> "RunConfig":
        updates = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **updates) if updates else self


# section -> {toml key -> RunConfig attribute}
_SCHEMA = {
    "federation": {
        "clients": "clients",
        "selection_fraction": "selection_fraction",
        "min_cohort": "min_cohort",
        "rounds": "rounds",
    },
    "model": {
        "dim": "model_dim",
        "samples_per_client": "samples_per_client",
        "partition_law": "partition_law",
        "noise_std": "noise_std",
        "learning_rate": "learning_rate",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "kind": "model_kind",
    },
    "masking": {
        "frac_bits": "frac_bits",
        "max_abs_component": "max_abs_component",
        "max_count": "max_count",
    },
    "selection": {
        "strategy": "selection_strategy",
        "require_gpu": "require_gpu",
        "max_traffic_load": "max_traffic_load",
    },
    "transport": {
        "kind": "transport",
    },
    "run": {
        "seed": "seed",
    },
}

_BASELINE_KEYS = ("per_client_fixed", "per_client_per_weight",
                  "per_round_fixed")


def parse_config(data: dict) -> RunConfig:
    kwargs = {}
    for section, table in data.items():
        if section == "baseline":
            if not isinstance(table, dict):
                raise ConfigError("[baseline] must be a table")
            unknown = set(table) - set(_BASELINE_KEYS)
            if unknown:
                raise ConfigError(
                    f"unknown key in [baseline]: {sorted(unknown)[0]}")
            kwargs["baseline"] = ParametricBaseline(
                **{k: float(table.get(k, 0.0)) for k in _BASELINE_KEYS})
            continue
        mapping = _SCHEMA.get(section)
        if mapping is None:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            attr = mapping.get(key)
            if attr is None:
                raise ConfigError(f"unknown key in [{section}]: {key}")
            kwargs[attr] = value
    try:
        config = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return parse_config(data)
