"""
Experiment configuration: flat keys loaded from TOML or JSON, environment defaults and
command-line overrides.
"""

import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from errors import ConfigError
from formats import write_json

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

load_dotenv()

METHODS = ("fedlppa", "fedavg", "local", "centralized_weak", "centralized_full")
STRATEGIES = ("psa", "random", "fixed_order", "hps")
FUSIONS = ("none", "ca", "sa", "da")
SHARED_MODEL_METHODS = ("fedavg", "centralized_weak", "centralized_full")

DEFAULT_OUTPUT_ROOT = "./runs"
DEFAULT_DATA_ROOT = "./data"


def output_root() -> Path:
    return Path(os.getenv("FEDLPPA_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def data_root() -> Path:
    return Path(os.getenv("FEDLPPA_DATA_ROOT", DEFAULT_DATA_ROOT))


@dataclass
class ExperimentConfig:
    seed: int = 0
    sites: str = "default4"
    dataset_dir: str = ""
    method: str = "fedlppa"
    strategy: str = "psa"
    rounds: int = 100
    local_iters: int = 10
    batch: int = 12
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    lam: float = 0.5
    eval_every: int = 10
    tdf_on: bool = True
    pd_on: bool = True
    la_on: bool = True
    ukp_on: bool = True
    asp_on: bool = True
    fusion: str = "da"
    augment: bool = True
    workers: int = 1
    channels_base: int = 16
    depth: int = 4
    la_max_iters: int = 10
    output_dir: str = ""
    run_name: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; expected one of {METHODS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"Unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"Unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_iters < 0:
            raise ConfigError(f"local_iters must be >= 0, got {self.local_iters}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.method == "fedlppa":
            if self.pd_on and not self.tdf_on:
                raise ConfigError("pd_on requires tdf_on (the dual decoder consumes the TDF feature)")
            if not self.tdf_on and (not self.ukp_on or not self.asp_on or self.fusion != "da"):
                raise ConfigError("Prompt and fusion switches need tdf_on")
        return self

    def effective(self) -> "ExperimentConfig":
        """Copy with the FedLPPA-only switches forced off for the baseline methods"""
        if self.method == "fedlppa":
            return self
        return replace(self, tdf_on=False, pd_on=False, la_on=False)

    @property
    def shared_model(self) -> bool:
        return self.method in SHARED_MODEL_METHODS

    def resolved_dataset_dir(self) -> Path:
        return Path(self.dataset_dir) if self.dataset_dir else data_root() / "default4"

    def resolved_run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        name = self.run_name or f"{self.method}_{self.strategy}_s{self.seed}"
        return output_root() / name

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> None:
        write_json(path, self.to_dict())


def _coerce(name: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} expects {kind.__name__}, got {value!r}") from e


def _field_types() -> Dict[str, type]:
    defaults = ExperimentConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(ExperimentConfig)}


def config_from_dict(data: Dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    types = _field_types()
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, types[k]) for k, v in data.items() if v is not None}
    return replace(base or ExperimentConfig(), **values)


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    """Defaults, then the TOML/JSON file, then ``overrides``; the result is validated"""
    cfg = ExperimentConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            if path.suffix == ".toml":
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            else:
                data = json.loads(path.read_text(encoding="utf-8"))
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
        cfg = config_from_dict(data, cfg)
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg.validate()


def config_keys() -> List[str]:
    return [f.name for f in fields(ExperimentConfig)]


# Ablation grids. Every row shares the data seed of the base config.
TABLE5_ROWS = {
    "baseline": dict(tdf_on=False, pd_on=False, la_on=False),
    "+TDF": dict(tdf_on=True, pd_on=False, la_on=False),
    "+TDF+PD": dict(tdf_on=True, pd_on=True, la_on=False),
    "+TDF+LA": dict(tdf_on=True, pd_on=False, la_on=True),
    "full": dict(tdf_on=True, pd_on=True, la_on=True),
}
STRATEGY_ROWS = {name: dict(strategy=name) for name in STRATEGIES}
PROMPT_ROWS = {
    "DDP": dict(ukp_on=False, asp_on=False),
    "DDP+ASP": dict(ukp_on=False, asp_on=True),
    "DDP+UKP": dict(ukp_on=True, asp_on=False),
    "all": dict(ukp_on=True, asp_on=True),
}
FUSION_ROWS = {name: dict(fusion=name) for name in FUSIONS}
METHOD_ROWS = {name: dict(method=name) for name in METHODS}
GRIDS = {
    "table5": TABLE5_ROWS,
    "strategy": STRATEGY_ROWS,
    "prompts": PROMPT_ROWS,
    "fusion": FUSION_ROWS,
    "methods": METHOD_ROWS,
}


def ablation_configs(base: ExperimentConfig, grid: str) -> Dict[str, ExperimentConfig]:
    if grid not in GRIDS:
        raise ConfigError(f"Unknown ablation grid {grid!r}; expected one of {tuple(GRIDS)}")
    rows = {}
    for name, changes in GRIDS[grid].items():
        rows[name] = replace(base, **{"method": "fedlppa", **changes}).validate()
    return rows
