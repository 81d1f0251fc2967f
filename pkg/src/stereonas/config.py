"""Run configuration: one document drives every pipeline stage.

A RunConfig bundles per-stage sections (data, search, train, bohb,
fanova).  The defaults form the "toy" profile, sized so the whole
pipeline runs on one desktop core in minutes.  The "paper" profile
keeps the published structural constants instead: 24-channel search
nets with 6 encoder cells, 42-channel derived nets with 7 encoder
cells (18 for the slim variant), and the eta=3 budget ladder of
16670/50000/150000 iterations with 11 bracket iterations on 5 workers.

Files may be TOML or JSON.  A file states a base profile and overrides
individual keys; unknown keys anywhere are rejected so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields

from .errors import ConfigError, ParseError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    n: int = 24
    height: int = 32
    width: int = 64
    max_disp: float = 6.0
    seed: int = 0
    channels: int = 1


@dataclass(frozen=True)
class SearchConfig:
    c_init: int = 4
    num_encoder_cells: int = 3
    num_decoder_cells: int = 2
    num_intermediate: int = 3
    max_disp: int = 8
    warm_start_iters: int = 200
    alternating_iters: int = 1000
    batch_size: int = 4
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 1e-4
    alpha_weight_decay: float = 1e-3
    tau_start: float = 1.0
    tau_end: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    stack: str = "c"
    c_inits: tuple = (8,)
    num_encoder_cells: int = 4
    num_decoder_cells: int = 2
    max_disp: int = 8
    iters: int = 60
    lr: float = 1e-4
    milestones: tuple = ()
    drop_factor: float = 0.5
    batch_size: int = 4
    freeze_previous: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.c_inits) != len(self.stack):
            raise ConfigError(
                f"{len(self.c_inits)} c_inits for stack {self.stack!r}")


@dataclass(frozen=True)
class BohbConfig:
    b_min: float = 5.0
    b_max: float = 45.0
    eta: float = 3.0
    n_iterations: int = 4
    workers: int = 1
    seed: int = 0
    lr_low: float = 1e-4
    lr_high: float = 1e-1
    wd_low: float = 1e-6
    wd_high: float = 1e-2

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class FanovaConfig:
    n_trees: int = 16
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    profile: str = "toy"
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bohb: BohbConfig = field(default_factory=BohbConfig)
    fanova: FanovaConfig = field(default_factory=FanovaConfig)


def paper_config() -> RunConfig:
    """Profile with the published structural constants.

    Way beyond desk scale; it exists so configs can state the real
    shapes and so tests can pin them.
    """
    return RunConfig(
        profile="paper",
        data=DataConfig(),
        search=SearchConfig(
            c_init=24,
            num_encoder_cells=6,
            num_decoder_cells=3,
            warm_start_iters=100_000,
            alternating_iters=200_000,
        ),
        train=TrainConfig(
            stack="css",
            c_inits=(42, 42, 42),
            num_encoder_cells=7,
            num_decoder_cells=4,
            iters=600_000,
            milestones=(300_000, 400_000, 500_000),
        ),
        bohb=BohbConfig(
            b_min=16_670.0,
            b_max=150_000.0,
            eta=3.0,
            n_iterations=11,
            workers=5,
        ),
    )


def default_config(profile: str = "toy") -> RunConfig:
    if profile == "toy":
        return RunConfig()
    if profile == "paper":
        return paper_config()
    raise ConfigError(f"unknown profile {profile!r} (toy or paper)")


_SECTIONS = {f.name: f.type for f in fields(RunConfig) if f.name != "profile"}


def _merge_section(base, doc: dict, where: str):
    allowed = {f.name: f for f in fields(type(base))}
    updates = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")
        current = getattr(base, key)
        if isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{key} must be a list")
            value = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            value = float(value)
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{key} must be an integer")
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{key} must be a string")
        updates[key] = value
    return dataclasses.replace(base, **updates)


def parse_doc(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML/JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a table/object")
    doc = dict(doc)
    profile = doc.pop("profile", "toy")
    if not isinstance(profile, str):
        raise ConfigError("profile must be a string")
    cfg = default_config(profile)
    updates = {}
    for key, value in doc.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a table/object")
        updates[key] = _merge_section(getattr(cfg, key), value, key)
    return dataclasses.replace(cfg, **updates)


def load_config(path) -> RunConfig:
    """Read a TOML (default) or JSON (by extension) config file."""
    text_path = str(path)
    try:
        if text_path.endswith(".json"):
            with open(text_path) as fh:
                doc = json.load(fh)
        else:
            with open(text_path, "rb") as fh:
                doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {text_path}") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ParseError(f"{text_path}: {exc}") from None
    return parse_doc(doc)


def config_to_doc(cfg: RunConfig) -> dict:
    """Plain-dict form, embedded in artifacts for provenance."""
    doc = dataclasses.asdict(cfg)
    for section in doc.values():
        if isinstance(section, dict):
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
    return doc
