"""TOML run configuration with strict key checking.

Sections: ``[run]``, ``[paths]``, ``[model]``, ``[objective]``, ``[synth]``,
``[train]``, ``[eval]``. Any unknown section or key is an error.

Seeds: ``run.seed`` is the master seed. The dataset is generated with the
master seed itself (image ``i`` uses ``SeedSequence([seed, i])``); training
uses ``SeedSequence([seed, 1])``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import CategoryStyle, SynthConfig
from .model import ModelConfig
from .objective import ObjectiveConfig
from .train import REGIMES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class EvalConfig:
    nms_threshold: float = 0.5
    nms_radius: float = 6.0
    match_radius: float = 6.0
    split: str = "test"


@dataclass
class SynthSection:
    n_images: int = 100
    split_ratio: tuple = (7, 1, 2)
    mask_radius: float = 3
    params: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class RunConfig:
    seed: int = 0
    regime: str = "opi_full"
    threads: Optional[int] = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    def synth_config(self) -> SynthConfig:
        return dataclasses.replace(self.synth.params, seed=self.seed)

    def train_config(self) -> TrainConfig:
        seed = int(np.random.SeedSequence([self.seed, 1]).generate_state(1)[0])
        return dataclasses.replace(self.train, seed=seed, mask_radius=self.synth.mask_radius)


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check(section: str, table: dict, allowed: set) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _make(section: str, cls, table: dict, **extra):
    try:
        return cls(**{**table, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def _tuples(table: dict, keys) -> dict:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in table.items()}


def parse(doc: dict, base_dir: Path | None = None) -> RunConfig:
    sections = {"run", "paths", "model", "objective", "synth", "train", "eval"}
    _check("top level", doc, sections)
    run = doc.get("run", {})
    _check("run", run, {"seed", "regime", "threads"})
    regime = run.get("regime", "opi_full")
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {', '.join(REGIMES)}")

    paths = doc.get("paths", {})
    _check("paths", paths, _fields(PathsConfig))

    model = doc.get("model", {})
    _check("model", model, _fields(ModelConfig))
    preset = model.get("scale_preset", "desk")
    base = ModelConfig.full if preset == "full" else ModelConfig.desk
    try:
        model_cfg = base(**model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [model] section: {exc}") from exc

    objective = doc.get("objective", {})
    _check("objective", objective, _fields(ObjectiveConfig))

    synth = dict(doc.get("synth", {}))
    synth_keys = (_fields(SynthConfig) - {"seed"}) | {"n_images", "split_ratio", "mask_radius"}
    _check("synth", synth, synth_keys)
    section_kw = {k: synth.pop(k) for k in ("n_images", "split_ratio", "mask_radius") if k in synth}
    if "styles" in synth:
        for i, style in enumerate(synth["styles"]):
            _check(f"synth.styles[{i}]", style, _fields(CategoryStyle))
        synth["styles"] = tuple(CategoryStyle(**_tuples(s, ("color", "radius", "aspect"))) for s in synth["styles"])
    synth_params = _make("synth", SynthConfig, _tuples(synth, ("background_color", "mixture")))
    if "split_ratio" in section_kw:
        section_kw["split_ratio"] = tuple(section_kw["split_ratio"])
    synth_section = SynthSection(params=synth_params, **section_kw)

    train = doc.get("train", {})
    _check("train", train, _fields(TrainConfig) - {"seed", "mask_radius"})
    train_cfg = _make("train", TrainConfig, _tuples(train, ("stage_epochs",)))
    if len(train_cfg.stage_epochs) != 3:
        raise ConfigError("[train] stage_epochs needs three entries")

    ev = doc.get("eval", {})
    _check("eval", ev, _fields(EvalConfig))

    return RunConfig(
        seed=int(run.get("seed", 0)),
        regime=regime,
        threads=run.get("threads"),
        paths=_make("paths", PathsConfig, paths),
        model=model_cfg,
        objective=_make("objective", ObjectiveConfig, objective),
        synth=synth_section,
        train=train_cfg,
        eval=_make("eval", EvalConfig, ev),
        base_dir=base_dir or Path.cwd(),
    )


def load(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse(doc, base_dir=path.resolve().parent)
