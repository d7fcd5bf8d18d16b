"""Experiment configuration files.

A configuration is an INI document with the sections ``[dataset]``,
``[model.NAME]`` (one per model), ``[attack]``, ``[eval]`` and ``[ablate]``.
Every key has a default; unknown sections and keys are rejected. Paths are
resolved relative to the directory holding the configuration file.
Perturbation sizes are given on the 0-255 pixel scale.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .attacks import AttackConfig, make_config
from .exceptions import ConfigurationError
from .transforms import Admix, BsrConfig, Dim, Sim, TimKernel, parse_transform


@dataclass
class DatasetSection:
    source: str = "synthetic"
    path: str = ""
    train_path: str = ""
    image_size: int = 32
    classes: int = 4
    count: int = 500
    train_count: int = 5000
    seed: int = 2
    train_seed: int = 1


@dataclass
class ModelSection:
    name: str = ""
    architecture: str = "cnn3"
    checkpoint: str = ""
    seed: int = 0
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 32
    schedule: str = "cosine"


@dataclass
class AttackSection:
    name: str = "bsr"
    epsilon: float = 16.0
    iters: int = 10
    step: float | None = None
    decay: float = 1.0
    blocks: int = 2
    angle: float = 24.0
    copies: int = 20
    min_block_fraction: float = 0.1
    interpolation: str = "nearest"
    dim_probability: float = 0.5
    dim_resize_low: float = 0.9
    tim_size: int = 7
    tim_sigma: float | None = None
    sim_scales: int = 5
    admix_count: int = 3
    admix_strength: float = 0.2
    clip: bool = True
    seed: int = 0


@dataclass
class EvalSection:
    sample_size: int = 500
    attacks: list = field(default_factory=lambda: ["mifgsm", "bsr"])
    seeds: list = field(default_factory=lambda: [0])
    output: str = "results"


@dataclass
class AblateSection:
    n: list = field(default_factory=lambda: [1, 2, 3, 4])
    copies: list = field(default_factory=lambda: [1, 5, 10, 20])
    tau: list = field(default_factory=lambda: [0.0, 6.0, 12.0, 24.0, 45.0, 90.0, 180.0])
    parameters: list = field(default_factory=lambda: ["n", "copies", "tau"])
    variants: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    models: list = field(default_factory=list)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def model(self, name: str | None = None) -> ModelSection:
        if not self.models:
            raise ConfigurationError("configuration declares no [model.NAME] sections")
        if name is None:
            return self.models[0]
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigurationError(f"no model named {name!r}; declared: {[m.name for m in self.models]}")

    # -- attack settings --------------------------------------------------
    def bsr_config(self) -> BsrConfig:
        a = self.attack
        return BsrConfig(n=a.blocks, tau=a.angle, copies=a.copies, min_block_fraction=a.min_block_fraction,
                         interpolation=a.interpolation)

    def attack_config(self, name: str | None = None, seed: int | None = None) -> AttackConfig:
        a = self.attack
        name = (name or a.name).lower()
        eps = a.epsilon / 255.0
        step = None if a.step is None else a.step / 255.0
        seed = a.seed if seed is None else seed
        bsr = self.bsr_config()
        cfg = make_config(name if name in ("fgsm", "ifgsm", "mifgsm", "bs", "br") else "mifgsm",
                          epsilon=eps, num_iters=a.iters, step_size=step, decay=a.decay, bsr=bsr, seed=seed,
                          clip_to_valid_range=a.clip)
        if name not in ("fgsm", "ifgsm", "mifgsm", "bs", "br"):
            cfg = replace(cfg, transform=parse_transform(
                name, bsr=bsr, dim=Dim(a.dim_probability, a.dim_resize_low),
                tim=TimKernel(a.tim_size, a.tim_sigma), sim=Sim(a.sim_scales),
                admix=Admix(a.admix_count, a.admix_strength, a.sim_scales)))
        return cfg

    def effective(self) -> dict:
        """Flat ``section.key -> value`` view of every setting, defaults included."""
        out = {}
        for section in ("dataset", "attack", "eval", "ablate"):
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = _format(getattr(obj, f.name))
        for m in self.models:
            for f in fields(m):
                if f.name != "name":
                    out[f"model.{m.name}.{f.name}"] = _format(getattr(m, f.name))
        return out


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, default, key: str, list_item=None):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return lowered in ("true", "yes", "1")
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [_coerce(s, list_item, key) for s in items] if list_item is not None else items
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"invalid value {raw!r} for {key}") from None
    return raw


_OPTIONAL_FLOATS = {("attack", "step"), ("attack", "tim_sigma")}
_LIST_ITEMS = {("eval", "seeds"): 0, ("ablate", "n"): 0, ("ablate", "copies"): 0, ("ablate", "tau"): 0.0}


def _fill(obj, section: str, items, label: str):
    known = {f.name for f in fields(obj)} - {"name"}
    updates = {}
    for key, raw in items:
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} in [{label}]")
        default = getattr(obj, key)
        if (section, key) in _OPTIONAL_FLOATS:
            updates[key] = None if raw.strip() == "" else _coerce(raw, 0.0, f"{label}.{key}")
        else:
            updates[key] = _coerce(raw, default, f"{label}.{key}", _LIST_ITEMS.get((section, key)))
    return replace(obj, **updates)


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from None
    cfg = ExperimentConfig(base_dir=base_dir)
    for section in parser.sections():
        items = parser.items(section)
        if section in ("dataset", "attack", "eval", "ablate"):
            setattr(cfg, section, _fill(getattr(cfg, section), section, items, section))
        elif section.startswith("model."):
            name = section[len("model."):]
            if not name or any(m.name == name for m in cfg.models):
                raise ConfigurationError(f"invalid or duplicate model section [{section}]")
            model = _fill(ModelSection(name=name), "model", items, section)
            if not model.checkpoint:
                model = replace(model, checkpoint=f"{name}.ckpt")
            cfg.models.append(model)
        else:
            raise ConfigurationError(f"unknown section [{section}]")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.dataset
    if d.source not in ("synthetic", "directory"):
        raise ConfigurationError(f"dataset.source must be 'synthetic' or 'directory', got {d.source!r}")
    if d.source == "directory" and not d.path:
        raise ConfigurationError("dataset.path is required when dataset.source = directory")
    if d.count < 1 or d.train_count < 1:
        raise ConfigurationError("dataset.count and dataset.train_count must be positive")
    if cfg.attack.epsilon < 0:
        raise ConfigurationError("attack.epsilon must be >= 0")
    if cfg.eval.sample_size < 1:
        raise ConfigurationError("eval.sample_size must be positive")
    if not cfg.eval.seeds:
        raise ConfigurationError("eval.seeds must list at least one seed")
    for m in cfg.models:
        if m.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"model.{m.name}.schedule must be 'constant' or 'cosine', got {m.schedule!r}")
    for p in cfg.ablate.parameters:
        if p not in ("n", "copies", "tau"):
            raise ConfigurationError(f"unknown ablation parameter {p!r}")
    # eager construction surfaces range errors in the attack section
    cfg.attack_config()
