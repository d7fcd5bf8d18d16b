"""Grad-CAM heatmaps, success rates, transfer matrices and ablation sweeps."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, describe_transform, make_config, run_attack
from .exceptions import ConfigurationError, ShapeError
from .tensor import Tensor
from .transforms import Bsr, BsrConfig, Composite, apply_bsr, sample_bsr
from .validation import check_images, check_labels


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    values: np.ndarray
    layer: str
    class_index: int
    normalization: str = "max"

    @property
    def shape(self) -> tuple:
        return self.values.shape


def cam_from_activation(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU of the activation channels weighted by their spatially averaged gradients, max-normalised."""
    activation = np.asarray(activation, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if activation.shape != grad.shape or activation.ndim != 3:
        raise ShapeError(f"activation {activation.shape} and gradient {grad.shape} must both be (C, h, w)")
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation, axes=1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam(model, image, class_index: int, layer: str | None = None) -> Heatmap:
    """Grad-CAM map of ``class_index`` at a convolutional activation (default: the last one)."""
    layer = model.conv_layers[-1] if layer is None else layer
    if layer not in model.conv_layers:
        raise ConfigurationError(f"unknown layer {layer!r}; expected one of {model.conv_layers}")
    x = check_images(image, shape=model.input_shape)
    if x.shape[0] != 1:
        raise ShapeError("grad_cam expects a single image")
    if not 0 <= class_index < model.num_classes:
        raise ConfigurationError(f"class_index {class_index} outside [0, {model.num_classes})")
    xt = Tensor(x, requires_grad=True)
    logits, acts = model.forward(xt, capture=(layer,))
    act = acts[layer]
    act.retain_grad = True
    # summed nll of a raw logit row is minus that logit
    T.backward(T.nll_loss(logits, [class_index], reduction="sum"))
    return Heatmap(cam_from_activation(act.data[0], -act.grad[0]), layer, int(class_index))


def _resample_nearest(values: np.ndarray, shape) -> np.ndarray:
    h, w = values.shape
    rows = np.floor((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int)
    cols = np.floor((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int)
    return values[rows][:, cols]


def heatmap_consistency(h_source, h_target) -> float:
    """Pearson correlation of two heatmaps (0 when either is constant).

    The smaller map is first resampled to the larger grid by nearest neighbour.
    """
    a = np.asarray(getattr(h_source, "values", h_source), dtype=np.float64)
    b = np.asarray(getattr(h_target, "values", h_target), dtype=np.float64)
    if a.shape != b.shape:
        if a.size < b.size:
            a = _resample_nearest(a, b.shape)
        else:
            b = _resample_nearest(b, a.shape)
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# success rates and reports
# ---------------------------------------------------------------------------

def attack_success_rate(target_model, adversarial, labels) -> float:
    """Fraction of images the target model does not assign their true label."""
    x = check_images(adversarial, shape=target_model.input_shape)
    if x.shape[0] == 0:
        raise ConfigurationError("cannot compute a success rate on an empty set")
    y = check_labels(labels, x.shape[0])
    return float(np.mean(target_model.predict(x) != y))


@dataclass
class Cell:
    source: str
    attack: str
    target: str
    white_box: bool
    successes: int
    n: int

    @property
    def rate(self) -> float:
        return self.successes / self.n if self.n else 0.0


def _config_lines(config: dict) -> str:
    return "".join(f"# {k} = {config[k]}\n" for k in sorted(config))


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    clean_accuracy: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    sample_size: int = 0

    def rate(self, source: str, attack: str, target: str) -> float:
        for c in self.cells:
            if (c.source, c.attack, c.target) == (source, attack, target):
                return c.rate
        raise KeyError((source, attack, target))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(_config_lines({**self.config, "sample_size": self.sample_size,
                                 **{f"clean_accuracy.{k}": v for k, v in self.clean_accuracy.items()}}))
        out.write("source,attack,target,white_box,successes,n,rate\n")
        for c in self.cells:
            out.write(f"{c.source},{c.attack},{c.target},{int(c.white_box)},{c.successes},{c.n},{c.rate!r}\n")
        return out.getvalue()


def transfer_matrix(models: dict, attacks: dict, images, labels, config: dict | None = None,
                    sources=None, pool=None) -> EvalReport:
    """Craft adversarial examples once per (source, attack) and score them on every model.

    ``models`` maps names to classifiers; ``attacks`` maps names to
    :class:`AttackConfig`. ``sources`` restricts which models craft
    examples (default: all).
    """
    if not models:
        raise ConfigurationError("transfer_matrix needs at least one model")
    names = list(models)
    first = models[names[0]]
    for name in names[1:]:
        m = models[name]
        if tuple(m.input_shape) != tuple(first.input_shape) or m.num_classes != first.num_classes:
            raise ShapeError(f"model {name!r} is incompatible with {names[0]!r}")
    x = check_images(images, shape=first.input_shape, value_range=True)
    y = check_labels(labels, x.shape[0], first.num_classes)
    if x.shape[0] == 0:
        raise ConfigurationError("evaluation set is empty")
    report = EvalReport(config=dict(config or {}), sample_size=int(x.shape[0]))
    report.clean_accuracy = {name: float(np.mean(models[name].predict(x) == y)) for name in names}
    for attack_name, cfg in attacks.items():
        for key, value in cfg.describe().items():
            report.config.setdefault(f"attack.{attack_name}.{key}", value)
    report.config.setdefault("ensemble_fusion", "logits, equal weights")
    for source in (sources or names):
        for attack_name, cfg in attacks.items():
            x_adv = run_attack(models[source], x, y, cfg, pool=pool).x_adv
            for target in names:
                wrong = int(np.sum(models[target].predict(x_adv) != y))
                report.cells.append(Cell(source, attack_name, target, target == source, wrong, int(x.shape[0])))
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_PARAMETERS = {"n": "n", "copies": "copies", "N": "copies", "tau": "tau"}


@dataclass
class AblationCurve:
    parameter: str
    values: list
    seeds: list
    per_seed: np.ndarray                 # (len(values), len(seeds))
    transformed_accuracy: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def means(self) -> np.ndarray:
        return self.per_seed.mean(axis=1)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(_config_lines({**self.config, "parameter": self.parameter}))
        out.write("parameter,value,seed,success_rate,transformed_accuracy\n")
        for i, v in enumerate(self.values):
            acc = self.transformed_accuracy[i] if self.transformed_accuracy else ""
            for j, s in enumerate(self.seeds):
                out.write(f"{self.parameter},{v},{s},{self.per_seed[i, j]!r},{acc!r}\n")
            out.write(f"{self.parameter},{v},mean,{self.means[i]!r},{acc!r}\n")
        return out.getvalue()


def _bsr_part(transform) -> Bsr:
    if isinstance(transform, Bsr):
        return transform
    if isinstance(transform, Composite) and transform.bsr is not None:
        return transform.bsr
    raise ConfigurationError("ablation needs a base configuration with a BSR transform")


def _with_bsr(config: AttackConfig, bsr_cfg: BsrConfig) -> AttackConfig:
    transform = config.transform
    if isinstance(transform, Composite):
        parts = tuple(Bsr(bsr_cfg) if isinstance(p, Bsr) else p for p in transform.parts)
        return replace(config, transform=Composite(parts))
    return replace(config, transform=Bsr(bsr_cfg))


def transformed_accuracy(model, images, labels, bsr_cfg: BsrConfig, seed: int = 0) -> float:
    """Fraction of single BSR-transformed clean images the model still classifies correctly."""
    x = check_images(images, shape=model.input_shape)
    y = check_labels(labels, x.shape[0])
    out = np.empty_like(x)
    for i, img in enumerate(x):
        out[i] = apply_bsr(img, sample_bsr(bsr_cfg, img.shape, np.random.default_rng([seed, i, 1])))
    return float(np.mean(model.predict(out) == y))


def black_box_rate(source, targets, images, labels, config: AttackConfig, pool=None) -> float:
    """Mean success rate over ``targets`` of examples crafted on ``source``."""
    x_adv = run_attack(source, images, labels, config, pool=pool).x_adv
    return float(np.mean([attack_success_rate(t, x_adv, labels) for t in targets]))


def ablate(parameter: str, values, seeds, base_config: AttackConfig, source, targets, images, labels,
           pool=None) -> AblationCurve:
    """Black-box success of BSR as one of ``n``, ``copies`` (alias ``N``) or ``tau`` is swept."""
    if parameter not in ABLATION_PARAMETERS:
        raise ConfigurationError(f"unknown ablation parameter {parameter!r}; expected one of {sorted(ABLATION_PARAMETERS)}")
    values = list(values)
    seeds = list(seeds)
    if len(values) < 1 or len(seeds) < 1:
        raise ConfigurationError("ablation needs at least one value and one seed")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigurationError("sweep values must be strictly increasing")
    field_name = ABLATION_PARAMETERS[parameter]
    base_bsr = _bsr_part(base_config.transform).config
    targets = targets if isinstance(targets, (list, tuple)) else [targets]
    per_seed = np.zeros((len(values), len(seeds)))
    accs = []
    for i, v in enumerate(values):
        bsr_cfg = replace(base_bsr, **{field_name: int(v) if field_name in ("n", "copies") else float(v)})
        if field_name == "n" and bsr_cfg.min_block_fraction > 1.0 / bsr_cfg.n:
            bsr_cfg = replace(bsr_cfg, min_block_fraction=min(base_bsr.min_block_fraction, 1.0 / bsr_cfg.n))
        accs.append(transformed_accuracy(source, images, labels, bsr_cfg))
        for j, s in enumerate(seeds):
            cfg = replace(_with_bsr(base_config, bsr_cfg), seed=int(s))
            per_seed[i, j] = black_box_rate(source, targets, images, labels, cfg, pool)
    config = {f"base.{k}": v for k, v in base_config.describe().items()}
    return AblationCurve(parameter, values, seeds, per_seed, accs, config)


def compare_variants(source, targets, images, labels, base_config: AttackConfig, seeds=(0,),
                     variants=("mifgsm", "bs", "br", "bsr"), pool=None) -> dict:
    """Black-box success per seed of MI-FGSM and the shuffle-only, rotation-only and full BSR variants."""
    bsr_cfg = _bsr_part(base_config.transform).config
    targets = targets if isinstance(targets, (list, tuple)) else [targets]
    out = {}
    for name in variants:
        rates = []
        for s in seeds:
            cfg = make_config(name, epsilon=base_config.epsilon, num_iters=base_config.num_iters,
                              step_size=base_config.step_size, decay=base_config.decay, bsr=bsr_cfg, seed=int(s))
            rates.append(black_box_rate(source, targets, images, labels, cfg, pool))
        out[name] = rates
    return out


def variants_csv(rates: dict, seeds, config: dict | None = None) -> str:
    out = io.StringIO()
    out.write(_config_lines(dict(config or {})))
    out.write("variant,seed,success_rate\n")
    for name, values in rates.items():
        for s, r in zip(seeds, values):
            out.write(f"{name},{s},{r!r}\n")
        out.write(f"{name},mean,{float(np.mean(values))!r}\n")
    return out.getvalue()
