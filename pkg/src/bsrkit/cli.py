"""Command-line entry point: ``bsrkit {train,attack,eval,ablate,heatmap}``."""
from __future__ import annotations

import argparse
import io
import itertools
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import models as M
from .attacks import run_attack
from .config import ExperimentConfig, load_config
from .datasets import make_shapes
from .evaluation import (EvalReport, Cell, ablate, compare_variants, grad_cam, heatmap_consistency,
                         transfer_matrix, variants_csv)
from .exceptions import BsrError, ConfigurationError, IngestionError
from .imageio import dequantize, quantize, read_image_directory, write_labels, write_ppm, write_text


def _preamble(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    values = {**cfg.effective(), **(extra or {})}
    return "".join(f"# {k} = {values[k]}\n" for k in sorted(values))


def _with_preamble(cfg, csv_text: str, extra=None) -> str:
    body = "".join(line + "\n" for line in csv_text.splitlines() if not line.startswith("#"))
    own = {line[2:].split(" = ", 1)[0]: line[2:].split(" = ", 1)[1]
           for line in csv_text.splitlines() if line.startswith("# ") and " = " in line}
    return _preamble(cfg, {**own, **(extra or {})}) + body


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def load_eval_set(cfg: ExperimentConfig, count: int | None = None):
    """Evaluation images (quantised to 8 bits), labels and file names."""
    d = cfg.dataset
    count = d.count if count is None else count
    if count < 1:
        raise ConfigurationError("dataset is empty (count must be positive)")
    if d.source == "directory":
        x, y, names = read_image_directory(cfg.resolve(d.path), (3, d.image_size, d.image_size), d.classes)
        return x[:count], y[:count], names[:count]
    ds = make_shapes(count, d.classes, d.image_size, seed=d.seed)
    return dequantize(quantize(ds.images)), ds.labels, [f"img{i:05d}.ppm" for i in range(count)]


def load_train_set(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.source == "directory":
        x, y, _ = read_image_directory(cfg.resolve(d.train_path or d.path), (3, d.image_size, d.image_size),
                                       d.classes)
        return x, y
    ds = make_shapes(d.train_count, d.classes, d.image_size, seed=d.train_seed)
    return ds.images, ds.labels


def load_model(cfg: ExperimentConfig, name: str | None = None) -> M.ConvClassifier:
    section = cfg.model(name)
    path = cfg.resolve(section.checkpoint)
    if not os.path.exists(path):
        raise ConfigurationError(f"missing checkpoint {path}; run 'bsrkit train' first")
    model = M.load(path)
    expected = (3, cfg.dataset.image_size, cfg.dataset.image_size)
    if tuple(model.input_shape) != expected:
        raise ConfigurationError(f"checkpoint {path} expects images {tuple(model.input_shape)}, dataset has {expected}")
    return model


def load_models(cfg: ExperimentConfig, names=None) -> dict:
    names = names or [m.name for m in cfg.models]
    return {name: load_model(cfg, name) for name in names}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    if not cfg.models:
        raise ConfigurationError("configuration declares no [model.NAME] sections")
    x, y = load_train_set(cfg)
    if x.shape[0] == 0:
        raise ConfigurationError("training set is empty")
    d = cfg.dataset
    for section in cfg.models:
        model = M.ConvClassifier(section.architecture, (3, d.image_size, d.image_size), d.classes,
                                 seed=section.seed, epochs=section.epochs, lr=section.lr,
                                 batch_size=section.batch_size, schedule=section.schedule)
        model.fit(x, y)
        path = cfg.resolve(section.checkpoint)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        M.save(model, path)
        log = io.StringIO()
        log.write(_preamble(cfg, {"model": section.name, "checksum": model.checksum()}))
        log.write("epoch,loss,accuracy\n")
        for epoch, (loss, acc) in enumerate(zip(model.history_.loss, model.history_.accuracy), start=1):
            log.write(f"{epoch},{loss!r},{acc!r}\n")
        write_text(path + ".log.csv", log.getvalue())
        print(f"{section.name}: final loss {model.history_.loss[-1]:.4f}, "
              f"train accuracy {model.history_.accuracy[-1]:.3f} -> {path}")
    return 0


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    model = load_model(cfg, args.model)
    x, y, names = load_eval_set(cfg, args.count)
    attack = cfg.attack_config()
    out_dir = args.out or os.path.join(cfg.resolve(cfg.eval.output), "attack")
    os.makedirs(out_dir, exist_ok=True)
    x_adv = run_attack(model, x, y, attack).x_adv
    eps_255 = cfg.attack.epsilon
    q_clean = quantize(x)
    pred = model.predict(x_adv)
    rows = []
    for i, name in enumerate(names):
        q_adv = quantize(x_adv[i])
        pre = float(np.abs(x_adv[i].astype(np.float64) - x[i]).max()) * 255
        post = int(np.abs(q_adv.astype(np.int64) - q_clean[i].astype(np.int64)).max())
        if pre > eps_255 + 255 * 2.0 ** -20 or post > math.ceil(eps_255):
            raise AssertionError(f"budget violated for {name}: {pre} / {post} > {eps_255}")
        write_ppm(os.path.join(out_dir, name), q_adv)
        rows.append(f"{name},{int(y[i])},{int(pred[i])},{pre!r},{post}\n")
    write_labels(os.path.join(out_dir, "labels.csv"), zip(names, y))
    manifest = _preamble(cfg, {"source_model": args.model or cfg.models[0].name,
                               **{f"attack.resolved.{k}": v for k, v in attack.describe().items()}})
    manifest += "filename,true_label,source_prediction,linf_255,linf_quantized_255\n" + "".join(rows)
    write_text(os.path.join(out_dir, "manifest.csv"), manifest)
    print(f"wrote {len(names)} adversarial images to {out_dir}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    targets = load_models(cfg)
    out = args.out or os.path.join(cfg.resolve(cfg.eval.output), "eval_report.csv")
    if args.adv_dir:
        first = next(iter(targets.values()))
        x, y, _ = read_image_directory(args.adv_dir, first.input_shape, first.num_classes)
        label = os.path.basename(os.path.normpath(args.adv_dir))
        report = EvalReport(sample_size=int(x.shape[0]))
        for name, model in targets.items():
            wrong = int(np.sum(model.predict(x) != y))
            report.cells.append(Cell("external", label, name, False, wrong, int(x.shape[0])))
    else:
        x, y, _ = load_eval_set(cfg, min(cfg.dataset.count, cfg.eval.sample_size))
        attacks = {}
        for seed in cfg.eval.seeds:
            for name in cfg.eval.attacks:
                key = name if len(cfg.eval.seeds) == 1 else f"{name}@seed{seed}"
                attacks[key] = cfg.attack_config(name, seed=seed)
        sources = None
        if args.source:
            cfg.model(args.source)
            sources = [args.source]
        report = transfer_matrix(targets, attacks, x, y, sources=sources)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_text(out, _with_preamble(cfg, report.to_csv()))
    for c in report.cells:
        tag = "white-box" if c.white_box else "black-box"
        print(f"{c.source:>10} {c.attack:>16} -> {c.target:<10} {tag}: {100 * c.rate:5.1f}%  ({c.successes}/{c.n})")
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    models = load_models(cfg)
    names = list(models)
    source = models[names[0]]
    targets = [models[n] for n in names[1:]] or [source]
    x, y, _ = load_eval_set(cfg, min(cfg.dataset.count, cfg.eval.sample_size))
    base = cfg.attack_config("bsr")
    out_dir = args.out or os.path.join(cfg.resolve(cfg.eval.output), "ablation")
    os.makedirs(out_dir, exist_ok=True)
    params = [args.parameter] if args.parameter else cfg.ablate.parameters
    for p in params:
        values = getattr(cfg.ablate, p) if args.values is None else args.values
        if not values:
            raise ConfigurationError(f"no sweep values for {p!r}")
        curve = ablate(p, values, cfg.eval.seeds, base, source, targets, x, y)
        write_text(os.path.join(out_dir, f"ablation_{p}.csv"),
                   _with_preamble(cfg, curve.to_csv(), {"source_model": names[0]}))
        print(f"{p}: " + ", ".join(f"{v}: {100 * m:.1f}%" for v, m in zip(curve.values, curve.means)))
    if cfg.ablate.variants and not args.parameter:
        rates = compare_variants(source, targets, x, y, base, seeds=cfg.eval.seeds)
        write_text(os.path.join(out_dir, "ablation_variants.csv"),
                   _with_preamble(cfg, variants_csv(rates, cfg.eval.seeds), {"source_model": names[0]}))
        print("variants: " + ", ".join(f"{k}: {100 * np.mean(v):.1f}%" for k, v in rates.items()))
    return 0


def cmd_heatmap(cfg: ExperimentConfig, args) -> int:
    names = args.models.split(",") if args.models else [m.name for m in cfg.models]
    models = load_models(cfg, names)
    if args.images:
        first = next(iter(models.values()))
        x, y, files = read_image_directory(args.images, first.input_shape, first.num_classes)
    else:
        x, y, files = load_eval_set(cfg, args.count)
    out_dir = args.out or os.path.join(cfg.resolve(cfg.eval.output), "heatmaps")
    os.makedirs(out_dir, exist_ok=True)
    maps = {}
    for name, model in models.items():
        layer = args.layer or model.conv_layers[-1]
        if layer not in model.conv_layers:
            raise ConfigurationError(f"unknown layer {layer!r} for model {name}; expected one of {model.conv_layers}")
        for i, fname in enumerate(files):
            cls = int(y[i]) if args.class_index is None else args.class_index
            h = grad_cam(model, x[i], cls, layer)
            maps[name, i] = h
            grid = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in h.values)
            stem = os.path.splitext(fname)[0]
            write_text(os.path.join(out_dir, f"{name}_{stem}.csv"),
                       _preamble(cfg, {"model": name, "layer": layer, "class_index": cls, "image": fname,
                                       "normalization": h.normalization}) + grid)
    if len(models) > 1:
        lines = ["image,model_a,model_b,consistency\n"]
        for a, b in itertools.combinations(list(models), 2):
            for i, fname in enumerate(files):
                lines.append(f"{fname},{a},{b},{heatmap_consistency(maps[a, i], maps[b, i])!r}\n")
        write_text(os.path.join(out_dir, "consistency.csv"),
                   _preamble(cfg, {"metric": "pearson correlation (artifact-defined proxy)"}) + "".join(lines))
    print(f"wrote {len(maps)} heatmaps to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _float_list(text: str):
    try:
        return [float(v) if "." in v else int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment configuration (INI)")
    common.add_argument("--epsilon", type=float, help="budget on the 0-255 scale")
    common.add_argument("--iters", type=int, help="number of iterations T")
    common.add_argument("--step", type=float, help="step size on the 0-255 scale (default epsilon/T)")
    common.add_argument("--decay", type=float, help="momentum decay")
    common.add_argument("--blocks", type=int, help="BSR blocks per axis n")
    common.add_argument("--angle", type=float, help="BSR maximum rotation tau in degrees")
    common.add_argument("--copies", type=int, help="BSR transformed copies N")
    common.add_argument("--transform", help="attack name, e.g. mifgsm, bsr, dim+bsr")
    common.add_argument("--seed", type=int, help="attack seed")
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(prog="bsrkit", description="Block shuffle and rotation transfer attacks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the configured models")
    p = sub.add_parser("attack", parents=[common], help="craft adversarial images with one model")
    p.add_argument("--model", help="model section name (default: first)")
    p.add_argument("--count", type=int, help="number of images (default: dataset.count)")
    p = sub.add_parser("eval", parents=[common], help="success-rate report")
    p.add_argument("--adv-dir", help="evaluate an existing directory of adversarial images")
    p.add_argument("--source", help="craft examples on this model only (default: every model)")
    p = sub.add_parser("ablate", parents=[common], help="BSR parameter sweeps")
    p.add_argument("--parameter", choices=("n", "copies", "tau"), help="sweep only this parameter")
    p.add_argument("--values", type=_float_list, help="comma-separated sweep values")
    p = sub.add_parser("heatmap", parents=[common], help="Grad-CAM grids and cross-model consistency")
    p.add_argument("--models", help="comma-separated model names (default: all)")
    p.add_argument("--images", help="image directory with labels.csv (default: dataset)")
    p.add_argument("--layer", help="convolutional layer (default: last)")
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: true label)")
    p.add_argument("--count", type=int, default=8, help="number of dataset images")
    return parser


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    a = cfg.attack
    updates = {k: v for k, v in {
        "epsilon": args.epsilon, "iters": args.iters, "step": args.step, "decay": args.decay,
        "blocks": args.blocks, "angle": args.angle, "copies": args.copies, "name": args.transform,
        "seed": args.seed}.items() if v is not None}
    cfg = replace(cfg, attack=replace(a, **updates))
    if args.seed is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, seeds=[args.seed]))
    from .config import validate
    validate(cfg)
    return cfg


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "ablate": cmd_ablate,
            "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if getattr(args, "values", None) is not None and not args.values:
            parser.error("--values must not be empty")
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, IngestionError) as exc:
        print(f"bsrkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BsrError as exc:
        print(f"bsrkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
