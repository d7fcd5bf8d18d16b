"""Acceptance suite: one test per criterion, each printing a pass/fail line in the summary.

Criteria 5 to 8 train desk-scale models (cached, see ``transfer_setup``);
a cold run takes well over an hour on one CPU core.
"""
import os
import time
from dataclasses import replace

import numpy as np
import pytest

import transfer_setup as X
from bsrkit import attacks as A
from bsrkit import evaluation as E
from bsrkit import imageio as io
from bsrkit import models as M
from bsrkit import transforms as tf
from bsrkit.cli import main
from bsrkit.datasets import make_shapes
from oracles import gradient_check, grad_cam_direct, pearson

pytestmark = pytest.mark.slow


def criterion(number):
    def mark(fn):
        fn.criterion = number
        return fn
    return mark


@criterion(1)
def test_gradient_matches_finite_differences(acceptance):
    start = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        model = M.build("cnn2", (3, 8, 8), 4, seed=seed)
        x = np.random.default_rng(seed).random((1, 3, 8, 8))
        check = gradient_check(model, x, [seed % 4], h=1e-3, threshold=1e-4)
        smooth = check["smooth"]
        ok &= smooth.size >= 100 and smooth.max() <= 1e-3
        rows.append(f"{smooth.size} coords max {smooth.max():.1e} (raw {check['raw'].size} coords,"
                    f" {int((check['raw'] > 1e-3).sum())} above tol, {check['kinked']} kink-crossing)")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    acceptance(1, ok, f"{elapsed:.0f}s; " + "; ".join(rows))


@criterion(2)
def test_reduction_lattice_bit_exact(acceptance):
    checks = []
    for arch, size, seed in [("cnn2", 16, 0), ("cnn3", 32, 1), ("cnn4", 32, 2)]:
        model = M.build(arch, (3, size, size), 4, seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.random((6, 3, size, size)).astype(np.float32)
        y = rng.integers(0, 4, 6)
        for attack_seed in (0, 7):
            bsr_id = A.make_config("bsr", bsr=tf.BsrConfig(n=1, tau=0, copies=1), seed=attack_seed)
            mi = A.make_config("mifgsm", seed=attack_seed)
            ifg = A.make_config("ifgsm", seed=attack_seed)
            eps = 16 / 255
            checks.append(A.run_attack(model, x, y, bsr_id).x_adv.tobytes() == A.run_attack(model, x, y, mi).x_adv.tobytes())
            checks.append(A.run_attack(model, x, y, replace(mi, decay=0.0)).x_adv.tobytes()
                          == A.run_attack(model, x, y, ifg).x_adv.tobytes())
            one = replace(ifg, num_iters=1, step_size=eps)
            checks.append(A.run_attack(model, x, y, one).x_adv.tobytes() == A.fgsm(model, x, y, eps).tobytes())
    acceptance(2, all(checks), f"{sum(checks)}/{len(checks)} reductions bit-exact")


BUDGET_KINDS = ["fgsm", "ifgsm", "mifgsm", "dim", "tim", "sim", "admix", "bsr", "bs", "br",
                "dim+tim+bsr", "ensemble-mifgsm", "ensemble-bsr"]


@criterion(3)
def test_budget_invariant(acceptance):
    per_kind = 78  # 13 kinds x 78 = 1014 images
    models = [M.build("cnn3", (3, 16, 16), 4, seed=5), M.build("cnn4", (3, 16, 16), 4, seed=6)]
    violations, images, steps = 0, 0, 0
    bound = 2.0 ** -20
    for k, kind in enumerate(BUDGET_KINDS):
        rng = np.random.default_rng(100 + k)
        x = rng.random((per_kind, 3, 16, 16)).astype(np.float32)
        # saturated pixels exercise the clipping path
        sat = rng.random(x.shape) < 0.3
        x[sat] = rng.integers(0, 2, sat.sum()).astype(np.float32)
        y = rng.integers(0, 4, per_kind)
        eps = (16 / 255, 8 / 255, 0.1)[k % 3]
        name = kind.split("-")[-1]
        src = models if kind.startswith("ensemble") else models[0]
        cfg = replace(A.make_config(name, epsilon=eps, bsr=tf.BsrConfig(copies=5), seed=k), record_trace=True)
        res = A.run_attack(src, x, y, cfg)
        for entry in res.trace:
            steps += 1
            violations += int((entry["linf"] > eps + bound).sum())
            violations += int((entry["min_pixel"] < 0).sum() + (entry["max_pixel"] > 1).sum())
        final = np.abs(res.x_adv.astype(np.float64) - x).reshape(per_kind, -1).max(axis=1)
        violations += int((final > eps + bound).sum())
        images += per_kind
    acceptance(3, violations == 0 and images >= 1000,
               f"{images} images, {len(BUDGET_KINDS)} attack kinds, {steps} iterate checks, {violations} violations")


@criterion(4)
def test_transform_properties(acceptance):
    rng = np.random.default_rng(4)
    sorted_ok = inverse_ok = 0
    trials = 100
    for _ in range(trials):
        shape = (3, int(rng.integers(8, 40)), int(rng.integers(8, 40)))
        x = rng.random(shape).astype(np.float32)
        n = int(rng.integers(1, 5))
        rec = tf.sample_bsr(tf.BsrConfig(n=n, tau=0.0), shape, rng)
        out = tf.apply_bsr(x, rec)
        sorted_ok += all(np.array_equal(np.sort(out[c], axis=None), np.sort(x[c], axis=None)) for c in range(3))
        inverse_ok += tf.unshuffle_bsr(out, rec).tobytes() == x.tobytes()
    worst = {}
    for mode in ("nearest", "bilinear"):
        worst[mode] = 0.0
        for _ in range(100):
            shape = (3, int(rng.integers(8, 40)), int(rng.integers(8, 40)))
            rec = tf.sample_bsr(tf.BsrConfig(n=int(rng.integers(1, 4)), tau=float(rng.uniform(0, 180)),
                                             interpolation=mode), shape, rng)
            u = rng.normal(size=shape).astype(np.float32)
            v = rng.normal(size=shape).astype(np.float32)
            lhs = np.dot(tf.apply_bsr(u, rec).ravel().astype(np.float64), v.ravel())
            rhs = np.dot(u.ravel().astype(np.float64), tf.backprop_bsr(v, rec).ravel())
            worst[mode] = max(worst[mode], abs(lhs - rhs))
    kernel_ok = True
    for size in (1, 3, 5, 7, 9, 15):
        k = tf.make_tim_kernel(size)
        kernel_ok &= abs(k.sum() - 1) <= 1e-6 and np.array_equal(k, k[::-1, ::-1])
    ok = sorted_ok == trials and inverse_ok == trials and max(worst.values()) <= 1e-4 and kernel_ok
    acceptance(4, ok, f"sorted {sorted_ok}/{trials}, inverse {inverse_ok}/{trials}, adjoint max gap "
                      f"nearest {worst['nearest']:.1e} bilinear {worst['bilinear']:.1e}, kernels ok={kernel_ok}")


@criterion(5)
def test_white_box_strength(acceptance):
    start = time.perf_counter()
    model = X.model(X.SOURCE_ARCH, X.TRIPLES[0][0])
    data = X.eval_set()
    acc = model.score(data.images, data.labels)
    rates = {}
    for name in ("ifgsm", "mifgsm"):
        x_adv = A.run_attack(model, data.images, data.labels, A.make_config(name)).x_adv
        rates[name] = E.attack_success_rate(model, x_adv, data.labels)
    elapsed = time.perf_counter() - start
    ok = acc >= 0.85 and min(rates.values()) >= 0.95 and elapsed < 600
    acceptance(5, ok, f"held-out accuracy {acc:.3f}; white-box ASR I-FGSM {rates['ifgsm']:.3f} "
                      f"MI-FGSM {rates['mifgsm']:.3f} on {len(data.labels)} images; {elapsed:.0f}s")


@criterion(6)
def test_transfer_ordering(acceptance):
    # training done earlier in the session (criterion 5) counts towards this budget
    start = time.perf_counter() - X.timings["train"]
    mi = [X.black_box("mifgsm", t) for t in X.TRIPLES]
    bsr = [X.black_box("bsr", t) for t in X.TRIPLES]
    elapsed = time.perf_counter() - start
    gap = 100 * (np.mean(bsr) - np.mean(mi))
    per = ", ".join(f"{b:.3f}/{m:.3f}" for b, m in zip(bsr, mi))
    ok = gap >= 5 and elapsed < 3600
    acceptance(6, ok, f"{X.SOURCE_ARCH}->{X.TARGET_ARCH} BSR {np.mean(bsr):.3f} vs MI {np.mean(mi):.3f} "
                      f"(gap {gap:+.1f} pts; per triple BSR/MI {per}); {X.EVAL_COUNT} images; {elapsed:.0f}s "
                      f"incl. {X.timings['train']:.0f}s training")


@criterion(7)
def test_ablation_shape(acceptance):
    r = {name: X.mean_black_box(name) for name in ("mifgsm", "bsr", "bs", "br", "n1", "n5copies")}
    pts = {k: 100 * v for k, v in r.items()}
    checks = {
        "n=2>=n=1": pts["bsr"] >= pts["n1"],
        "N=20>=N=5-2": pts["bsr"] >= pts["n5copies"] - 2,
        "BS>=MI-2": pts["bs"] >= pts["mifgsm"] - 2,
        "BR>=MI-2": pts["br"] >= pts["mifgsm"] - 2,
        "BSR>=max(BS,BR)-2": pts["bsr"] >= max(pts["bs"], pts["br"]) - 2,
    }
    detail = ", ".join(f"{k} {v:.1f}" for k, v in pts.items()) + "; " + \
        ", ".join(f"{k}:{'ok' if v else 'no'}" for k, v in checks.items())
    acceptance(7, all(checks.values()), detail)


@criterion(8)
def test_grad_cam_validity(acceptance):
    rng = np.random.default_rng(8)
    source = X.model(X.SOURCE_ARCH, X.TRIPLES[0][0])
    target = X.model(X.TARGET_ARCH, X.TRIPLES[0][1])
    data = X.eval_set()
    bounded = deterministic = True
    for i in range(20):
        h = E.grad_cam(source, data.images[i], int(data.labels[i]))
        bounded &= bool(h.values.min() >= 0 and h.values.max() <= 1)
        deterministic &= h.values.tobytes() == E.grad_cam(source, data.images[i], int(data.labels[i])).values.tobytes()
    zero = E.cam_from_activation(np.zeros((8, 5, 5)), rng.normal(size=(8, 5, 5)))
    zero_ok = not zero.any()
    oracle_gap = 0.0
    for _ in range(100):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        act, grad = rng.random((4,) + shape), rng.normal(size=(4,) + shape)
        oracle_gap = max(oracle_gap, np.abs(E.cam_from_activation(act, grad) - grad_cam_direct(act, grad)).max())
        a, b = rng.random(shape), rng.random(shape)
        oracle_gap = max(oracle_gap, abs(E.heatmap_consistency(a, b) - pearson(a, b)))
    # informational: source-target heatmap agreement on adversarial examples
    k = 40
    x, y = data.images[:k], data.labels[:k]
    corr = {}
    for name in ("mifgsm", "bsr"):
        x_adv = A.run_attack(source, x, y, X.variant_config(name, 0)).x_adv
        corr[name] = float(np.mean([E.heatmap_consistency(E.grad_cam(source, x_adv[i], int(y[i])),
                                                          E.grad_cam(target, x_adv[i], int(y[i])))
                                    for i in range(k)]))
    ok = bounded and deterministic and zero_ok and oracle_gap <= 1e-6
    acceptance(8, ok, f"bounded={bounded} deterministic={deterministic} zero-map={zero_ok} "
                      f"oracle gap {oracle_gap:.1e}; informational mean correlation on {k} images "
                      f"BSR {corr['bsr']:.3f} vs MI {corr['mifgsm']:.3f}")


CLI_CONFIG = """
[dataset]
image_size = 16
count = 6
train_count = 80
[model.a]
architecture = cnn2
seed = 0
epochs = 2
batch_size = 8
[model.b]
architecture = cnn3
seed = 1
epochs = 2
batch_size = 8
[attack]
iters = 2
copies = 2
[eval]
attacks = mifgsm, bsr
output = out
[ablate]
n = 1, 2
copies = 1, 2
tau = 0, 24
"""

CLI_RUNS = [
    ["train"],
    ["attack", "--out", "adv"],
    ["eval", "--out", "ev"],
    ["eval", "--adv-dir", "adv", "--out", "ev_ext"],
    ["ablate", "--out", "ab"],
    ["heatmap", "--images", "adv", "--out", "hm", "--count", "3"],
]


def _tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            full = os.path.join(base, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


@criterion(9)
def test_determinism_and_persistence(acceptance, tmp_path):
    trees = []
    codes = []
    for run in ("first", "second"):
        d = tmp_path / run
        d.mkdir()
        (d / "exp.ini").write_text(CLI_CONFIG)
        for args in CLI_RUNS:
            argv = [args[0], "--config", str(d / "exp.ini")] + [
                str(d / a) if prev in ("--out", "--adv-dir", "--images") else a
                for prev, a in zip([None] + args[1:], args[1:])]
            codes.append(main(argv))
        trees.append(_tree(d))
    same = trees[0] == trees[1]
    diff = sorted(k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k))

    model = M.build("cnn4", (3, 32, 32), 5, seed=9)
    ck = tmp_path / "m.ckpt"
    M.save(model, ck)
    back = M.load(ck)
    ckpt_ok = M.dumps(back) == M.dumps(model) and all(
        back.parameters_[k].data.tobytes() == model.parameters_[k].data.tobytes() for k in model.parameters_)
    data = make_shapes(20, 4, image_size=24, seed=3)
    q = io.dequantize(io.quantize(data.images))
    ppm_ok = True
    for i, img in enumerate(q):
        io.write_ppm(tmp_path / f"i{i}.ppm", img)
        ppm_ok &= io.read_ppm(tmp_path / f"i{i}.ppm").tobytes() == img.tobytes()
    ok = same and all(c == 0 for c in codes) and ckpt_ok and ppm_ok
    acceptance(9, ok, f"{len(trees[0])} CLI output files across {len(CLI_RUNS)} commands identical on rerun={same}"
                      f"{' (differ: ' + ', '.join(diff[:5]) + ')' if diff else ''}; exit codes {sorted(set(codes))}; "
                      f"checkpoint round trip={ckpt_ok}; P6 round trip={ppm_ok}")
