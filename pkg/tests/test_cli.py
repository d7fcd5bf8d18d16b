import math
import os

import numpy as np
import pytest

from bsrkit import imageio as io
from bsrkit.cli import main
from bsrkit.datasets import make_shapes

TINY = """
[dataset]
image_size = 16
classes = 4
count = 6
train_count = 80
[model.a]
architecture = cnn2
checkpoint = ck/a.ckpt
seed = 0
epochs = 2
batch_size = 8
[model.b]
architecture = cnn3
checkpoint = ck/b.ckpt
seed = 1
epochs = 2
batch_size = 8
[attack]
iters = 2
copies = 2
[eval]
attacks = mifgsm, bsr
output = out
"""


def _tree(path):
    out = {}
    for root, _, files in os.walk(path):
        for f in files:
            full = os.path.join(root, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("exp")
    (d / "exp.ini").write_text(TINY)
    assert main(["train", "--config", str(d / "exp.ini")]) == 0
    return d


def test_train_writes_checkpoints_and_logs(workspace):
    names = sorted(os.listdir(workspace / "ck"))
    assert names == ["a.ckpt", "a.ckpt.log.csv", "b.ckpt", "b.ckpt.log.csv"]
    log = (workspace / "ck" / "a.ckpt.log.csv").read_text().splitlines()
    assert log[0].startswith("# ") and "epoch,loss,accuracy" in log
    assert any(line.startswith("# attack.copies = 2") for line in log)


def test_train_rerun_is_byte_identical(workspace, tmp_path):
    (tmp_path / "exp.ini").write_text(TINY)
    assert main(["train", "--config", str(tmp_path / "exp.ini")]) == 0
    assert _tree(tmp_path / "ck") == _tree(workspace / "ck")


def test_attack_outputs_and_budget(workspace, tmp_path):
    out = tmp_path / "adv"
    assert main(["attack", "--config", str(workspace / "exp.ini"), "--out", str(out), "--transform", "bsr"]) == 0
    files = sorted(os.listdir(out))
    assert "manifest.csv" in files and "labels.csv" in files and len(files) == 8
    rows = [l for l in (out / "manifest.csv").read_text().splitlines() if not l.startswith("#")]
    assert rows[0] == "filename,true_label,source_prediction,linf_255,linf_quantized_255"
    for r in rows[1:]:
        _, _, _, pre, post = r.split(",")
        assert float(pre) <= 16 + 1e-3 and int(post) <= math.ceil(16)
    again = tmp_path / "adv2"
    main(["attack", "--config", str(workspace / "exp.ini"), "--out", str(again), "--transform", "bsr"])
    assert _tree(out) == _tree(again)


def test_zero_budget_writes_quantized_inputs(workspace, tmp_path):
    out = tmp_path / "adv"
    assert main(["attack", "--config", str(workspace / "exp.ini"), "--out", str(out), "--epsilon", "0"]) == 0
    ds = make_shapes(6, 4, 16, seed=2)
    for i in range(6):
        assert (out / f"img{i:05d}.ppm").read_bytes() == io.encode_ppm(io.quantize(ds.images[i]))


def test_eval_matrix_and_determinism(workspace, tmp_path):
    a, b = tmp_path / "r1.csv", tmp_path / "r2.csv"
    for path in (a, b):
        assert main(["eval", "--config", str(workspace / "exp.ini"), "--out", str(path), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    rows = [l for l in text.splitlines() if not l.startswith("#")]
    assert rows[0] == "source,attack,target,white_box,successes,n,rate" and len(rows) == 1 + 2 * 2 * 2
    assert "# attack.seed = 3" in text and "# dataset.count = 6" in text


def test_eval_single_source(workspace, tmp_path):
    path = tmp_path / "r.csv"
    assert main(["eval", "--config", str(workspace / "exp.ini"), "--out", str(path), "--source", "a",
                 "--transform", "mifgsm"]) == 0
    rows = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 1 + 2 * 2


def test_eval_of_clean_directory_gives_clean_error(workspace, tmp_path):
    from bsrkit.models import load
    ds = make_shapes(6, 4, 16, seed=2)
    x = io.dequantize(io.quantize(ds.images))
    io.write_image_directory(tmp_path / "clean", x, ds.labels)
    path = tmp_path / "r.csv"
    assert main(["eval", "--config", str(workspace / "exp.ini"), "--adv-dir", str(tmp_path / "clean"),
                 "--out", str(path)]) == 0
    rows = [l.split(",") for l in path.read_text().splitlines() if not l.startswith("#")][1:]
    assert len(rows) == 2
    model = load(workspace / "ck" / "a.ckpt")
    assert int(rows[0][4]) == int(np.sum(model.predict(x) != ds.labels))


def test_ablate_outputs(workspace, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(workspace / "exp.ini"), "--out", str(out), "--parameter", "n",
                 "--values", "1,2,3,4"]) == 0
    rows = [l for l in (out / "ablation_n.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == 1 + 4 + 4


def test_ablate_variants(workspace, tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(TINY.replace("checkpoint = ck/", f"checkpoint = {workspace}/ck/") +
                   "[ablate]\nparameters = tau\ntau = 0, 24\n")
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert sorted(os.listdir(tmp_path / "o")) == ["ablation_tau.csv", "ablation_variants.csv"]


def test_ablate_empty_values_is_usage_error(workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--config", str(workspace / "exp.ini"), "--parameter", "n", "--values", ""])
    assert exc.value.code == 2


def test_heatmap_grids_and_consistency(workspace, tmp_path):
    cfg = tmp_path / "exp.ini"
    ck = workspace / "ck" / "a.ckpt"
    cfg.write_text(f"[dataset]\nimage_size = 16\n[model.a]\narchitecture = cnn2\ncheckpoint = {ck}\n"
                   f"[model.twin]\narchitecture = cnn2\ncheckpoint = {ck}\n")
    out = tmp_path / "hm"
    assert main(["heatmap", "--config", str(cfg), "--out", str(out), "--count", "3"]) == 0
    grid = [l for l in (out / "a_img00000.csv").read_text().splitlines() if not l.startswith("#")]
    # cnn2 on 16x16: last conv runs at 8x8
    assert len(grid) == 8 and all(len(r.split(",")) == 8 for r in grid)
    rows = [l.split(",") for l in (out / "consistency.csv").read_text().splitlines() if not l.startswith("#")][1:]
    assert len(rows) == 3
    for r in rows:
        assert float(r[3]) in (1.0, 0.0)


def test_heatmap_single_model_has_no_table(workspace, tmp_path):
    out = tmp_path / "hm"
    assert main(["heatmap", "--config", str(workspace / "exp.ini"), "--models", "a", "--out", str(out),
                 "--count", "2"]) == 0
    assert "consistency.csv" not in os.listdir(out)


def test_heatmap_unknown_layer(workspace, tmp_path, capsys):
    code = main(["heatmap", "--config", str(workspace / "exp.ini"), "--layer", "conv9", "--out", str(tmp_path)])
    assert code == 2 and "conv9" in capsys.readouterr().err


def test_missing_labels_names_path(tmp_path, capsys):
    (tmp_path / "imgs").mkdir()
    (tmp_path / "exp.ini").write_text("[dataset]\nsource = directory\npath = imgs\n[model.a]\n")
    assert main(["train", "--config", str(tmp_path / "exp.ini")]) == 2
    assert "labels.csv" in capsys.readouterr().err


def test_zero_count_is_configuration_error(tmp_path, capsys):
    (tmp_path / "exp.ini").write_text("[dataset]\ncount = 0\n[model.a]\n")
    assert main(["attack", "--config", str(tmp_path / "exp.ini")]) == 2


def test_missing_checkpoint(tmp_path, capsys):
    (tmp_path / "exp.ini").write_text("[model.a]\n")
    assert main(["eval", "--config", str(tmp_path / "exp.ini")]) == 2
    assert "bsrkit train" in capsys.readouterr().err


def test_overrides_reach_the_attack(workspace, tmp_path):
    out = tmp_path / "adv"
    assert main(["attack", "--config", str(workspace / "exp.ini"), "--out", str(out), "--transform", "mifgsm",
                 "--epsilon", "4", "--iters", "3", "--step", "2", "--decay", "0.5", "--blocks", "3",
                 "--angle", "10", "--copies", "4", "--seed", "9"]) == 0
    text = (out / "manifest.csv").read_text()
    for frag in ("# attack.epsilon = 4.0", "# attack.iters = 3", "# attack.decay = 0.5", "# attack.blocks = 3",
                 "# attack.angle = 10.0", "# attack.copies = 4", "# attack.seed = 9"):
        assert frag in text
    rows = [l.split(",") for l in text.splitlines() if not l.startswith("#")][1:]
    assert max(float(r[3]) for r in rows) <= 4 + 1e-3
