import json
import math
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from scoredist import cli
from scoredist.data import load_image

import oracles

SMALL = ["--channels", "4,8,8,8", "--hidden", "16", "--batch-size", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus plus teacher targets, distilled and aesthetic checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "corp", "--n", 40, "--val", 8, "--test", 8, "--seed", 4) == 0
    assert run("teacher", "--data", root / "corp", "--out", root / "teach", "--iters", 50) == 0
    assert run("train", "--stage", "distill", "--data", root / "corp", "--out", root / "d", "--targets", root / "teach/targets.csv", "--iters", 6, *SMALL) == 0
    assert run("train", "--stage", "aesthetic", "--data", root / "corp", "--out", root / "a", "--init-from", root / "d/checkpoint.ckpt", "--iters", 8, *SMALL) == 0
    return root


def test_missing_out_is_usage_error(capsys):
    assert run("synth") == 1
    assert "--out" in capsys.readouterr().err
    assert run("no-such-command") == 1


def test_synth_deterministic(tmp_path):
    for name in ("x", "y"):
        assert run("synth", "--out", tmp_path / name, "--n", 20, "--val", 4, "--test", 4, "--seed", 7) == 0
    for rel in ["annotations.csv", "manifest.json", *(f"images/{p.name}" for p in (tmp_path / "x/images").iterdir())]:
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()


def test_manifests_validate(workspace):
    corpus_manifest = json.loads((workspace / "corp/manifest.json").read_text())
    jsonschema.validate(corpus_manifest, cli.CORPUS_MANIFEST_SCHEMA)
    for sub in ("corp", "teach", "d", "a"):
        m = json.loads((workspace / sub / cli.RUN_MANIFEST).read_text())
        jsonschema.validate(m, cli.RUN_MANIFEST_SCHEMA)
        assert Path(m["config"]["out"]).is_absolute()
        assert all(Path(p).exists() for p in m["outputs"].values())


def test_stage_order_refused(workspace, capsys):
    corp = workspace / "corp"
    assert run("train", "--stage", "aesthetic", "--data", corp, "--out", workspace / "bad", *SMALL) == 1
    assert "distill" in capsys.readouterr().err
    # an aesthetic checkpoint is not a valid starting point for another dist-head run
    assert run("train", "--stage", "aesthetic", "--data", corp, "--out", workspace / "bad", "--init-from", workspace / "a/checkpoint.ckpt", *SMALL) == 1
    assert run("train", "--stage", "distill", "--data", corp, "--out", workspace / "bad", *SMALL) == 1


def test_from_scratch_and_ablation_flags(workspace):
    corp = workspace / "corp"
    assert run("train", "--stage", "aesthetic", "--data", corp, "--out", workspace / "eu", "--from-scratch", "--loss", "euclidean", "--iters", 3, *SMALL) == 0
    m = json.loads((workspace / "eu" / cli.RUN_MANIFEST).read_text())
    assert m["config"]["loss"] == "euclidean"
    assert run("train", "--stage", "aesthetic", "--data", corp, "--out", workspace / "mean", "--init-from", workspace / "d/checkpoint.ckpt", "--variant", "mean", "--iters", 3, *SMALL) == 0
    rep = json.loads((workspace / "mean/val_report.json").read_text())
    assert rep["cd_loss"] is None and rep["mse"] is not None


def test_dual_learns_fusion_weight(workspace, capsys):
    assert run("train", "--stage", "aesthetic", "--data", workspace / "corp", "--out", workspace / "dual", "--init-from", workspace / "a/checkpoint.ckpt", "--variant", "dual", "--iters", 3, *SMALL) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["fusion_weight"] <= 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(workspace):
    code = run("train", "--stage", "aesthetic", "--data", workspace / "corp", "--out", workspace / "boom", "--from-scratch", "--loss", "euclidean", "--lr", 1e12, "--iters", 50, *SMALL)
    assert code == 3


def test_eval_deterministic_and_threshold(workspace):
    for name in ("e1", "e2"):
        assert run("eval", "--checkpoint", workspace / "a/checkpoint.ckpt", "--data", workspace / "corp", "--out", workspace / name) == 0
    assert (workspace / "e1/report.json").read_bytes() == (workspace / "e2/report.json").read_bytes()
    assert (workspace / "e1/predictions.csv").read_bytes() == (workspace / "e2/predictions.csv").read_bytes()
    m = json.loads((workspace / "e1" / cli.RUN_MANIFEST).read_text())
    assert m["config"]["threshold"] == 5
    assert run("eval", "--checkpoint", workspace / "nope.ckpt", "--data", workspace / "corp", "--out", workspace / "e3") == 2


def _write(path, rows):
    path.write_text("".join(",".join(map(str, r)) + "\n" for r in rows))


def test_metrics_hand_case(tmp_path, capsys):
    e = np.eye(10, dtype=int)
    _write(tmp_path / "gt.csv", [["a", *(10 * e[3])], ["b", *(10 * e[6])], ["c", *([10] * 10)]])
    preds = {"a": 2.0 * e[4], "b": 1.0 * e[6], "c": e[0] + e[9]}
    _write(tmp_path / "pred.csv", [[k, *v] for k, v in preds.items()])
    assert run("metrics", "--pred", tmp_path / "pred.csv", "--gt", tmp_path / "gt.csv") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mse"] == pytest.approx(1 / 3, abs=1e-12)
    assert rep["accuracy"] == 1.0
    assert rep["cd_loss"] == pytest.approx(1.6 / 3, abs=1e-12)
    assert rep["spearman_rho"] == pytest.approx(1.0, abs=1e-12)
    gts = {"a": e[3] / 1.0, "b": e[6] / 1.0, "c": np.full(10, 0.1)}
    kl = np.mean([oracles.kl_straight(preds[k] / preds[k].sum(), gts[k], 1e-6) for k in "abc"])
    assert rep["kl_div"] == pytest.approx(kl, rel=1e-12)
    assert rep["n_images"] == 3


def test_metrics_shuffled_and_identity(tmp_path, capsys, workspace):
    gt = (workspace / "corp/annotations.csv").read_text().splitlines()
    _write(tmp_path / "gt.csv", [line.split(",") for line in gt])
    rows = [line.split(",") for line in gt]
    assert run("metrics", "--pred", tmp_path / "gt.csv", "--gt", tmp_path / "gt.csv") == 0
    perfect = json.loads(capsys.readouterr().out)
    assert perfect["cd_loss"] == pytest.approx(0, abs=1e-20) and perfect["accuracy"] == 1.0
    assert perfect["spearman_rho"] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    fuzz = [[r[0], *(float(c) + rng.random() for c in r[1:])] for r in rows]
    _write(tmp_path / "p1.csv", fuzz)
    _write(tmp_path / "p2.csv", [fuzz[k] for k in rng.permutation(len(fuzz))])
    assert run("metrics", "--pred", tmp_path / "p1.csv", "--gt", tmp_path / "gt.csv") == 0
    a = capsys.readouterr().out
    assert run("metrics", "--pred", tmp_path / "p2.csv", "--gt", tmp_path / "gt.csv") == 0
    assert capsys.readouterr().out == a


def test_metrics_id_mismatch(tmp_path, capsys):
    _write(tmp_path / "gt.csv", [["a", *([1] * 10)], ["b", *([1] * 10)]])
    _write(tmp_path / "p.csv", [["a", *([1] * 10)], ["zz", *([1] * 10)]])
    assert run("metrics", "--pred", tmp_path / "p.csv", "--gt", tmp_path / "gt.csv") == 2
    err = capsys.readouterr().err
    assert "'b'" in err and "'zz'" in err


def test_adversarial_outputs(workspace, capsys):
    img = sorted((workspace / "corp/images").iterdir())[0]
    out = workspace / "adv"
    assert run("adversarial", "--checkpoint", workspace / "a/checkpoint.ckpt", "--image", img, "--out", out, "--steps", 5) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 5
    for f in ("perturbed.png", "heatmap.png", "heatmap.csv", "trace.csv", cli.RUN_MANIFEST):
        assert (out / f).exists()
    H, W = load_image(img).shape[1:]
    assert np.loadtxt(out / "heatmap.csv", delimiter=",").shape == (H, W)
    assert load_image(out / "heatmap.png").shape[1:] == (H, W)
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss,mean" and len(trace) == 7
    assert all(math.isfinite(float(x)) for line in trace[1:] for x in line.split(","))


def test_adversarial_zero_steps_rejected(workspace):
    img = sorted((workspace / "corp/images").iterdir())[0]
    assert run("adversarial", "--checkpoint", workspace / "a/checkpoint.ckpt", "--image", img, "--out", workspace / "adv0", "--steps", 0) == 1


def test_min_size(capsys, workspace):
    assert run("min-size") == 0
    assert capsys.readouterr().out.strip() == "33"
    assert run("min-size", "--checkpoint", workspace / "a/checkpoint.ckpt") == 0
    assert capsys.readouterr().out.strip() == "33"


def test_config_file_defaults_and_override(tmp_path):
    cfgf = tmp_path / "c.json"
    cfgf.write_text(json.dumps({"n": 9, "seed": 5, "val": 2, "test": 2}))
    assert run("--config", cfgf, "synth", "--out", tmp_path / "c", "--seed", 6) == 0
    m = json.loads((tmp_path / "c" / cli.RUN_MANIFEST).read_text())
    assert m["config"]["n"] == 9 and m["config"]["seed"] == 6
    assert run("--config", tmp_path / "missing.json", "synth", "--out", tmp_path / "c") == 1


def test_replay_reproduces_training(workspace, tmp_path):
    src = workspace / "a"
    assert run("replay", src / cli.RUN_MANIFEST, "--out", tmp_path / "again") == 0
    for f in ("loss.csv", "val_report.json", "checkpoint.ckpt"):
        assert (tmp_path / "again" / f).read_bytes() == (src / f).read_bytes()
