import csv
import filecmp
import hashlib
import json
import subprocess
import sys
import time

import pytest

from tdt.cli import GRID, main, run_gradcheck
from tdt.data import TaskSpec

SIZES = "train=96,dev=24,test_iid=24,test_antispurious=24"
SMALL_SPEC = TaskSpec.default(vocab_size=100, min_len=4, max_len=8).to_dict()
MODEL = {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 8, "max_len": 12}
TRAIN = {"total_steps": 12, "warmup_steps": 2, "batch_size": 8, "eval_interval": 6, "lr": 3e-3}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL_SPEC))
    (root / "train.json").write_text(json.dumps({"model": MODEL, "train": TRAIN}))
    assert main(["generate", "--spec", str(root / "spec.json"), "--sizes", SIZES, "--seed", "3",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "train.json"), "--data", str(root / "data"),
                 "--alpha", "2", "--beta", "1", "--margin", "2", "--out", str(root / "tdt")]) == 0
    return root


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- generate


def test_generate_outputs_and_checksums(workdir):
    data = workdir / "data"
    names = sorted(p.name for p in data.iterdir())
    assert names == ["config.json", "dev.jsonl", "manifest.json", "test_antispurious.jsonl", "test_iid.jsonl",
                     "train.jsonl"]
    man = json.loads((data / "manifest.json").read_text())
    assert man["seed"] == 3 and man["sizes"]["train"] == 96
    for fname, digest in man["checksums"].items():
        assert _sha(data / fname) == digest
    assert len((data / "dev.jsonl").read_text().splitlines()) == 24


def test_generate_missing_spec_leaves_nothing(tmp_path):
    out = tmp_path / "never"
    assert main(["generate", "--spec", str(tmp_path / "nope.json"), "--out", str(out)]) == 1
    assert not out.exists()


def test_generate_invalid_spec_exits_1(tmp_path):
    bad = dict(SMALL_SPEC, rho=2.0)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["generate", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


# ------------------------------------------------------------------- train


def test_train_outputs(workdir):
    out = workdir / "tdt"
    assert {p.name for p in out.iterdir()} == {"checkpoint.json", "run_record.json", "metrics.csv", "config.json"}
    rec = json.loads((out / "run_record.json").read_text())
    assert rec["label"] == "tdt" and "wall_clock_s" not in rec
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == TRAIN["total_steps"]
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["tdt"]["alpha"] == 2 and cfg["output_dir"] is None and cfg["model"]["vocab_size"] == 100


def test_train_zero_weights_labelled_vanilla(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "train.json"), "--data", str(workdir / "data"),
                 "--alpha", "0", "--beta", "0", "--out", str(tmp_path / "v")]) == 0
    assert json.loads((tmp_path / "v" / "run_record.json").read_text())["label"] == "vanilla"


@pytest.mark.parametrize("flags", [["--margin", "-1"], ["--alpha", "-0.5"], ["--tau", "0"], ["--lr", "-1"]])
def test_train_rejects_bad_hyperparameters(workdir, tmp_path, flags):
    out = tmp_path / "bad"
    assert main(["train", "--config", str(workdir / "train.json"), "--data", str(workdir / "data"), *flags,
                 "--out", str(out)]) == 1
    assert not out.exists()


def test_train_missing_data_exits_2(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "train.json"), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_1(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"trian": {}}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", "x"]) == 1


def test_bad_subcommand_exits_1():
    assert main(["frobnicate"]) == 1


# --------------------------------------------------------------- eval / analyze


def test_eval(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(workdir / "tdt" / "checkpoint.json"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "eval.json").read_text())
    assert set(res) == {"train", "dev", "test_iid", "test_antispurious"}
    assert all(0 <= v <= 1 for v in res.values())


def test_missing_checkpoint_exits_2(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.json"), "--data", str(workdir / "data")]) == 2


def _analyze(workdir, out, *extra):
    return main(["analyze", "--checkpoint", str(workdir / "tdt" / "checkpoint.json"), "--data",
                 str(workdir / "data"), "--out", str(out), *extra])


def test_analyze_cardinalities(workdir, tmp_path):
    assert _analyze(workdir, tmp_path, "--drop-curve", "--perturb", "--histogram", "--export-reprs",
                    "--domain-eval", "--rates", "0..0.6", "--perturb-rates", "0.1..0.5") == 0
    drop = list(csv.DictReader(open(tmp_path / "drop_curve.csv")))
    for order in ("descending", "ascending"):
        assert len([r for r in drop if r["order"] == order]) == 7
    pert = list(csv.DictReader(open(tmp_path / "perturb.csv")))
    assert len(pert) == 50
    for rate in ("0.1", "0.2", "0.3", "0.4", "0.5"):
        assert len([r for r in pert if r["rate"] == rate]) == 10
    hist = list(csv.DictReader(open(tmp_path / "histogram.csv")))
    assert len(hist) == 10
    reps = list(csv.DictReader(open(tmp_path / "representations.csv")))
    assert len(reps) == 3 * 24
    dom = json.loads((tmp_path / "domain_eval.json").read_text())
    assert dom["split"] == "test_antispurious" and 0 <= dom["accuracy"] <= 1


def test_analyze_rate_list_and_repeatable_flag(workdir, tmp_path):
    assert _analyze(workdir, tmp_path, "--analysis", "perturb", "--rates", "0.2,0.4", "--n", "3") == 0
    pert = list(csv.DictReader(open(tmp_path / "perturb.csv")))
    assert [(r["rate"], r["seed"]) for r in pert] == [(r, s) for r in ("0.2", "0.4") for s in ("0", "1", "2")]
    assert not (tmp_path / "drop_curve.csv").exists()


def test_analyze_unknown_name_exits_1(workdir, tmp_path, capsys):
    assert _analyze(workdir, tmp_path / "o", "--analysis", "saliency") == 1
    assert "drop-curve" in capsys.readouterr().err


def test_analyze_nothing_selected_exits_1(workdir, tmp_path):
    assert _analyze(workdir, tmp_path / "o") == 1


# ------------------------------------------------------------------- replay


def test_replay_from_config_snapshot_is_byte_identical(workdir, tmp_path):
    # generate
    assert main(["generate", "--config", str(workdir / "data" / "config.json"), "--out", str(tmp_path / "d")]) == 0
    cmp = filecmp.dircmp(workdir / "data", tmp_path / "d")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    # train
    assert main(["train", "--config", str(workdir / "tdt" / "config.json"), "--out", str(tmp_path / "t")]) == 0
    for name in ("checkpoint.json", "run_record.json", "metrics.csv", "config.json"):
        assert (workdir / "tdt" / name).read_bytes() == (tmp_path / "t" / name).read_bytes()
    # analyze
    assert _analyze(workdir, tmp_path / "a1", "--drop-curve", "--perturb", "--rates", "0.1,0.3") == 0
    assert main(["analyze", "--config", str(tmp_path / "a1" / "config.json"), "--out", str(tmp_path / "a2")]) == 0
    for name in ("drop_curve.csv", "perturb.csv", "config.json"):
        assert (tmp_path / "a1" / name).read_bytes() == (tmp_path / "a2" / name).read_bytes()


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_command_passes_quickly(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    combos = {(r["m"], r["alpha"], r["beta"]) for r in rows}
    assert combos == set(GRID) and len(GRID) == 12
    assert {r["loss"] for r in rows} == {"l_cla", "l_c", "l_r", "total"}
    assert max(r["max_rel_error"] for r in rows) < 1e-4


def test_gradcheck_hard_variant_notes_straight_through(capsys):
    assert main(["gradcheck", "--variant", "hard"]) == 0
    assert "straight-through" in capsys.readouterr().out


def test_gradcheck_coarse_step_reports_failure(capsys):
    # h=1e-3 leaves O(h^2) truncation well above a 1e-9 tolerance
    assert main(["gradcheck", "--h", "1e-3", "--tol", "1e-9"]) == 2
    assert "FAILED" in capsys.readouterr().err


def test_run_gradcheck_single_combo_rows():
    rows = run_gradcheck(grid=[(2.0, 2.0, 1.0)])
    assert {r["loss"] for r in rows} == {"l_cla", "l_c", "l_r", "total"}
    groups = {r["group"] for r in rows if r["loss"] == "total"}
    assert {"embedding", "confidence"} <= groups


# --------------------------------------------------------------- entry point


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "tdt.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "eval", "analyze", "gradcheck"):
        assert cmd in res.stdout
