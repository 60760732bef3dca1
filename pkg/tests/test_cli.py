import csv
import subprocess
import sys

import numpy as np
import pytest

from fgseg import data, netpbm
from fgseg.cli import THREAD_ENV_VARS, main, merge_config, pin_threads, validate


def run(*argv):
    return main([str(a) for a in argv])


# ------------------------------------------------------------- thread pinning

def test_thread_cap_fills_unset_blas_vars():
    env = {"FGSEG_THREADS": "2", "MKL_NUM_THREADS": "8"}
    assert pin_threads(env) == 2
    for var in THREAD_ENV_VARS:
        assert env[var] == ("8" if var == "MKL_NUM_THREADS" else "2")


def test_thread_cap_absent_is_a_no_op():
    env = {}
    assert pin_threads(env) is None
    assert env == {}


@pytest.mark.parametrize("bad", ["abc", "0", "-3", "1.5"])
def test_thread_cap_rejects_garbage(bad):
    with pytest.raises(ValueError, match="FGSEG_THREADS"):
        pin_threads({"FGSEG_THREADS": bad})


# ----------------------------------------------------------------- info/synth

def test_info_reports_exact_parameter_counts(capsys):
    assert run("info") == 0
    out = capsys.readouterr().out
    assert "total=8,222,401" in out
    assert "trainable=6,486,913" in out
    assert "frozen=1,735,488" in out
    lines = out.strip().splitlines()
    # counts line + table header + 21 parameterized layers
    assert len(lines) == 23


def test_synth_dataset_round_trips(tmp_path, capsys):
    out = tmp_path / "scene"
    assert run("synth", "--out", out, "--frames", 8, "--width", 16,
               "--height", 16) == 0
    handle = data.load_sequence(out)
    assert len(handle) == 8
    assert data.temporal_range(handle) == (0, 8)
    assert "wrote 8 frames" in capsys.readouterr().out


def test_synth_requires_out(tmp_path, capsys):
    assert run("synth", "--frames", 4) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1
    assert "--out" in err


# --------------------------------------------------------------------- train

TINY = ("--synthetic", "--width", "16", "--height", "16", "--frames", "6")


def test_train_banner_and_outputs(tmp_path, capsys):
    weights = tmp_path / "model.fgsn"
    assert run("train", *TINY, "--epochs", 2, "--weights-out", weights) == 0
    out = capsys.readouterr().out
    for token in ("lr=1e-4", "rho=0.9", "eps=1e-8", "val-split=0.2",
                  "threshold=0.8", "batch=1"):
        assert token in out, token
    assert weights.exists()
    history = tmp_path / "model.history.csv"
    assert history.exists()
    with open(history) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr", "checkpoint"]
    assert len(rows) == 3
    assert sum(int(r[4]) for r in rows[1:]) == 1
    assert "checkpoint: epoch" in out


def test_small_frame_budget_defaults_to_sixty_epochs(tmp_path, capsys):
    # 5 manifest frames keep the run small while leaving epochs at the default
    manifest = tmp_path / "frames.txt"
    manifest.write_text("0\n1\n2\n3\n4\n")
    weights = tmp_path / "m.fgsn"
    assert run("train", *TINY, "--width", "12", "--height", "12",
               "--manifest", manifest, "--weights-out", weights) == 0
    out = capsys.readouterr().out
    assert "epochs=60" in out
    assert out.count("epoch ") == 60 + 1  # 60 progress lines + checkpoint line


def test_train_is_deterministic_end_to_end(tmp_path, capsys):
    blobs = []
    for name in ("a", "b"):
        weights = tmp_path / f"{name}.fgsn"
        history = tmp_path / f"{name}.csv"
        assert run("train", *TINY, "--epochs", 2, "--seed", 4,
                   "--weights-out", weights, "--out", history) == 0
        blobs.append((weights.read_bytes(), history.read_bytes()))
    assert blobs[0] == blobs[1]


def test_train_validates_before_writing(tmp_path, capsys):
    assert run("train", *TINY, "--epochs", 1) == 2
    err = capsys.readouterr().err
    assert "--weights-out" in err
    assert list(tmp_path.iterdir()) == []


def test_train_rejects_data_plus_synthetic(tmp_path, capsys):
    assert run("train", "--synthetic", "--data", tmp_path,
               "--weights-out", tmp_path / "w.fgsn") == 2
    assert "mutually exclusive" in capsys.readouterr().err


# ------------------------------------------------------------------- segment

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    weights = root / "model.fgsn"
    rc = main(["train", *TINY, "--epochs", "1", "--weights-out", str(weights)])
    assert rc == 0
    return weights


def test_segment_writes_one_mask_per_frame(tmp_path, trained, capsys):
    masks = tmp_path / "masks"
    probs = tmp_path / "probs"
    assert run("segment", *TINY, "--weights-in", trained, "--out", masks,
               "--probs", probs) == 0
    assert sorted(p.name for p in masks.iterdir()) == \
        [f"bin{i:06d}.pgm" for i in range(1, 7)]
    assert sorted(p.name for p in probs.iterdir()) == \
        [f"prob{i:06d}.pgm" for i in range(1, 7)]
    mask = data.read_mask(masks / "bin000001.pgm")
    assert mask.shape == (16, 16)
    pm = data.read_prob_map(probs / "prob000001.pgm")
    assert pm.shape == (16, 16) and pm.min() >= 0.0 and pm.max() <= 1.0


def test_segment_twice_is_byte_identical(tmp_path, trained):
    outs = []
    for name in ("m1", "m2"):
        out = tmp_path / name
        assert run("segment", *TINY, "--weights-in", trained, "--out", out) == 0
        outs.append(b"".join(p.read_bytes() for p in sorted(out.iterdir())))
    assert outs[0] == outs[1]


def test_segment_numbering_mirrors_input_files(tmp_path, trained):
    scene = tmp_path / "scene"
    assert run("synth", "--out", scene, "--frames", 3, "--width", 16,
               "--height", 16) == 0
    masks = tmp_path / "masks"
    assert run("segment", "--data", scene, "--weights-in", trained,
               "--out", masks) == 0
    assert sorted(p.name for p in masks.iterdir()) == \
        ["bin000001.pgm", "bin000002.pgm", "bin000003.pgm"]


def test_segment_missing_weights_is_one_line(tmp_path, capsys):
    assert run("segment", *TINY, "--weights-in", tmp_path / "nope.fgsn",
               "--out", tmp_path / "m") == 1
    err = capsys.readouterr().err
    assert err.startswith("fgseg segment:")
    assert err.count("\n") == 1


# ---------------------------------------------------------- evaluate / sweep

def perfect_masks(scene, masks_dir):
    handle = data.load_sequence(scene)
    masks_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(handle)):
        labels = data.read_labels(handle, i)
        netpbm.write_pgm(masks_dir / f"bin{i + 1:06d}.pgm",
                         labels.foreground.astype(np.uint8) * 255)


def test_evaluate_perfect_masks_scores_one(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert run("synth", "--out", scene, "--frames", 5, "--width", 16,
               "--height", 16) == 0
    perfect_masks(scene, tmp_path / "masks")
    out_csv = tmp_path / "scores.csv"
    assert run("evaluate", "--data", scene, "--masks", tmp_path / "masks",
               "--out", out_csv) == 0
    stdout = capsys.readouterr().out
    assert "Overall" in stdout
    with open(out_csv) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Name", "Recall", "Specificity", "FPR", "FNR", "PWC",
                       "Precision", "F-Measure", "MCC"]
    overall = dict(zip(rows[0], rows[-1]))
    assert overall["Name"] == "Overall"
    assert overall["F-Measure"] == "1.000000"
    assert overall["PWC"] == "0.000000"
    assert overall["MCC"] == "1.000000"


def test_evaluate_category_tree_aggregates(tmp_path, capsys):
    root = tmp_path / "dataset"
    masks = tmp_path / "masks"
    for vid in ("vidA", "vidB"):
        scene = root / "cat" / vid
        seed = 1 if vid == "vidA" else 2
        assert run("synth", "--out", scene, "--frames", 3, "--width", 16,
                   "--height", 16, "--seed", seed) == 0
        perfect_masks(scene, masks / "cat" / vid)
    capsys.readouterr()
    assert run("evaluate", "--data", root, "--masks", masks) == 0
    out = capsys.readouterr().out
    names = [line.split()[0] for line in out.strip().splitlines()[2:]]
    assert names == ["cat/vidA", "cat/vidB", "cat", "Overall"]


def test_evaluate_reports_missing_masks(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert run("synth", "--out", scene, "--frames", 4, "--width", 16,
               "--height", 16) == 0
    perfect_masks(scene, tmp_path / "masks")
    (tmp_path / "masks" / "bin000003.pgm").unlink()
    assert run("evaluate", "--data", scene, "--masks", tmp_path / "masks") == 1
    err = capsys.readouterr().err
    assert "4 ground-truth frames but 3 masks" in err
    assert "bin000003.pgm" in err


def test_sweep_emits_nine_rows_and_best_line(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert run("synth", "--out", scene, "--frames", 4, "--width", 16,
               "--height", 16) == 0
    probs = tmp_path / "probs"
    probs.mkdir()
    handle = data.load_sequence(scene)
    for i in range(len(handle)):
        labels = data.read_labels(handle, i)
        pm = np.where(labels.foreground, 0.95, 0.05).astype(np.float32)
        data.write_prob_map(pm, probs / f"prob{i + 1:06d}.pgm")
    out_csv = tmp_path / "sweep.csv"
    assert run("sweep", "--data", scene, "--probs", probs, "--out", out_csv) == 0
    out = capsys.readouterr().out
    assert "best threshold:" in out
    with open(out_csv) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 10  # header + 9 thresholds
    assert [r[0] for r in rows[1:]] == [f"{k / 10:.1f}" for k in range(1, 10)]


def test_sweep_reports_missing_probability_maps(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert run("synth", "--out", scene, "--frames", 3, "--width", 16,
               "--height", 16) == 0
    (tmp_path / "probs").mkdir()
    assert run("sweep", "--data", scene, "--probs", tmp_path / "probs") == 1
    assert "no probability map" in capsys.readouterr().err


# -------------------------------------------------------------- config files

def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# comment\nthreshold = 0.5\nseed=3\n")
    import argparse
    ns = argparse.Namespace(command="segment", config=str(cfgfile), data=None,
                            synthetic=True, width=None, height=None, seed=None,
                            frames=None, weights_in="w", threshold=None,
                            out="o", probs=None)
    cfg = validate(merge_config(ns))
    assert cfg.threshold == 0.5
    assert cfg.seed == 3
    ns.threshold = 0.9
    cfg = validate(merge_config(ns))
    assert cfg.threshold == 0.9


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("learning_rate=0.1\n")
    assert run("info", "--config", cfgfile) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_bad_threshold_fails_before_any_work(tmp_path, capsys):
    assert run("segment", *TINY, "--weights-in", tmp_path / "w.fgsn",
               "--out", tmp_path / "m", "--threshold", "1.5") == 2
    assert "threshold" in capsys.readouterr().err
    assert not (tmp_path / "m").exists()


# -----------------------------------------------------------------scripting

def test_module_entry_point_runs_in_a_fresh_process():
    proc = subprocess.run(
        [sys.executable, "-m", "fgseg.cli", "info"],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "FGSEG_THREADS": "1"})
    assert proc.returncode == 0
    assert "total=8,222,401" in proc.stdout
