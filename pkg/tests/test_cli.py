"""CLI surface: exit codes, subcommand wiring, end-to-end smoke pipeline."""

import json
import os

import numpy as np
import pytest

from lprobe.cli import main
from lprobe.reports import read_report_table

MANIFEST = {
    "dataset": {"kind": "synthetic", "classes": 3, "train_per_class": 16,
                "test_per_class": 8, "image_size": 32,
                "seed_train": 50, "seed_test": 51},
    "model": {"arch": "mini_vgg", "classes": 3, "width_multiplier": 0.125},
    "pretrain": {"mode": "conventional", "optimizer": {"kind": "adam", "lr": 0.002},
                 "epochs": 2, "batch_size": 16, "schedule": {"kind": "constant"}},
    "retrain": {"mode": "adversarial", "optimizer": {"kind": "adam", "lr": 0.002},
                "epochs": 1, "batch_size": 16, "schedule": {"kind": "constant"},
                "clean_mix_ratio": 0.5,
                "attack": {"epsilon": 0.03, "step_size": 0.015, "iterations": 2}},
    "attack_eval": {"epsilon": 0.03, "step_size": 0.015, "iterations": 2},
    "analysis": {"segments": ["m_1", "m_2"], "positions_per_image": 2,
                 "n_images": 12, "pca_dims": 4, "perplexity": 4.0,
                 "tsne_iterations": 60, "kde_resolution": 24,
                 "embed_cap_per_group": 30},
    "output_dir": "PLACEHOLDER",
    "root_seed": 7,
}


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_manifest(tmp_path, **overrides):
    obj = json.loads(json.dumps(MANIFEST))
    obj["output_dir"] = str(tmp_path / "out")
    obj.update(overrides)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(obj))
    return str(path)


def test_unknown_subcommand_exits_1(capsys):
    assert main(["defend"]) == 1


def test_unknown_flag_exits_1():
    assert main(["pretrain", "--manifest", "x.json", "--bogus"]) == 1


def test_missing_manifest_is_config_error(workdir):
    assert main(["pretrain", "--manifest", "nope.json"]) == 1


def test_invalid_manifest_is_config_error(workdir, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"output_dir": "x"}))
    assert main(["pretrain", "--manifest", str(path)]) == 1


def test_corrupt_checkpoint_is_runtime_failure(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    assert main(["pretrain", "--manifest", manifest]) == 0
    ckpt = tmp_path / "out" / "pretrained_conventional.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    ckpt.write_bytes(bytes(raw))
    code = main(["attack-eval", "--manifest", manifest, "--checkpoint", str(ckpt)])
    assert code == 2


def test_attack_eval_epsilon_zero_matches_clean(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    assert main(["pretrain", "--manifest", manifest]) == 0
    ckpt = str(tmp_path / "out" / "pretrained_conventional.ckpt")
    assert main(["attack-eval", "--manifest", manifest, "--checkpoint", ckpt,
                 "--epsilon", "0.0"]) == 0
    rows = read_report_table(tmp_path / "out" / "attack_eval.tsv")
    assert len(rows) == 1
    assert rows[0]["robust_acc"] == rows[0]["clean_acc"]


def test_retrain_after_m_fc_matches_attack_eval(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    assert main(["pretrain", "--manifest", manifest]) == 0
    ckpt = str(tmp_path / "out" / "pretrained_conventional.ckpt")
    assert main(["attack-eval", "--manifest", manifest, "--checkpoint", ckpt]) == 0
    assert main(["retrain-cutoff", "--manifest", manifest, "--checkpoint", ckpt,
                 "--cutoff", "m_fc", "--direction", "after"]) == 0
    eval_rows = read_report_table(tmp_path / "out" / "attack_eval.tsv")
    cutoff_rows = read_report_table(tmp_path / "out" / "cutoff_after_m_fc.tsv")
    assert cutoff_rows[0]["clean_acc"] == eval_rows[0]["clean_acc"]
    assert cutoff_rows[0]["robust_acc"] == eval_rows[0]["robust_acc"]


def test_full_pipeline_smoke(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "out"
    assert main(["pretrain", "--manifest", manifest]) == 0
    ckpt = str(out / "pretrained_conventional.ckpt")

    for cutoff, direction in (("m_1", "upto"), ("m_4", "after")):
        assert main(["retrain-cutoff", "--manifest", manifest, "--checkpoint", ckpt,
                     "--cutoff", cutoff, "--direction", direction]) == 0
        rows = read_report_table(out / f"cutoff_{direction}_{cutoff}.tsv")
        assert len(rows) == 1
        assert rows[0]["plan"] == f"cutoff:{direction}:{cutoff}:adversarial"

    assert main(["harvest", "--manifest", manifest, "--checkpoint", ckpt]) == 0
    assert os.path.exists(out / "samples_m_1.npz")
    assert main(["embed", "--manifest", manifest]) == 0
    assert os.path.exists(out / "coords_m_1.tsv")
    assert os.path.exists(out / "grids_m_2.npz")
    assert os.path.exists(out / "divergence_summary.tsv")

    merged = tmp_path / "merged"
    assert main(["report", "--out", str(merged),
                 str(out / "cutoff_upto_m_1.tsv"),
                 str(out / "cutoff_after_m_4.tsv")]) == 0
    rows = read_report_table(merged / "merged_reports.tsv")
    assert len(rows) == 2


def test_reinit_sweep_writes_baseline_row(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    assert main(["pretrain", "--manifest", manifest]) == 0
    ckpt = str(tmp_path / "out" / "pretrained_conventional.ckpt")
    assert main(["reinit-sweep", "--manifest", manifest, "--checkpoint", ckpt]) == 0
    lines = (tmp_path / "out" / "reinit_sweep.tsv").read_text().splitlines()
    assert lines[0] == "layer\tclean_acc\trobust_acc"
    assert lines[1].startswith("none\t")
    assert len(lines) > 2


def test_seed_override_changes_outputs(workdir, tmp_path):
    manifest = write_manifest(tmp_path)
    assert main(["pretrain", "--manifest", manifest, "--seed", "7"]) == 0
    rows_a = read_report_table(tmp_path / "out" / "pretrain_report.tsv")
    assert main(["pretrain", "--manifest", manifest, "--seed", "8"]) == 0
    rows_b = read_report_table(tmp_path / "out" / "pretrain_report.tsv")
    assert rows_a[0]["seed"] != rows_b[0]["seed"]
