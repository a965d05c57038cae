"""Smoke tests for the python bindings: spot values plus a miniature
end-to-end run through the CLI entry point."""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "python"))

decaps = pytest.importorskip("_decaps") and __import__("decaps")


def test_squash_norms():
    v = np.array([1.0, 0.0, 0.0])
    out = decaps.squash(v)
    assert math.isclose(np.linalg.norm(out), 0.5, rel_tol=1e-6)

    three = np.array([0.0, 3.0])
    assert math.isclose(np.linalg.norm(decaps.squash(three)), 0.9, rel_tol=1e-6)

    zero = np.zeros(4)
    assert np.all(decaps.squash(zero) == 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    logits = rng.uniform(-30, 30, size=(5, 9))
    sm = decaps.softmax(logits, 1)
    assert np.allclose(sm.sum(axis=1), 1.0, atol=1e-9)
    assert sm.min() > 0.0


def test_idr_route_simplex_and_ham_identity():
    rng = np.random.default_rng(3)
    votes = rng.uniform(-1, 1, size=(2, 3, 4, 4, 6))
    out = decaps.idr_route(votes, n_iter=3)
    routing = out["routing"]
    assert routing.shape == (2, 3, 4, 4)
    assert np.allclose(routing.sum(axis=(2, 3)), 1.0, atol=1e-6)

    hams = out["hams"]
    norms = np.linalg.norm(votes, axis=-1)
    assert np.allclose(hams, routing * norms, atol=1e-9)

    scores = out["scores"]
    assert np.all(scores >= 0.0) and np.all(scores < 1.0)


def test_margin_loss_spot_value():
    loss = decaps.margin_loss(np.array([0.5, 0.5]), [1, 0])
    assert math.isclose(loss, 0.24, abs_tol=1e-12)


def test_normalize_and_crop_bbox():
    ham = np.zeros((6, 6))
    ham[2:5, 1:4] = 2.0
    norm = decaps.normalize_ham(ham)
    assert norm.max() == 1.0 and norm.min() == 0.0
    assert decaps.crop_bbox(norm, 0.5) == (2, 1, 4, 3)


def test_metric_spot_values():
    assert math.isclose(decaps.iou([0, 0, 1, 1], [1, 1, 2, 2]), 1.0 / 7.0)
    assert decaps.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    with pytest.raises(decaps.ContractError):
        decaps.roc_auc([0.1, 0.2], [1, 1])


def test_cli_end_to_end(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    ev = tmp_path / "eval"
    assert decaps.run_cli([
        "gen", "--n", "10", "--seed", "1", "--image-size", "32",
        "--min-size", "4", "--max-size", "7", "--out", str(data),
    ]) == 0
    assert (data / "manifest.jsonl").exists()

    assert decaps.run_cli([
        "train", "--data.manifest", str(data / "manifest.jsonl"),
        "--model.input", "32", "--model.heads", "2", "--model.d-l", "16",
        "--model.d-out", "4", "--optim.epochs", "1", "--optim.batch", "4",
        "--seed", "3", "--out", str(run),
    ]) == 0
    ckpt = run / "checkpoint_epoch_001.dkpt"
    assert ckpt.exists()
    assert ckpt.read_bytes()[:7] == b"DECAPS1"

    assert decaps.run_cli([
        "eval", "--checkpoint", str(ckpt), "--manifest",
        str(data / "manifest.jsonl"), "--out", str(ev),
    ]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert 0.0 <= report["auc"]["mean"] <= 1.0
    assert report["num_samples"] == 10
    assert "level2" in report["miou"]

    # unknown config keys are rejected with the config exit code
    assert decaps.run_cli(["train", "--bogus", "1"]) == 2
