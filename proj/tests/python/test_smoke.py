"""Python surface smoke tests against the built extension."""

import json
import math
import os

import numpy as np
import pytest

import fedmer


def test_metrics_match_hand_values():
    cm = np.array([[3, 1], [2, 4]], dtype=np.uint64)
    assert fedmer.uf1(cm) == pytest.approx((2 / 3 + 8 / 11) / 2, abs=1e-12)
    assert fedmer.uar(cm) == pytest.approx((3 / 4 + 4 / 6) / 2, abs=1e-12)
    perfect = np.diag([5, 7, 2]).astype(np.uint64)
    assert fedmer.uf1(perfect) == pytest.approx(1.0)


def test_beta_schedule_endpoints():
    assert fedmer.beta_at("linear", 0.5, 0.0, 10, 0) == pytest.approx(0.5)
    assert fedmer.beta_at("linear", 0.5, 0.0, 10, 5) == pytest.approx(0.25)
    assert fedmer.beta_at("linear", 0.5, 0.0, 10, 10) == pytest.approx(0.0)
    assert fedmer.beta_at("linear", 0.5, 0.0, 10, 99) == pytest.approx(0.0)


def test_adjacency_and_cooccurrence():
    adjacency = fedmer.default_adjacency()
    assert adjacency.shape == (12, 12)
    assert np.allclose(adjacency, adjacency.T)
    assert np.all(np.diag(adjacency) == 0)
    assert np.all(adjacency.sum(axis=1) >= 1)

    labels = np.zeros((40, 12), dtype=np.uint8)
    labels[:, 0] = 1
    labels[:, 1] = 1  # AU1 and AU2 always co-occur
    d = fedmer.compute_cooccurrence(labels, adjacency)
    rows = d.sum(axis=1)
    assert np.allclose(rows[adjacency.sum(axis=1) > 0], 1.0, atol=1e-9)
    assert np.all(d[adjacency == 0] == 0)


def test_serialization_roundtrip():
    params = {
        "layer.weight": np.random.default_rng(0).normal(size=(3, 4)),
        "layer.bias": np.zeros(4),
    }
    blob = fedmer.serialize_params(params)
    back = fedmer.deserialize_params(blob)
    assert set(back) == set(params)
    for name in params:
        np.testing.assert_array_equal(back[name], params[name])


def test_aggregation_identities():
    a = {"w": np.array([0.0])}
    b = {"w": np.array([4.0])}
    mean = fedmer.aggregate_fedavg([(a, 1), (b, 3)])
    assert mean["w"][0] == pytest.approx(3.0)

    personalized = fedmer.aggregate_pfedprox([(a, 10), (b, 10)], theta=1.0)
    assert personalized[0]["w"][0] == pytest.approx(0.0)
    assert personalized[1]["w"][0] == pytest.approx(4.0)


def test_generate_dataset_shapes_and_determinism():
    d1 = fedmer.generate_dataset(subject_count=3, samples_min=2, samples_max=3, seed=5)
    d2 = fedmer.generate_dataset(subject_count=3, samples_min=2, samples_max=3, seed=5)
    n = d1["emotion"].shape[0]
    assert d1["roi_patches"].shape == (n, 65, 3, 5, 5)
    assert d1["global_of"].shape == (n, 3, 16, 16)
    assert d1["au_labels"].shape == (n, 12)
    np.testing.assert_array_equal(d1["roi_patches"], d2["roi_patches"])
    assert d1["au_labels"].max() == 1


def test_run_experiment_smoke(tmp_path):
    config = {
        "seed": 3,
        "data": {
            "class_count": 3,
            "subject_count": 4,
            "samples_per_subject": [4, 5],
            "noise_level": 0.2,
            "global_of_side": 8,
            "split_repeats": 1,
        },
        "model": {
            "lfe_channels": [6, 8],
            "gat_width": 16,
            "inception_channels": 4,
        },
        "train": {"batch_size": 4},
        "federated": {"strategies": ["fedavg"], "clients": 2, "rounds": 1},
    }
    config_path = tmp_path / "exp.json"
    config_path.write_text(json.dumps(config))
    out_dir = tmp_path / "out"
    summary = fedmer.run_experiment(str(config_path), str(out_dir))
    assert "fedavg" in summary
    assert math.isfinite(summary["fedavg"])
    assert (out_dir / "results.csv").exists()
    assert (out_dir / "summary.json").exists()
    csv = (out_dir / "results.csv").read_text()
    assert csv.splitlines()[0] == "strategy,round,client,train_loss,uf1,uar"
    assert "fedavg" in fedmer.strategies()
