"""Optimizer behavior, loop determinism, resume, divergence diagnostics."""

import math
from pathlib import Path

import numpy as np
import pytest

import fusedet.tensor as T
from fusedet.checkpoint import load_checkpoint
from fusedet.config import resolve_config
from fusedet.data import GroundTruthBox, SynthSpec, generate_synthetic_dataset
from fusedet.detector import TrainConfig, build_model, compute_loss
from fusedet.errors import ConfigError, DataError, NumericError
from fusedet.tensor import Parameter, Tensor
from fusedet.train import (
    SGD,
    EpochStats,
    evaluate_model,
    first_nonfinite_node,
    fit,
    load_split,
    train_batch,
)


# ---------------------------------------------------------------------------
# oracle: scalar momentum/decay recurrence

def oracle_sgd_updates(x0, grads, lr, mu, wd, decayed):
    """Sequence of parameter values for a fixed gradient sequence."""
    x, v = x0, 0.0
    out = []
    for g in grads:
        v = mu * v + g
        x = x - lr * v
        if decayed:
            x = x - lr * wd * x
        out.append(x)
    return out


def test_sgd_matches_scalar_recurrence():
    lr, mu, wd = 0.1, 0.9, 0.01
    w = Parameter("w", np.array([[2.0]]))  # rank 2: decay applies
    b = Parameter("b", np.array([2.0]))  # rank 1: no decay
    opt = SGD([w, b], lr, mu, wd)
    grads = [0.5, -0.3, 0.8, 0.1]
    want_w = oracle_sgd_updates(2.0, grads, lr, mu, wd, decayed=True)
    want_b = oracle_sgd_updates(2.0, grads, lr, mu, wd, decayed=False)
    for g, ww, wb in zip(grads, want_w, want_b):
        w.grad = np.array([[g]])
        b.grad = np.array([g])
        opt.step()
        assert w.data[0, 0] == pytest.approx(ww, abs=1e-15)
        assert b.data[0] == pytest.approx(wb, abs=1e-15)


def test_zero_learning_rate_freezes_parameters():
    cfg = resolve_config(None, overrides=[("model.input_size", "32"), ("model.widths", "4,8,8,16")])
    model = build_model(cfg.model, 0)
    before = {p.name: p.data.copy() for p in model.parameters()}
    opt = SGD(model.parameters(), 0.0, 0.9, 5e-4)
    rng = np.random.default_rng(2)
    images = rng.random((2, 1, 32, 32))
    targets = [[GroundTruthBox(0, 0.5, 0.5, 0.3, 0.3)], []]
    for _ in range(3):
        train_batch(model, opt, images, targets, cfg)
    for p in model.parameters():
        assert np.array_equal(p.data, before[p.name]), p.name


def test_sgd_skips_parameters_without_gradient():
    w = Parameter("w", np.ones((2, 2)))
    opt = SGD([w], 0.1, 0.9, 0.0)
    opt.step()
    assert np.array_equal(w.data, np.ones((2, 2)))


def test_load_velocity_validates_names_and_shapes():
    w = Parameter("w", np.ones((2, 2)))
    opt = SGD([w], 0.1, 0.9, 0.0)
    with pytest.raises(ConfigError):
        opt.load_velocity({"other": np.zeros((2, 2))})
    with pytest.raises(ConfigError):
        opt.load_velocity({"w": np.zeros(3)})
    opt.load_velocity({"w": np.full((2, 2), 2.5)})
    assert np.all(opt.velocity["w"] == 2.5)


# ---------------------------------------------------------------------------
# small end-to-end fixtures

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_synthetic_dataset(SynthSpec(image_size=64, image_count=30, seed=11), root)
    return root


def tiny_cfg(dataset, out_dir, **over):
    overrides = [
        ("run.data_dir", str(dataset)),
        ("run.out_dir", str(out_dir)),
        ("data.image_count", "30"),
        ("data.seed", "11"),
        ("train.epochs", "2"),
        ("train.batch_size", "8"),
    ] + [(k, v) for k, v in over.items()]
    return resolve_config(None, overrides)


def test_fit_writes_log_and_checkpoint(dataset, tmp_path):
    cfg = tiny_cfg(dataset, tmp_path / "run")
    rows = fit(cfg)
    assert [r.epoch for r in rows] == [1, 2]
    log = (tmp_path / "run" / "training_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss_total,loss_box,loss_obj,loss_cls,val_map50,val_map50_95"
    assert len(log) == 3
    ckpt = load_checkpoint(tmp_path / "run" / "model.fda")
    assert ckpt.epoch == 2
    assert set(ckpt.momentum) == set(ckpt.params)
    for r in rows:
        assert math.isfinite(r.loss_total) and r.loss_total >= 0.0


def test_identical_runs_are_bit_identical(dataset, tmp_path):
    cfg_a = tiny_cfg(dataset, tmp_path / "a")
    cfg_b = tiny_cfg(dataset, tmp_path / "b")
    fit(cfg_a)
    fit(cfg_b)
    assert (tmp_path / "a" / "training_log.csv").read_text() == (
        tmp_path / "b" / "training_log.csv"
    ).read_text()
    assert (tmp_path / "a" / "model.fda").read_bytes() == (
        tmp_path / "b" / "model.fda"
    ).read_bytes()


def test_resume_after_interruption_matches_uninterrupted(dataset, tmp_path):
    straight = tiny_cfg(dataset, tmp_path / "full")
    fit(straight)

    class Interrupt(Exception):
        pass

    def stop_after_first(stats):
        if stats.epoch == 1:
            raise Interrupt

    broken = tiny_cfg(dataset, tmp_path / "resumed")
    with pytest.raises(Interrupt):
        fit(broken, progress=stop_after_first)
    assert load_checkpoint(tmp_path / "resumed" / "model.fda").epoch == 1

    resumed = tiny_cfg(dataset, tmp_path / "resumed", **{"run.resume": "true"})
    rows = fit(resumed)
    assert [r.epoch for r in rows] == [1, 2]
    assert (tmp_path / "resumed" / "model.fda").read_bytes() == (
        tmp_path / "full" / "model.fda"
    ).read_bytes()
    assert (tmp_path / "resumed" / "training_log.csv").read_text() == (
        tmp_path / "full" / "training_log.csv"
    ).read_text()


def test_resume_refuses_config_drift(dataset, tmp_path):
    fit(tiny_cfg(dataset, tmp_path / "r", **{"train.epochs": "1"}))
    drifted = tiny_cfg(
        dataset, tmp_path / "r", **{"run.resume": "true", "train.learning_rate": "0.5"}
    )
    with pytest.raises(ConfigError, match="different config"):
        fit(drifted)


def test_resume_may_extend_epochs(dataset, tmp_path):
    fit(tiny_cfg(dataset, tmp_path / "r", **{"train.epochs": "1"}))
    rows = fit(tiny_cfg(dataset, tmp_path / "r", **{"run.resume": "true"}))
    assert [r.epoch for r in rows] == [1, 2]


def test_seed_changes_the_trajectory(dataset, tmp_path):
    fit(tiny_cfg(dataset, tmp_path / "a"))
    fit(tiny_cfg(dataset, tmp_path / "b", **{"train.seed": "43"}))
    assert (tmp_path / "a" / "model.fda").read_bytes() != (
        tmp_path / "b" / "model.fda"
    ).read_bytes()


def test_divergence_names_a_node(dataset, tmp_path):
    cfg = tiny_cfg(dataset, tmp_path / "run", **{"train.learning_rate": "1e9"})
    with pytest.raises(NumericError, match="node"):
        fit(cfg)


def test_first_nonfinite_node_reports_parameters_and_nodes():
    cfg = resolve_config(None, overrides=[("model.input_size", "32"), ("model.widths", "4,8,8,16")])
    model = build_model(cfg.model, 0)
    images = np.random.default_rng(0).random((1, 1, 32, 32))
    assert first_nonfinite_node(model, images) is None
    model.params["s3.weight"].data[0, 0, 0, 0] = np.nan
    assert first_nonfinite_node(model, images) == "parameter s3.weight"
    model.params["s3.weight"].data[0, 0, 0, 0] = 0.0
    model.params["lat4.bias"].data[:] = np.inf
    assert first_nonfinite_node(model, images) == "parameter lat4.bias"


def test_empty_train_split_rejected(tmp_path):
    root = tmp_path / "ds"
    generate_synthetic_dataset(SynthSpec(image_size=64, image_count=8, seed=0), root)
    # rewrite every record into the test split
    lines = (root / "splits.txt").read_text().splitlines()
    (root / "splits.txt").write_text(
        "".join(f"{ln.split()[0]}\ttest\n" for ln in lines if ln.strip())
    )
    cfg = resolve_config(
        None,
        overrides=[
            ("run.data_dir", str(root)),
            ("run.out_dir", str(tmp_path / "run")),
        ],
    )
    with pytest.raises(DataError, match="no training images"):
        fit(cfg)


def test_single_sample_overfits_fast(dataset, tmp_path):
    """Driving one sample for 200 steps collapses the loss."""
    cfg = tiny_cfg(dataset, tmp_path / "run")
    index_root = Path(dataset)
    from fusedet.data import load_index

    data = load_split(load_index(index_root), "train", 64)
    pick = next(i for i, t in enumerate(data.targets) if t)
    images = data.images[pick : pick + 1]
    targets = [data.targets[pick]]

    model = build_model(cfg.model, 42)
    # no momentum: with a single sample the gradient direction repeats every
    # step, so velocity accumulation only overshoots the box fit
    opt = SGD(model.parameters(), 0.05, 0.0, 0.0)
    first = train_batch(model, opt, images, targets, cfg)["total"]
    last = first
    for _ in range(199):
        last = train_batch(model, opt, images, targets, cfg)["total"]
    assert last < 0.1 * first


def test_evaluate_model_is_pure(dataset, tmp_path):
    cfg = tiny_cfg(dataset, tmp_path / "run")
    from fusedet.data import load_index

    val = load_split(load_index(Path(dataset)), "val", 64)
    model = build_model(cfg.model, 42)
    r1 = evaluate_model(model, val, 3, 0.45)
    r2 = evaluate_model(model, val, 3, 0.45)
    assert r1.map50 == r2.map50
    assert np.array_equal(r1.ap, r2.ap, equal_nan=True)


def test_epoch_stats_row_round_trip():
    stats = EpochStats(3, 0.1 + 0.2, 0.3, 1e-17, 0.5, 0.25, 0.125)
    row = stats.row()
    assert float(row[1]) == 0.1 + 0.2
    assert float(row[3]) == 1e-17
