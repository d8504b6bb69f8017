"""Finite-difference audit of every differentiable building block.

Each block gets a small seeded fixture and a central-difference sweep
over its parameters. Per-block worst relative error must stay under
1e-4; the whole-model probe, which composes dozens of ops and crosses
many activation boundaries, gets 1e-3. Fixture seeds are pinned to
keep preactivations away from the ReLU kink at the probe step size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import fusion as FU
from . import tensor as T
from .data import GroundTruthBox
from .detector import (
    ModelConfig,
    RawPrediction,
    TrainConfig,
    build_model,
    compute_loss,
)
from .tensor import Parameter, Tensor

BLOCK_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3
EPSILON = 1e-6


@dataclass
class BlockReport:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _sweep(fragment, params, sample_cap=512) -> float:
    worst = T.finite_diff_gradcheck(
        fragment, params, epsilon=EPSILON, sample_cap=sample_cap, seed=0
    )
    return max(worst.values())


def _check_conv2d() -> float:
    rng = np.random.default_rng(100)
    x = Parameter("x", rng.normal(size=(2, 3, 7, 6)))
    w = Parameter("w", rng.normal(size=(4, 3, 3, 3)) * 0.5)
    b = Parameter("b", rng.normal(size=4) * 0.1)

    def fragment():
        return T.mean_all(T.sigmoid(T.conv2d(x, w, b, (2, 1), (1, 2))))

    return _sweep(fragment, [x, w, b])


def _check_fully_connected() -> float:
    rng = np.random.default_rng(101)
    x = Parameter("x", rng.normal(size=(3, 5)))
    w = Parameter("w", rng.normal(size=(4, 5)) * 0.4)
    b = Parameter("b", rng.normal(size=4) * 0.1)

    def fragment():
        return T.mean_all(T.sigmoid(T.fully_connected(x, w, b)))

    return _sweep(fragment, [x, w, b])


def _check_upsample() -> float:
    rng = np.random.default_rng(102)
    x = Parameter("x", rng.normal(size=(2, 3, 4, 5)))

    def fragment():
        return T.mean_all(T.sigmoid(T.upsample_nearest2x(x)))

    return _sweep(fragment, [x])


def _check_global_avg_pool() -> float:
    rng = np.random.default_rng(103)
    x = Parameter("x", rng.normal(size=(2, 4, 5, 3)))

    def fragment():
        return T.mean_all(T.sigmoid(T.global_avg_pool(x)))

    return _sweep(fragment, [x])


def _check_directional_conv() -> float:
    rng = np.random.default_rng(104)
    params = FU.make_asym_params("dir", 4, rng)
    x = Parameter("x", rng.normal(size=(2, 4, 6, 6)))

    def fragment():
        return T.mean_all(T.sigmoid(FU.asym_directional_conv(x, params)))

    return _sweep(fragment, [x] + params.parameters())


def _check_attention_concat() -> float:
    rng = np.random.default_rng(105)
    params = FU.make_ac_params("ac", [4, 4, 4], rng, reduction_ratio=2)
    xs = [Parameter(f"x{i}", rng.normal(size=(2, 4, 3, 3))) for i in range(3)]

    def fragment():
        fused, _ = FU.ac_forward(xs, params)
        return T.mean_all(T.sigmoid(fused))

    return _sweep(fragment, xs + params.parameters())


def _check_cross_layer_attention() -> float:
    rng = np.random.default_rng(106)
    params = FU.make_caf_params("caf", 4, 3, rng, reduction_ratio=1)
    xs = [Parameter(f"x{i}", rng.normal(size=(2, 4, 3, 3))) for i in range(3)]

    def fragment():
        fused, _ = FU.caf_forward(xs, params)
        return T.mean_all(T.sigmoid(fused))

    return _sweep(fragment, xs + params.parameters())


def _check_weighted_fusion() -> float:
    rng = np.random.default_rng(107)
    w = FU.make_bifpn_weights("w", 3)
    w.data[:] = rng.uniform(0.5, 1.5, size=3)
    xs = [Parameter(f"x{i}", rng.normal(size=(2, 4, 3, 3))) for i in range(3)]

    def fragment():
        return T.mean_all(T.sigmoid(FU.bifpn_fuse_node(xs, w)))

    return _sweep(fragment, xs + [w])


def _check_loss() -> float:
    cfg = ModelConfig(
        input_size=16,
        widths=(2, 4, 4, 8),
        class_count=2,
        anchors=(((5.0, 5.0), (9.0, 9.0)), ((12.0, 4.0), (10.0, 10.0))),
    )
    tc = TrainConfig()
    rng = np.random.default_rng(108)
    levels = [
        Parameter(
            f"raw{lv}",
            rng.normal(size=(2, cfg.head_channels(lv), cfg.grid_size(lv), cfg.grid_size(lv))),
        )
        for lv in range(2)
    ]
    targets = [
        [GroundTruthBox(0, 0.4, 0.45, 0.3, 0.3)],
        [GroundTruthBox(1, 0.6, 0.5, 0.55, 0.2)],
    ]

    def fragment():
        loss, _ = compute_loss(RawPrediction(list(levels)), targets, cfg, tc)
        return loss

    return _sweep(fragment, levels)


def _check_full_graph() -> float:
    cfg = ModelConfig(
        input_size=16,
        widths=(2, 4, 4, 8),
        class_count=2,
        anchors=(((5.0, 5.0), (9.0, 9.0)), ((12.0, 4.0), (10.0, 10.0))),
        reduction_ratio=4,
    )
    model = build_model(cfg, 0)
    # redraw every parameter so the probe is independent of init policy
    prng = np.random.default_rng(13)
    for p in model.parameters():
        p.data[...] = prng.normal(0.0, 0.35, p.data.shape)
    rng = np.random.default_rng(8)
    imgs = rng.random((2, 1, 16, 16))
    targets = [
        [GroundTruthBox(0, 0.4, 0.45, 0.3, 0.3)],
        [GroundTruthBox(1, 0.6, 0.5, 0.55, 0.2)],
    ]
    tc = TrainConfig()

    def fragment():
        raw = model.forward(Tensor(imgs))
        loss, _ = compute_loss(raw, targets, cfg, tc)
        return loss

    return _sweep(fragment, model.parameters(), sample_cap=64)


BLOCKS = (
    ("conv2d", _check_conv2d, BLOCK_TOLERANCE),
    ("fully_connected", _check_fully_connected, BLOCK_TOLERANCE),
    ("upsample_nearest2x", _check_upsample, BLOCK_TOLERANCE),
    ("global_avg_pool", _check_global_avg_pool, BLOCK_TOLERANCE),
    ("directional_conv", _check_directional_conv, BLOCK_TOLERANCE),
    ("attention_concat", _check_attention_concat, BLOCK_TOLERANCE),
    ("cross_layer_attention", _check_cross_layer_attention, BLOCK_TOLERANCE),
    ("weighted_fusion", _check_weighted_fusion, BLOCK_TOLERANCE),
    ("detection_loss", _check_loss, BLOCK_TOLERANCE),
    ("full_graph", _check_full_graph, GRAPH_TOLERANCE),
)


def run_suite(progress: Optional[Callable[[BlockReport], None]] = None) -> list:
    """All blocks in order; returns their reports."""
    reports = []
    for name, check, tolerance in BLOCKS:
        report = BlockReport(name, float(check()), tolerance)
        reports.append(report)
        if progress is not None:
            progress(report)
    return reports
