"""Feature-fusion blocks.

Four differentiable fusion mechanisms used by the detector neck:

- asymmetric directional convolution (1x7 and 7x1 branches, concatenated),
  plus the two-branch detail/direction split built on it
- attention-weighted concatenation: per-input squeeze to a scalar score,
  softmax across inputs, scale-then-concat
- cross-layer attention fusion: average the inputs, squeeze-excite down to
  one score per input, softmax, convex combination
- fast-normalized weighted sum (the BiFPN node)

Each block is a parameter container plus a pure forward function over
Tensors, so gradient flow comes for free from the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Parameter, Tensor

EPS_FUSE = 1e-4  # floor added to rectified fusion weights


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform init, gain for ReLU: bound = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bottleneck_width(c: int, r: int) -> int:
    """Reduced channel count for squeeze stages: floor(C/r), clamped to >= 4
    (and never above C) so tiny models keep a usable bottleneck."""
    if c < 1 or r < 1:
        raise ConfigError(f"bad bottleneck config: C={c}, r={r}")
    return min(c, max(4, c // r))


def _check_same_spatial(inputs: Sequence[Tensor]) -> None:
    b, h, w = inputs[0].shape[0], inputs[0].shape[2], inputs[0].shape[3]
    for t in inputs:
        if t.ndim != 4:
            raise ShapeError(f"fusion inputs must be rank-4, got {t.shape}")
        if t.shape[0] != b or t.shape[2] != h or t.shape[3] != w:
            raise ShapeError(
                f"fusion inputs disagree on batch/spatial dims: {t.shape} vs {inputs[0].shape}"
            )


# ---------------------------------------------------------------------------
# asymmetric directional convolution


@dataclass
class AsymConvParams:
    """Paired 1x7 / 7x1 kernels, each producing C/2 of the C output channels."""

    horizontal_weight: Parameter  # (C/2, C, 1, 7)
    vertical_weight: Parameter  # (C/2, C, 7, 1)
    horizontal_bias: Optional[Parameter] = None
    vertical_bias: Optional[Parameter] = None

    def parameters(self) -> list[Parameter]:
        ps = [self.horizontal_weight, self.vertical_weight]
        if self.horizontal_bias is not None:
            ps.append(self.horizontal_bias)
        if self.vertical_bias is not None:
            ps.append(self.vertical_bias)
        return ps


def make_asym_params(
    name: str, channels: int, rng: np.random.Generator, bias: bool = True
) -> AsymConvParams:
    if channels % 2 != 0 or channels < 2:
        raise ConfigError(f"directional conv needs even C >= 2, got C={channels}")
    half = channels // 2
    fan = channels * 7
    wh = Parameter(f"{name}.h.weight", kaiming_uniform(rng, (half, channels, 1, 7), fan))
    wv = Parameter(f"{name}.v.weight", kaiming_uniform(rng, (half, channels, 7, 1), fan))
    bh = Parameter(f"{name}.h.bias", np.zeros(half)) if bias else None
    bv = Parameter(f"{name}.v.bias", np.zeros(half)) if bias else None
    return AsymConvParams(wh, wv, bh, bv)


def asym_directional_conv(x: Tensor, params: AsymConvParams) -> Tensor:
    """Horizontal 1x7 and vertical 7x1 passes over the full input, each
    emitting C/2 channels; concatenation restores C at the same resolution."""
    if x.ndim != 4:
        raise ShapeError(f"directional conv needs rank-4 input, got {x.shape}")
    c = x.shape[1]
    if c % 2 != 0:
        raise ConfigError(f"directional conv needs even channel count, got C={c}")
    half = c // 2
    if params.horizontal_weight.shape != (half, c, 1, 7):
        raise ShapeError(
            f"horizontal kernel shape {params.horizontal_weight.shape} != {(half, c, 1, 7)}"
        )
    if params.vertical_weight.shape != (half, c, 7, 1):
        raise ShapeError(
            f"vertical kernel shape {params.vertical_weight.shape} != {(half, c, 7, 1)}"
        )
    fh = T.conv2d(x, params.horizontal_weight, params.horizontal_bias, (1, 1), (0, 3))
    fv = T.conv2d(x, params.vertical_weight, params.vertical_bias, (1, 1), (3, 0))
    return T.concat_channels([fh, fv])


def ddfm_forward(p4: Tensor, p2: Tensor, params: AsymConvParams) -> tuple[Tensor, Tensor]:
    """Two-branch split of a deep map against a shallow one.

    detail_branch: p4 upsampled 2x and channel-concatenated with p2 (at p2
    resolution); directional_branch: directional conv of p4 (at p4
    resolution). p2 must be exactly twice p4 spatially.
    """
    if p4.ndim != 4 or p2.ndim != 4:
        raise ShapeError("ddfm_forward needs rank-4 inputs")
    if p2.shape[2] != 2 * p4.shape[2] or p2.shape[3] != 2 * p4.shape[3]:
        raise ShapeError(
            f"shallow map {p2.shape} is not 2x the deep map {p4.shape} spatially"
        )
    if p2.shape[0] != p4.shape[0]:
        raise ShapeError("ddfm_forward batch mismatch")
    detail = T.concat_channels([T.upsample_nearest2x(p4), p2])
    directional = asym_directional_conv(p4, params)
    return detail, directional


# ---------------------------------------------------------------------------
# fusion weights


@dataclass
class FusionWeights:
    """Per-batch-element convex weights over N fused inputs."""

    tensor: Tensor  # (B, N)

    def __post_init__(self):
        v = self.tensor.data
        if v.ndim != 2:
            raise ShapeError(f"fusion weights must be (B, N), got {v.shape}")
        if not np.isfinite(v).all():
            raise NumericError("non-finite fusion weights")
        # Mathematically entries are in (0, 1); under saturation float
        # rounding can touch the endpoints, so the hard check is closed.
        if np.abs(v.sum(axis=1) - 1.0).max() > 1e-9 or (v < 0).any() or (v > 1).any():
            raise NumericError("fusion weight rows must lie in [0,1] and sum to 1")

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data

    @property
    def n(self) -> int:
        return self.tensor.shape[1]


def _scale_by_column(x: Tensor, weights: Tensor, col: int) -> Tensor:
    """x * weights[:, col], broadcast over channels and space."""
    b = x.shape[0]
    w_col = T.reshape(T.slice_channels(weights, col, col + 1), (b, 1, 1, 1))
    return T.mul(x, w_col)


# ---------------------------------------------------------------------------
# attention-weighted concatenation


@dataclass
class ACParams:
    """Per-input two-stage scoring heads for attention-weighted concat.

    Head i maps the pooled descriptor of input i (B, C_i) through a reduced
    hidden layer to one score per batch element. Heads may alias the same
    Parameter objects when sharing is wanted; gradients then accumulate.
    """

    w1: list[Parameter]  # i: (C'_i, C_i)
    b1: list[Parameter]
    w2: list[Parameter]  # i: (1, C'_i)
    b2: list[Parameter]
    reduction_ratio: int = 16

    def __post_init__(self):
        n = len(self.w1)
        if not (len(self.b1) == len(self.w2) == len(self.b2) == n):
            raise ConfigError("attention head lists must have equal length")
        if n < 2:
            raise ConfigError(f"attention concat needs >= 2 inputs, got {n}")

    @property
    def n_inputs(self) -> int:
        return len(self.w1)

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for p in [*self.w1, *self.b1, *self.w2, *self.b2]:
            seen.setdefault(id(p), p)
        return list(seen.values())


def make_ac_params(
    name: str,
    channel_counts: Sequence[int],
    rng: np.random.Generator,
    reduction_ratio: int = 16,
    share: bool = False,
) -> ACParams:
    """Build scoring heads for each input. share=True uses one head for all
    inputs, which requires every input to have the same channel count."""
    if len(channel_counts) < 2:
        raise ConfigError(f"attention concat needs >= 2 inputs, got {len(channel_counts)}")
    if share and len(set(channel_counts)) != 1:
        raise ConfigError(
            f"shared attention heads need equal channel counts, got {list(channel_counts)}"
        )
    w1, b1, w2, b2 = [], [], [], []
    for i, c in enumerate(channel_counts):
        if share and i > 0:
            w1.append(w1[0])
            b1.append(b1[0])
            w2.append(w2[0])
            b2.append(b2[0])
            continue
        cp = bottleneck_width(c, reduction_ratio)
        w1.append(Parameter(f"{name}.head{i}.w1", kaiming_uniform(rng, (cp, c), c)))
        b1.append(Parameter(f"{name}.head{i}.b1", np.zeros(cp)))
        w2.append(Parameter(f"{name}.head{i}.w2", kaiming_uniform(rng, (1, cp), cp)))
        b2.append(Parameter(f"{name}.head{i}.b2", np.zeros(1)))
    return ACParams(w1, b1, w2, b2, reduction_ratio)


def ac_forward(inputs: Sequence[Tensor], params: ACParams) -> tuple[Tensor, FusionWeights]:
    """Score each input from its pooled descriptor, softmax the scores per
    batch element, scale each input by its weight, concatenate on channels."""
    n = len(inputs)
    if n < 2:
        raise ConfigError(f"attention concat needs >= 2 inputs, got {n}")
    if params.n_inputs != n:
        raise ConfigError(f"params built for {params.n_inputs} inputs, got {n}")
    _check_same_spatial(inputs)
    b = inputs[0].shape[0]

    scores = []
    for i, f in enumerate(inputs):
        c = f.shape[1]
        if params.w1[i].shape[1] != c:
            raise ShapeError(
                f"head {i} expects {params.w1[i].shape[1]} channels, input has {c}"
            )
        g = T.reshape(T.global_avg_pool(f), (b, c))
        hidden = T.relu(T.fully_connected(g, params.w1[i], params.b1[i]))
        scores.append(T.fully_connected(hidden, params.w2[i], params.b2[i]))  # (B, 1)
    stacked = T.concat(scores, axis=1)  # (B, N)
    alpha = T.softmax(stacked, axis=1)
    fused = T.concat_channels([_scale_by_column(f, alpha, i) for i, f in enumerate(inputs)])
    return fused, FusionWeights(alpha)


# ---------------------------------------------------------------------------
# cross-layer attention fusion


@dataclass
class CAFParams:
    """Squeeze-excite scorer over the average of N same-shape inputs."""

    squeeze_weight: Parameter  # (C', C, 1, 1)
    squeeze_bias: Parameter  # (C',)
    excite_weight: Parameter  # (N, C', 1, 1)
    excite_bias: Parameter  # (N,)
    reduction_ratio: int = 16

    @property
    def n_inputs(self) -> int:
        return self.excite_weight.shape[0]

    @property
    def channels(self) -> int:
        return self.squeeze_weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.squeeze_weight, self.squeeze_bias, self.excite_weight, self.excite_bias]


def make_caf_params(
    name: str,
    channels: int,
    n_inputs: int,
    rng: np.random.Generator,
    reduction_ratio: int = 16,
) -> CAFParams:
    if n_inputs < 2:
        raise ConfigError(f"cross-layer fusion needs >= 2 inputs, got {n_inputs}")
    cp = bottleneck_width(channels, reduction_ratio)
    return CAFParams(
        Parameter(f"{name}.squeeze.weight", kaiming_uniform(rng, (cp, channels, 1, 1), channels)),
        Parameter(f"{name}.squeeze.bias", np.zeros(cp)),
        Parameter(f"{name}.excite.weight", kaiming_uniform(rng, (n_inputs, cp, 1, 1), cp)),
        Parameter(f"{name}.excite.bias", np.zeros(n_inputs)),
        reduction_ratio,
    )


def mean_maps(inputs: Sequence[Tensor]) -> Tensor:
    acc = inputs[0]
    for t in inputs[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(inputs))


def caf_forward(inputs: Sequence[Tensor], params: CAFParams) -> tuple[Tensor, FusionWeights]:
    """Average the inputs, pool, squeeze-excite to one score per input,
    softmax per batch element, return the convex combination."""
    n = len(inputs)
    if n < 2:
        raise ConfigError(f"cross-layer fusion needs >= 2 inputs, got {n}")
    if params.n_inputs != n:
        raise ConfigError(f"params built for {params.n_inputs} inputs, got {n}")
    shape = inputs[0].shape
    for t in inputs:
        if t.shape != shape:
            raise ShapeError(f"cross-layer fusion needs equal shapes, got {t.shape} vs {shape}")
    if shape[1] != params.channels:
        raise ShapeError(f"params expect C={params.channels}, inputs have C={shape[1]}")
    b = shape[0]

    avg = mean_maps(inputs)
    x = T.global_avg_pool(avg)  # (B, C, 1, 1)
    s1 = T.conv2d(x, params.squeeze_weight, params.squeeze_bias)
    z = T.relu(s1)
    s2 = T.conv2d(z, params.excite_weight, params.excite_bias)  # (B, N, 1, 1)
    beta = T.softmax(T.reshape(s2, (b, n)), axis=1)

    fused = _scale_by_column(inputs[0], beta, 0)
    for i in range(1, n):
        fused = T.add(fused, _scale_by_column(inputs[i], beta, i))
    return fused, FusionWeights(beta)


# ---------------------------------------------------------------------------
# fast-normalized weighted sum


def make_bifpn_weights(name: str, n_inputs: int) -> Parameter:
    if n_inputs < 1:
        raise ConfigError(f"fusion node needs >= 1 input, got {n_inputs}")
    return Parameter(name, np.ones(n_inputs))


def bifpn_fuse_node(inputs: Sequence[Tensor], fusion_weights: Parameter) -> Tensor:
    """Fast-normalized fusion: sum of inputs scaled by rectified weights,
    normalized so the coefficients sum to 1."""
    n = len(inputs)
    if n < 1:
        raise ValueError("fusion node over an empty input list")
    if fusion_weights.shape != (n,):
        raise ShapeError(f"fusion weights shape {fusion_weights.shape} != ({n},)")
    shape = inputs[0].shape
    for t in inputs:
        if t.shape != shape:
            raise ShapeError(f"fusion node needs equal shapes, got {t.shape} vs {shape}")
    wp = T.add(T.relu(fusion_weights), EPS_FUSE)
    total = T.sum_all(wp)
    acc = T.mul(inputs[0], T.take_flat(wp, np.array([0])))
    for i in range(1, n):
        acc = T.add(acc, T.mul(inputs[i], T.take_flat(wp, np.array([i]))))
    return T.div(acc, total)
