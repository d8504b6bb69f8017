"""Dense float64 tensors with tape-based reverse-mode autodiff.

Everything downstream (fusion blocks, detector, loss) is written in this
vocabulary. Arrays are row-major numpy float64, rank 1-4; the rank-4 order
is (batch, channels, height, width). Operations executed while a Tape is
active are recorded in execution order, which is already a topological
order, so backward() is a single reverse sweep.

The module is deliberately small: only the operations the detector needs
exist, each with a hand-written backward rule. numpy supplies storage and
matmul; all differentiation logic lives here.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckError, NumericError, ShapeError, TapeStateError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "atan",
    "minimum",
    "maximum",
    "matmul",
    "conv2d",
    "fully_connected",
    "upsample_nearest2x",
    "concat_channels",
    "concat",
    "slice_channels",
    "global_avg_pool",
    "softmax",
    "softmax_vec",
    "bce_with_logits",
    "take_flat",
    "reshape",
    "sum_all",
    "mean_all",
    "backward",
    "zero_grads",
    "finite_diff_gradcheck",
    "stable_sigmoid",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 4:
        raise ShapeError(f"tensors are rank 1-4, got rank {arr.ndim}")
    return arr


class Tensor:
    """A dense float64 array plus a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    # Arithmetic sugar; scalars become non-differentiable constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Named learnable tensor. Gradients accumulate additively across a
    backward pass and are zeroed explicitly between optimizer steps."""

    __slots__ = ("name", "requires_grad")

    def __init__(self, name: str, data, requires_grad: bool = True):
        super().__init__(data)
        self.name = name
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op, output, inputs, backward_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Recording order equals topological order; backward() visits each node
    exactly once in reverse and then the tape is consumed. Tapes are
    rebuilt every forward pass; there is no graph caching.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.consumed = False
        self._prev_active: Optional[Tape] = None

    def record(self, op, output, inputs, backward_fn) -> None:
        self.nodes.append(_Node(op, output, inputs, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev_active = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev_active
        return False


_ACTIVE_TAPE: Optional[Tape] = None


def _record(op: str, out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if _ACTIVE_TAPE is not None and not _ACTIVE_TAPE.consumed:
        _ACTIVE_TAPE.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(x):
    """Return (ndarray, tensor-or-None). Non-Tensor operands are constants."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(op, a, b, fwd, bwd_a, bwd_b):
    av, at = _coerce(a)
    bv, bt = _coerce(b)
    out = Tensor(fwd(av, bv))
    inputs = tuple(t for t in (at, bt) if t is not None)
    if not inputs:
        return out

    def backward_fn(g):
        grads = []
        if at is not None:
            grads.append(_unbroadcast(bwd_a(g, av, bv), av.shape))
        if bt is not None:
            grads.append(_unbroadcast(bwd_b(g, av, bv), bv.shape))
        return grads

    return _record(op, out, inputs, backward_fn)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a):
    av, at = _coerce(a)
    out = Tensor(-av)
    if at is None:
        return out
    return _record("neg", out, (at,), lambda g: [-g])


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first argument."""

    def bwd_a(g, x, y):
        return g * (x <= y)

    def bwd_b(g, x, y):
        return g * (x > y)

    return _binary("minimum", a, b, np.minimum, bwd_a, bwd_b)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""

    def bwd_a(g, x, y):
        return g * (x >= y)

    def bwd_b(g, x, y):
        return g * (x < y)

    return _binary("maximum", a, b, np.maximum, bwd_a, bwd_b)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at the kink is 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0
    return _record("relu", out, (x,), lambda g: [g * mask])


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    out = Tensor(s)
    return _record("sigmoid", out, (x,), lambda g: [g * s * (1.0 - s)])


def atan(x: Tensor) -> Tensor:
    out = Tensor(np.arctan(x.data))
    xv = x.data
    return _record("atan", out, (x,), lambda g: [g / (1.0 + xv * xv)])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    av, bv = a.data, b.data
    return _record("matmul", out, (a, b), lambda g: [g @ bv.T, av.T @ g])


def fully_connected(x: Tensor, weight: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """Affine map on rank-2 (B, C_in) input with weight (C_out, C_in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected needs rank-2 input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected dim mismatch: input {x.shape} vs weight {weight.shape}"
        )
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = add(out, bias)
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose2d needs rank-2, got {x.shape}")
    out = Tensor(x.data.T.copy())
    return _record("transpose2d", out, (x,), lambda g: [g.T])


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(
    x: Tensor,
    weight: Parameter,
    bias: Optional[Parameter] = None,
    stride=(1, 1),
    padding=(0, 0),
) -> Tensor:
    """Dense 2-D cross-correlation with zero padding.

    weight is (C_out, C_in, k_h, k_w); output spatial dims follow
    floor((in + 2*pad - k)/stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input/weight, got {x.shape}, {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"conv2d stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d padding must be nonnegative, got {(ph, pw)}")
    B, C, H, W = x.shape
    Cout, Cin, KH, KW = weight.shape
    if C != Cin:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cin}")
    OH = (H + 2 * ph - KH) // sh + 1
    OW = (W + 2 * pw - KW) // sw + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError(
            f"conv2d output would be empty: input {H}x{W}, kernel {KH}x{KW}, "
            f"stride {(sh, sw)}, padding {(ph, pw)}"
        )
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({Cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col + one BLAS matmul per forward.
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.reshape(B, C, OH, OW, KH * KW)
    wmat = weight.data.reshape(Cout, Cin * KH * KW)
    colmat = cols.transpose(0, 2, 3, 1, 4).reshape(B * OH * OW, Cin * KH * KW)
    y = (colmat @ wmat.T).reshape(B, OH, OW, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, Cout, 1, 1)
    out = Tensor(np.ascontiguousarray(y))

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        dw = np.zeros_like(weight.data)
        dxp = np.zeros_like(xp)
        # Per-tap accumulation keeps memory flat and the order deterministic.
        for kh in range(KH):
            for kw in range(KW):
                patch = xp[:, :, kh : kh + sh * OH : sh, kw : kw + sw * OW : sw]
                dw[:, :, kh, kw] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                dxp[:, :, kh : kh + sh * OH : sh, kw : kw + sw * OW : sw] += np.einsum(
                    "bohw,oc->bchw", g, weight.data[:, :, kh, kw], optimize=True
                )
        dx = dxp[:, :, ph : ph + H, pw : pw + W]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# shape ops


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every cell of a rank-4 map into a 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x needs rank-4, got {x.shape}")
    B, C, H, W = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def backward_fn(g):
        return [g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))]

    return _record("upsample_nearest2x", out, (x,), backward_fn)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(inputs) == 0:
        raise ValueError("concat of an empty list")
    ndim = inputs[0].ndim
    for t in inputs:
        if t.ndim != ndim:
            raise ShapeError("concat inputs must share rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != inputs[0].shape[ax]:
                raise ShapeError(
                    f"concat inputs disagree on axis {ax}: {t.shape} vs {inputs[0].shape}"
                )
    out = Tensor(np.concatenate([t.data for t in inputs], axis=axis))
    sizes = [t.shape[axis] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        sl = [slice(None)] * ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return _record("concat", out, tuple(inputs), backward_fn)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-4 maps along channels; batch and spatial dims must agree."""
    if len(inputs) == 0:
        raise ValueError("concat_channels of an empty list")
    for t in inputs:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels needs rank-4 inputs, got {t.shape}")
    return concat(inputs, axis=1)


def slice_channels(x: Tensor, c0: int, c1: int) -> Tensor:
    """View columns/channels [c0, c1) of axis 1."""
    if x.ndim < 2:
        raise ShapeError(f"slice_channels needs rank >= 2, got {x.shape}")
    if not (0 <= c0 < c1 <= x.shape[1]):
        raise ValueError(f"bad channel slice [{c0}, {c1}) for shape {x.shape}")
    sl = (slice(None), slice(c0, c1))
    out = Tensor(x.data[sl].copy())
    shape = x.shape

    def backward_fn(g):
        dx = np.zeros(shape)
        dx[sl] = g
        return [dx]

    return _record("slice_channels", out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())
    orig = x.shape
    return _record("reshape", out, (x,), lambda g: [g.reshape(orig)])


def take_flat(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather x.flat[indices] as a rank-1 tensor; backward scatter-adds."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_flat indices must be rank-1")
    out = Tensor(x.data.reshape(-1)[idx].copy())
    shape = x.shape

    def backward_fn(g):
        dx = np.zeros(shape)
        np.add.at(dx.reshape(-1), idx, g)
        return [dx]

    return _record("take_flat", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and normalizations


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a rank-4 map, keeping (B, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs rank-4, got {x.shape}")
    B, C, H, W = x.shape
    if H * W < 1:
        raise ValueError("global_avg_pool over zero spatial extent")
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def backward_fn(g):
        return [np.broadcast_to(g / (H * W), (B, C, H, W)).copy()]

    return _record("global_avg_pool", out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([x.data.sum()]))
    shape = x.shape
    return _record("sum_all", out, (x,), lambda g: [np.full(shape, g.reshape(-1)[0])])


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.array([x.data.mean()]))
    shape = x.shape
    return _record("mean_all", out, (x,), lambda g: [np.full(shape, g.reshape(-1)[0] / n)])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, computed with max-subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax over non-finite scores")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return [s * (g - dot)]

    return _record("softmax", out, (x,), backward_fn)


def softmax_vec(scores) -> Tensor:
    """Softmax of a rank-1 score vector; outputs are positive and sum to 1."""
    t = scores if isinstance(scores, Tensor) else Tensor(scores)
    if t.ndim != 1:
        raise ShapeError(f"softmax_vec needs a rank-1 vector, got {t.shape}")
    if t.size < 1:
        raise ValueError("softmax_vec over an empty vector")
    return softmax(t, axis=0)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on logits against constant targets.

    Uses the max(x,0) - x*t + log1p(exp(-|x|)) form for stability.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce targets shape {t.shape} != logits {logits.shape}")
    x = logits.data
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def backward_fn(g):
        return [g * (stable_sigmoid(x) - t)]

    return _record("bce_with_logits", out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep: accumulate d(loss)/d(input) into .grad of every tensor
    reachable from `loss` on this tape. The tape is consumed."""
    if tape.consumed:
        raise TapeStateError("tape already consumed by a previous backward")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeStateError("loss was not produced under this tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if isinstance(t, Parameter) and not t.requires_grad:
                continue
            t.accumulate_grad(gi)
    tape.consumed = True
    tape.nodes.clear()


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_diff_gradcheck(
    fragment,
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    sample_cap: int = 512,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients of `fragment` against central differences.

    `fragment` is a zero-argument callable returning a scalar Tensor; it must
    be a deterministic pure function of the current .data of `params` (wrap
    inputs you want checked as Parameters and include them). For each
    parameter, all coordinates are probed when the count is <= sample_cap,
    otherwise a seeded sample of sample_cap coordinates.

    Returns {param_name: max relative error}, with the relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    base = float(_eval_scalar(fragment))
    again = float(_eval_scalar(fragment))
    if base != again:
        raise CheckError("fragment is not deterministic: two evaluations differ")

    zero_grads(params)
    with Tape() as tape:
        loss = fragment()
    backward(tape, loss)
    analytic = [p.grad_or_zeros().copy() for p in params]
    zero_grads(params)

    rng = np.random.default_rng(seed)
    report = {}
    for p, an in zip(params, analytic):
        n = p.size
        if n <= sample_cap:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=sample_cap, replace=False))
        flat = p.data.flat  # writes through regardless of memory layout
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up = _eval_scalar(fragment)
            flat[c] = orig - epsilon
            down = _eval_scalar(fragment)
            flat[c] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = an.reshape(-1)[c]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
        name = p.name if isinstance(p, Parameter) else f"tensor@{id(p):x}"
        report[name] = worst
    return report


def _eval_scalar(fragment) -> float:
    out = fragment()
    if not isinstance(out, Tensor) or out.size != 1:
        raise CheckError("gradcheck fragment must return a scalar Tensor")
    v = out.item()
    if not math.isfinite(v):
        raise NumericError("gradcheck fragment produced a non-finite value")
    return v
