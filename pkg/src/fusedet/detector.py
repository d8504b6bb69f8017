"""Toy anchor-based one-stage detector hosting the fusion blocks.

Architecture (strides in px for a square input S):

- backbone: 4 stages, each a stride-2 3x3 conv + a 3x3 conv, ReLU after
  both, widths per stage; stages sit at strides 2/4/8/16
- neck at width W = widths[2], two output levels (strides 8 and 16):
  lateral 1x1 convs from stages 3 and 4; a top-down node td3 fusing
  lat3 with upsampled lat4 (weighted sum when the bifpn flag is on, plain
  mean otherwise); a three-input concat-type node at stride 8 hosting the
  attention-weighted concatenation; a sum-type node at stride 16 hosting
  the cross-layer attention fusion, with an extra same-scale skip edge
  from td3 when the bifpn flag is on
- detail/directional split: stage-3 features go through the
  upsample-and-concat detail branch (projected back to stride 8 by a
  stride-2 conv) and the 1x7/7x1 directional branch; both re-enter the
  stride-8 fusion node; with the flag off the node falls back to
  [lat3, td3]
- heads: per level, a 1x1 conv to A*(5+K) channels laid out per anchor as
  (tx, ty, tw, th, obj, K class logits)

Every disabled flag degrades structurally: attention concat -> plain
concat, cross-layer attention -> plain mean, bifpn -> no skip edge and
unweighted sums. The graph is an ordered node list executed front to
back, so it is acyclic by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import fusion as FU
from . import tensor as T
from .data import GroundTruthBox
from .errors import BuildError, ConfigError, DataError, NumericError, ShapeError
from .fusion import kaiming_uniform
from .metrics import Detection, iou as box_iou
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

STRIDES = (8, 16)
# Thin shapes sit on the stride-8 grid: its cell prior is never more than
# 4px off center, so even a 5px-thick box starts with nonzero overlap.
# Streak anchors are thicker than any streak on purpose: the first box
# gradient then points at shrink, whose optimum is mid-sigmoid, instead
# of grow, which momentum would ride into the saturated decode rail.
DEFAULT_ANCHORS = (
    ((6.0, 6.0), (36.0, 9.0), (9.0, 36.0)),  # stride 8: small boxes, streaks
    ((16.0, 16.0), (24.0, 24.0), (28.0, 28.0)),  # stride 16: blobs and patches
)
OBJ_PRIOR = math.log(0.01 / 0.99)  # objectness bias init, ~1% prior
RATIO_THRESHOLD = 4.0  # anchor match gate on max wh ratio
# Assigned cells are roughly 1:200 against background. An unweighted mean
# trains objectness straight to the base rate and nothing else within a
# short run, so positive cells carry this weight in the objectness term.
OBJ_POS_WEIGHT = 200.0


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    class_count: int = 3
    widths: tuple = (16, 32, 64, 128)
    anchors: tuple = DEFAULT_ANCHORS
    reduction_ratio: int = 16
    use_bifpn: bool = True
    use_ddfm: bool = True
    use_ac: bool = True
    use_caf: bool = True
    share_ac_heads: bool = False

    def __post_init__(self):
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be 4 positive ints, got {self.widths}")
        if len(self.anchors) != len(STRIDES):
            raise ConfigError(f"need anchors for {len(STRIDES)} levels, got {len(self.anchors)}")
        for level in self.anchors:
            if len(level) < 1:
                raise ConfigError("each level needs at least one anchor")
            for a in level:
                if len(a) != 2 or a[0] <= 0 or a[1] <= 0:
                    raise ConfigError(f"anchors must be positive (w,h) pairs, got {a}")
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")

    @property
    def neck_width(self) -> int:
        return self.widths[2]

    def anchors_per_level(self, level: int) -> int:
        return len(self.anchors[level])

    def head_channels(self, level: int) -> int:
        return self.anchors_per_level(level) * (5 + self.class_count)

    def grid_size(self, level: int) -> int:
        return self.input_size // STRIDES[level]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 42
    lambda_box: float = 0.05
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        for name in ("lambda_box", "lambda_obj", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class GraphNode:
    name: str
    kind: str
    inputs: list
    param_names: list
    fn: Callable = field(repr=False, default=None)


@dataclass
class ModelGraph:
    nodes: list
    outputs: list

    def node(self, name: str) -> GraphNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def kinds(self) -> list:
        return [n.kind for n in self.nodes]


@dataclass
class RawPrediction:
    """Per-level head outputs, each (B, A*(5+K), H_l, W_l)."""

    levels: list


class Model:
    """Parameter registry plus an executable fusion graph."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict = {}  # name -> Parameter, insertion-ordered
        self.graph: Optional[ModelGraph] = None
        self.inspection: dict = {}  # last fusion weights per node name

    def register(self, param: Parameter) -> Parameter:
        if param.name in self.params:
            raise BuildError(f"duplicate parameter name {param.name!r}")
        self.params[param.name] = param
        return param

    def register_all(self, params: Sequence[Parameter]) -> None:
        for p in params:
            self.register(p)

    def parameters(self) -> list:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, images: Tensor) -> RawPrediction:
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 1 or images.shape[2] != s or images.shape[3] != s:
            raise ShapeError(
                f"expected images (B, 1, {s}, {s}), got {images.shape}"
            )
        values = {"image": images}
        for node in self.graph.nodes:
            values[node.name] = node.fn([values[i] for i in node.inputs])
        outs = [values[o] for o in self.graph.outputs]
        for o in outs:
            if not np.isfinite(o.data).all():
                raise NumericError("non-finite values in head output")
        return RawPrediction(outs)


def _conv_init(rng, name, cin, cout, k):
    w = Parameter(f"{name}.weight", kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
    b = Parameter(f"{name}.bias", np.zeros(cout))
    return w, b


def build_model(config: ModelConfig, seed: int) -> Model:
    """Construct the graph for one ablation configuration and validate it
    with a dry forward pass."""
    if config.neck_width % 2 != 0:
        raise BuildError(f"neck width must be even for the fusion nodes, got {config.neck_width}")
    if config.use_ddfm and config.widths[2] % 2 != 0:
        raise BuildError(f"directional split needs an even stage-3 width, got {config.widths[2]}")
    if config.use_ddfm and not config.use_bifpn:
        log.warning("directional split enabled without weighted fusion; allowed but unusual")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = Model(config)
    nodes: list = []
    W = config.neck_width
    w1, w2, w3, w4 = config.widths

    def add(name, kind, inputs, params, fn):
        have = {"image"} | {n.name for n in nodes}
        for i in inputs:
            if i not in have:
                raise BuildError(f"node {name!r} references unknown input {i!r}")
        nodes.append(GraphNode(name, kind, list(inputs), [p.name for p in params], fn))

    def conv_node(name, src, cin, cout, k=3, stride=1, act=True, weight_scale=1.0):
        w, b = _conv_init(rng, name, cin, cout, k)
        if weight_scale != 1.0:
            w.data *= weight_scale
        model.register_all([w, b])
        pad = k // 2

        def fn(xs):
            y = T.conv2d(xs[0], w, b, (stride, stride), (pad, pad))
            return T.relu(y) if act else y

        add(name, "conv", [src], [w, b], fn)

    def stage(name, src, cin, cout):
        conv_node(f"{name}.down", src, cin, cout, stride=2)
        conv_node(name, f"{name}.down", cout, cout)

    # backbone
    stage("s1", "image", 1, w1)
    stage("s2", "s1", w1, w2)
    stage("s3", "s2", w2, w3)
    stage("s4", "s3", w3, w4)

    # laterals
    conv_node("lat3", "s3", w3, W, k=1, act=False)
    conv_node("lat4", "s4", w4, W, k=1, act=False)
    add("up4", "upsample", ["lat4"], [], lambda xs: T.upsample_nearest2x(xs[0]))

    # top-down fusion at stride 8
    if config.use_bifpn:
        w_td = model.register(FU.make_bifpn_weights("td3.fuse.weight", 2))
        add("td3.fuse", "weighted_sum", ["lat3", "up4"], [w_td],
            lambda xs: FU.bifpn_fuse_node(xs, w_td))
    else:
        add("td3.fuse", "mean", ["lat3", "up4"], [], FU.mean_maps)
    conv_node("td3", "td3.fuse", W, W)

    # detail/directional split of the stage-3 features
    if config.use_ddfm:
        asym = FU.make_asym_params("ddfm.dir", w3, rng)
        model.register_all(asym.parameters())
        add("ddfm", "ddfm", ["s3", "s2"], asym.parameters(),
            lambda xs: FU.ddfm_forward(xs[0], xs[1], asym))
        add("ddfm.detail", "detail_branch", ["ddfm"], [], lambda xs: xs[0][0])
        add("ddfm.direction", "directional_branch", ["ddfm"], [], lambda xs: xs[0][1])
        conv_node("det_proj", "ddfm.detail", w3 + w2, W, stride=2)
        conv_node("dir_proj", "ddfm.direction", w3, W, k=1)
        fuse3_inputs = ["td3", "det_proj", "dir_proj"]
    else:
        fuse3_inputs = ["lat3", "td3"]

    # concat-type fusion node at stride 8 (attention slot)
    if config.use_ac:
        ac = FU.make_ac_params(
            "fuse3.ac", [W] * len(fuse3_inputs), rng,
            reduction_ratio=config.reduction_ratio, share=config.share_ac_heads,
        )
        model.register_all(ac.parameters())

        def fuse3_fn(xs):
            fused, weights = FU.ac_forward(xs, ac)
            model.inspection["fuse3"] = weights.values
            return fused

        add("fuse3", "attention_concat", fuse3_inputs, ac.parameters(), fuse3_fn)
    else:
        add("fuse3", "concat", fuse3_inputs, [], T.concat_channels)
    conv_node("out3", "fuse3", W * len(fuse3_inputs), W)

    # bottom-up path to stride 16
    conv_node("down3", "out3", W, W, stride=2)
    fuse4_inputs = ["lat4", "down3"]
    if config.use_bifpn:
        conv_node("down_td3", "td3", W, W, stride=2)
        fuse4_inputs.append("down_td3")

    # sum-type fusion node at stride 16 (cross-layer attention slot)
    if config.use_caf:
        caf = FU.make_caf_params(
            "fuse4.caf", W, len(fuse4_inputs), rng, reduction_ratio=config.reduction_ratio
        )
        model.register_all(caf.parameters())

        def fuse4_fn(xs):
            fused, weights = FU.caf_forward(xs, caf)
            model.inspection["fuse4"] = weights.values
            return fused

        add("fuse4", "cross_layer_attention", fuse4_inputs, caf.parameters(), fuse4_fn)
    elif config.use_bifpn:
        w_f4 = model.register(FU.make_bifpn_weights("fuse4.weight", len(fuse4_inputs)))
        add("fuse4", "weighted_sum", fuse4_inputs, [w_f4],
            lambda xs: FU.bifpn_fuse_node(xs, w_f4))
    else:
        add("fuse4", "mean", fuse4_inputs, [], FU.mean_maps)
    conv_node("out4", "fuse4", W, W)

    # heads start near-silent: tiny weights put the initial boxes at the
    # anchor shapes and leave objectness at its prior bias
    conv_node("head3", "out3", W, config.head_channels(0), k=1, act=False, weight_scale=0.01)
    conv_node("head4", "out4", W, config.head_channels(1), k=1, act=False, weight_scale=0.01)
    for level, head in enumerate(("head3", "head4")):
        bias = model.params[f"{head}.bias"]
        span = 5 + config.class_count
        for a in range(config.anchors_per_level(level)):
            bias.data[a * span + 4] = OBJ_PRIOR

    model.graph = ModelGraph(nodes, ["head3", "head4"])

    if config.use_ac and config.use_caf:
        kinds = model.graph.kinds()
        assert kinds.count("attention_concat") == 1 and kinds.count("cross_layer_attention") == 1

    _validate_shapes(model)
    return model


def _validate_shapes(model: Model) -> None:
    cfg = model.config
    raw = model.forward(Tensor(np.zeros((1, 1, cfg.input_size, cfg.input_size))))
    for level, out in enumerate(raw.levels):
        want = (1, cfg.head_channels(level), cfg.grid_size(level), cfg.grid_size(level))
        if out.shape != want:
            raise BuildError(f"head {level} produced {out.shape}, expected {want}")


# ---------------------------------------------------------------------------
# box decode / encode


def decode_level(arr: np.ndarray, config: ModelConfig, level: int) -> np.ndarray:
    """Raw head channels -> (B, A, H, W, 5+K) with px boxes and probabilities.

    Box mapping per cell (gx, gy) and anchor (aw, ah):
    cx = (2*sig(tx) - 0.5 + gx) * stride, w = (2*sig(tw))^2 * aw.
    """
    B = arr.shape[0]
    A = config.anchors_per_level(level)
    K = config.class_count
    H = Wg = config.grid_size(level)
    stride = STRIDES[level]
    x = arr.reshape(B, A, 5 + K, H, Wg)
    sig = T.stable_sigmoid(x)
    gy, gx = np.mgrid[0:H, 0:Wg]
    out = np.empty((B, A, H, Wg, 5 + K))
    anchors = np.asarray(config.anchors[level])
    for a in range(A):
        out[:, a, :, :, 0] = (2.0 * sig[:, a, 0] - 0.5 + gx) * stride
        out[:, a, :, :, 1] = (2.0 * sig[:, a, 1] - 0.5 + gy) * stride
        out[:, a, :, :, 2] = (2.0 * sig[:, a, 2]) ** 2 * anchors[a, 0]
        out[:, a, :, :, 3] = (2.0 * sig[:, a, 3]) ** 2 * anchors[a, 1]
    out[..., 4:] = np.moveaxis(sig[:, :, 4:], 2, -1)
    return out


def decode_predictions(
    raw: RawPrediction,
    config: ModelConfig,
    conf_threshold: float,
    nms_iou: float,
) -> list:
    """Per-image detection lists: best-class confidence sig(obj)*sig(cls),
    boxes clipped to the frame, class-wise greedy suppression."""
    if not (0.0 < conf_threshold < 1.0) or not (0.0 < nms_iou < 1.0):
        raise ValueError(f"thresholds must be in (0,1), got {conf_threshold}, {nms_iou}")
    S = config.input_size
    B = raw.levels[0].shape[0]
    per_image: list = [[] for _ in range(B)]
    for level, t in enumerate(raw.levels):
        dec = decode_level(t.data, config, level)
        obj = dec[..., 4]
        cls = dec[..., 5:]
        best = cls.argmax(axis=-1)
        conf = obj * np.take_along_axis(cls, best[..., None], axis=-1)[..., 0]
        hits = np.argwhere(conf >= conf_threshold)
        for b, a, gy, gx in hits:
            cx, cy, w, h = dec[b, a, gy, gx, :4]
            x1 = min(max(cx - w / 2, 0.0), S)
            y1 = min(max(cy - h / 2, 0.0), S)
            x2 = min(max(cx + w / 2, 0.0), S)
            y2 = min(max(cy + h / 2, 0.0), S)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            per_image[b].append(
                Detection(int(best[b, a, gy, gx]), (x1, y1, x2, y2), float(conf[b, a, gy, gx]))
            )
    return [nms(dets, nms_iou) for dets in per_image]


def nms(dets: Sequence[Detection], nms_iou: float) -> list:
    """Class-wise greedy suppression, highest confidence first (stable)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    keep: list = []
    for i in order:
        d = dets[i]
        if any(k.class_id == d.class_id and box_iou(k.box, d.box) > nms_iou for k in keep):
            continue
        keep.append(d)
    return keep


def encode_offsets(
    box_px: tuple, config: ModelConfig, level: int, anchor_idx: int, cell: tuple
) -> tuple:
    """Inverse of decode_level's box mapping for one (cx, cy, w, h) px box.

    Raises ValueError when the box cannot be produced from that cell and
    anchor (offset outside (-0.5, 1.5) or size ratio outside (0, 4))."""
    cx, cy, w, h = box_px
    stride = STRIDES[level]
    aw, ah = config.anchors[level][anchor_idx]
    gx, gy = cell

    def inv_xy(v, g):
        u = (v / stride - g + 0.5) / 2.0
        if not (0.0 < u < 1.0):
            raise ValueError(f"offset {v} not reachable from cell {g}")
        return math.log(u / (1.0 - u))

    def inv_wh(v, a):
        u = math.sqrt(v / a) / 2.0
        if not (0.0 < u < 1.0):
            raise ValueError(f"size {v} not reachable from anchor {a}")
        return math.log(u / (1.0 - u))

    return (inv_xy(cx, gx), inv_xy(cy, gy), inv_wh(w, aw), inv_wh(h, ah))


# ---------------------------------------------------------------------------
# target assignment


@dataclass(frozen=True)
class AssignedTarget:
    image: int
    anchor: int
    gy: int
    gx: int
    box: GroundTruthBox


def assign_targets(targets_per_image: Sequence[Sequence[GroundTruthBox]], config: ModelConfig):
    """Single best (level, anchor) per ground-truth box by wh-ratio match.

    Returns per-level lists of AssignedTarget. A box whose best ratio is
    >= 4 is left unassigned; a (cell, anchor) collision keeps the first
    box and drops later ones.
    """
    S = config.input_size
    per_level: list = [[] for _ in STRIDES]
    taken: set = set()
    for b, boxes in enumerate(targets_per_image):
        for box in boxes:
            if box.class_id >= config.class_count:
                raise DataError(
                    f"class {box.class_id} outside [0, {config.class_count})"
                )
            w, h = box.w * S, box.h * S
            best = None
            for level in range(len(STRIDES)):
                for a, (aw, ah) in enumerate(config.anchors[level]):
                    r = max(w / aw, aw / w, h / ah, ah / h)
                    if best is None or r < best[0]:
                        best = (r, level, a)
            ratio, level, a = best
            if ratio >= RATIO_THRESHOLD:
                continue
            g = config.grid_size(level)
            gx = min(int(box.cx * S / STRIDES[level]), g - 1)
            gy = min(int(box.cy * S / STRIDES[level]), g - 1)
            key = (level, b, a, gy, gx)
            if key in taken:
                continue
            taken.add(key)
            per_level[level].append(AssignedTarget(b, a, gy, gx, box))
    return per_level


# ---------------------------------------------------------------------------
# loss


def _flat_indices(positives, config, level, channel):
    """Flat offsets into the (B, A*(5+K), H, W) level tensor for one
    per-anchor channel across all positives."""
    span = 5 + config.class_count
    g = config.grid_size(level)
    c_total = config.head_channels(level)
    idx = [
        ((p.image * c_total + p.anchor * span + channel) * g + p.gy) * g + p.gx
        for p in positives
    ]
    return np.asarray(idx, dtype=np.intp)


def _ciou_terms(raw_level, positives, config, level):
    """Differentiable decoded boxes for the positives of one level, plus
    their ground-truth px boxes as constants."""
    S = config.input_size
    stride = STRIDES[level]
    take = lambda c: T.take_flat(raw_level, _flat_indices(positives, config, level, c))
    tx, ty, tw, th = (T.sigmoid(take(c)) for c in range(4))
    gx = np.array([p.gx for p in positives], dtype=np.float64)
    gy = np.array([p.gy for p in positives], dtype=np.float64)
    aw = np.array([config.anchors[level][p.anchor][0] for p in positives])
    ah = np.array([config.anchors[level][p.anchor][1] for p in positives])
    bx = T.mul(T.add(T.sub(T.mul(tx, 2.0), 0.5), gx), stride)
    by = T.mul(T.add(T.sub(T.mul(ty, 2.0), 0.5), gy), stride)
    bw = T.mul(T.mul(T.mul(tw, 2.0), T.mul(tw, 2.0)), aw)
    bh = T.mul(T.mul(T.mul(th, 2.0), T.mul(th, 2.0)), ah)
    gt = np.array([[p.box.cx * S, p.box.cy * S, p.box.w * S, p.box.h * S] for p in positives])
    return (bx, by, bw, bh), gt


def ciou_loss(pred_cxcywh, gt_cxcywh: np.ndarray) -> Tensor:
    """Mean of (1 - CIoU) over paired boxes; gt boxes are constants.

    Every factor, including the aspect-term coefficient, stays on the
    tape, so the whole loss is exactly finite-difference consistent."""
    bx, by, bw, bh = pred_cxcywh
    gx, gy, gw, gh = gt_cxcywh[:, 0], gt_cxcywh[:, 1], gt_cxcywh[:, 2], gt_cxcywh[:, 3]
    eps = 1e-9

    bx1, bx2 = T.sub(bx, T.mul(bw, 0.5)), T.add(bx, T.mul(bw, 0.5))
    by1, by2 = T.sub(by, T.mul(bh, 0.5)), T.add(by, T.mul(bh, 0.5))
    gx1, gx2 = gx - gw / 2, gx + gw / 2
    gy1, gy2 = gy - gh / 2, gy + gh / 2

    iw = T.maximum(T.sub(T.minimum(bx2, gx2), T.maximum(bx1, gx1)), 0.0)
    ih = T.maximum(T.sub(T.minimum(by2, gy2), T.maximum(by1, gy1)), 0.0)
    inter = T.mul(iw, ih)
    union = T.add(T.sub(T.add(T.mul(bw, bh), gw * gh), inter), eps)
    iou_t = T.div(inter, union)

    cw = T.sub(T.maximum(bx2, gx2), T.minimum(bx1, gx1))
    ch = T.sub(T.maximum(by2, gy2), T.minimum(by1, gy1))
    c2 = T.add(T.add(T.mul(cw, cw), T.mul(ch, ch)), eps)
    rho2 = T.add(
        T.mul(T.sub(bx, gx), T.sub(bx, gx)), T.mul(T.sub(by, gy), T.sub(by, gy))
    )

    datan = T.sub(np.arctan(gw / gh), T.atan(T.div(bw, T.add(bh, eps))))
    v = T.mul(T.mul(datan, datan), 4.0 / math.pi**2)
    alpha = T.div(v, T.add(T.add(T.sub(1.0, iou_t), v), eps))

    ciou = T.sub(T.sub(iou_t, T.div(rho2, c2)), T.mul(v, alpha))
    return T.mean_all(T.sub(1.0, ciou))


def compute_loss(
    raw: RawPrediction,
    targets_per_image: Sequence[Sequence[GroundTruthBox]],
    config: ModelConfig,
    train: TrainConfig,
):
    """Composite detection loss.

    total = lambda_box * mean(1 - CIoU over positives)
          + lambda_obj * per-cell objectness BCE averaged over every cell
            of every level, with assigned cells multiplied by
            OBJ_POS_WEIGHT (pos_weight semantics: the positive term is
            scaled, the denominator stays the plain cell count)
          + lambda_cls * mean over positive class logits of BCE

    Returns (scalar Tensor, {term: float}).
    """
    B = raw.levels[0].shape[0]
    if len(targets_per_image) != B:
        raise ShapeError(f"{len(targets_per_image)} target lists for batch of {B}")
    per_level = assign_targets(targets_per_image, config)
    span = 5 + config.class_count
    K = config.class_count

    obj_num = None
    obj_den = 0.0
    box_terms = []
    cls_terms = []
    n_pos = 0
    for level, raw_level in enumerate(raw.levels):
        A = config.anchors_per_level(level)
        g = config.grid_size(level)
        positives = per_level[level]

        # objectness over every cell
        t_obj = np.zeros((B, A, g, g))
        w_obj = np.ones((B, A, g, g))
        for p in positives:
            t_obj[p.image, p.anchor, p.gy, p.gx] = 1.0
            w_obj[p.image, p.anchor, p.gy, p.gx] = OBJ_POS_WEIGHT
        obj_maps = [
            T.slice_channels(raw_level, a * span + 4, a * span + 5) for a in range(A)
        ]
        obj_logits = T.concat_channels(obj_maps)  # (B, A, g, g)
        piece = T.sum_all(T.mul(T.bce_with_logits(obj_logits, t_obj), w_obj))
        obj_num = piece if obj_num is None else T.add(obj_num, piece)
        obj_den += float(w_obj.size)

        if not positives:
            continue
        n_pos += len(positives)

        pred, gt = _ciou_terms(raw_level, positives, config, level)
        box_terms.append((len(positives), ciou_loss(pred, gt)))

        cls_target = np.zeros((len(positives), K))
        for i, p in enumerate(positives):
            cls_target[i, p.box.class_id] = 1.0
        cls_logits = [
            T.take_flat(raw_level, _flat_indices(positives, config, level, 5 + k))
            for k in range(K)
        ]
        for k in range(K):
            cls_terms.append((len(positives), T.mean_all(T.bce_with_logits(cls_logits[k], cls_target[:, k]))))

    obj_loss = T.mul(obj_num, 1.0 / obj_den)

    def weighted_mean(terms):
        total_n = sum(n for n, _ in terms)
        acc = None
        for n, t in terms:
            piece = T.mul(t, n / total_n)
            acc = piece if acc is None else T.add(acc, piece)
        return acc

    zero = Tensor(np.zeros(1))
    box_loss = weighted_mean(box_terms) if box_terms else zero
    cls_loss = weighted_mean(cls_terms) if cls_terms else zero

    total = T.add(
        T.add(T.mul(box_loss, train.lambda_box), T.mul(obj_loss, train.lambda_obj)),
        T.mul(cls_loss, train.lambda_cls),
    )
    if not math.isfinite(total.item()):
        raise NumericError("non-finite loss")
    breakdown = {
        "box": float(box_loss.item()),
        "obj": float(obj_loss.item()),
        "cls": float(cls_loss.item()),
        "total": float(total.item()),
        "positives": float(n_pos),
    }
    return total, breakdown
