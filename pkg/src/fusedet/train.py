"""SGD training loop with per-epoch validation, logging, and resume.

Determinism contract: two runs from the same config and dataset produce
byte-identical logs and checkpoints, and a run interrupted after any
epoch continues to the same final state as an uninterrupted one. All
randomness is drawn from spawned streams keyed by (seed, purpose, epoch),
so no generator state needs to survive a restart.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, serialize_run_config
from .data import DatasetIndex, load_index, load_sample
from .detector import Model, build_model, compute_loss, decode_predictions
from .errors import ConfigError, DataError, NumericError
from .metrics import EvalResult, GroundTruthBox as PixelBox, evaluate
from .tensor import Parameter, Tensor

EVAL_CONF = 1e-3  # low floor so ranking, not thresholding, drives the AP
LOG_NAME = "training_log.csv"
LOG_COLUMNS = (
    "epoch", "loss_total", "loss_box", "loss_obj", "loss_cls",
    "val_map50", "val_map50_95",
)


class SGD:
    """Momentum SGD with decoupled weight decay.

    Decay only touches rank >= 2 parameters, which leaves biases and the
    scalar fusion weight vectors ungoverned, as intended."""

    def __init__(self, parameters: Sequence[Parameter], lr: float, momentum: float, weight_decay: float):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.parameters}

    def load_velocity(self, blobs: dict) -> None:
        if set(blobs) != set(self.velocity):
            raise ConfigError("momentum buffers do not match the parameter set")
        for name, arr in blobs.items():
            if arr.shape != self.velocity[name].shape:
                raise ConfigError(f"momentum buffer {name!r} has shape {arr.shape}")
            self.velocity[name][...] = arr

    def step(self) -> None:
        for p in self.parameters:
            g = p.grad
            if g is None:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_box: float
    loss_obj: float
    loss_cls: float
    val_map50: float
    val_map50_95: float

    def row(self) -> list:
        return [
            str(self.epoch),
            repr(self.loss_total), repr(self.loss_box),
            repr(self.loss_obj), repr(self.loss_cls),
            repr(self.val_map50), repr(self.val_map50_95),
        ]


@dataclass
class SplitData:
    """One split loaded fully into memory, letterboxed to the model size."""

    images: np.ndarray  # (N, 1, S, S)
    targets: list  # per image, list of normalized GroundTruthBox
    pixel_gts: list  # per image, list of metrics.GroundTruthBox


def load_split(index: DatasetIndex, split: str, size: int) -> SplitData:
    records = index.subset(split)
    images = np.zeros((len(records), 1, size, size))
    targets = []
    pixel_gts = []
    for i, rec in enumerate(records):
        img, boxes, _ = load_sample(rec, size)
        images[i] = img
        targets.append(boxes)
        pixel_gts.append([PixelBox(b.class_id, b.to_pixels(size)) for b in boxes])
    return SplitData(images, targets, pixel_gts)


def first_nonfinite_node(model: Model, images: np.ndarray) -> Optional[str]:
    """Untaped re-execution of the graph, reporting where finiteness is
    first lost; checks parameters first since they poison everything."""
    for p in model.parameters():
        if not np.isfinite(p.data).all():
            return f"parameter {p.name}"
    values = {"image": Tensor(images)}
    for node in model.graph.nodes:
        out = node.fn([values[i] for i in node.inputs])
        values[node.name] = out
        parts = out if isinstance(out, tuple) else (out,)
        for part in parts:
            if not np.isfinite(part.data).all():
                return node.name
    return None


def evaluate_model(
    model: Model,
    data: SplitData,
    class_count: int,
    nms_iou: float,
    batch_size: int = 25,
) -> EvalResult:
    dets = []
    for start in range(0, len(data.images), batch_size):
        chunk = data.images[start : start + batch_size]
        raw = model.forward(Tensor(chunk))
        dets.extend(decode_predictions(raw, model.config, EVAL_CONF, nms_iou))
    return evaluate(dets, data.pixel_gts, class_count)


def train_batch(model: Model, optimizer: SGD, images: np.ndarray, targets: list, cfg: RunConfig) -> dict:
    """One forward/backward/update. Returns the loss breakdown."""
    with T.Tape() as tape:
        raw = model.forward(Tensor(images))
        loss, breakdown = compute_loss(raw, targets, cfg.model, cfg.train)
        T.backward(tape, loss)
    optimizer.step()
    T.zero_grads(model.parameters())
    return breakdown


def _read_log_rows(path: Path, up_to_epoch: int) -> list:
    if not path.is_file():
        return []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(LOG_COLUMNS):
            raise DataError(f"{path}: unexpected log header {header}")
        for r in reader:
            if len(r) != len(LOG_COLUMNS):
                continue  # drop a torn final line from an interrupted run
            stats = EpochStats(
                int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]),
                float(r[5]), float(r[6]),
            )
            if stats.epoch <= up_to_epoch:
                rows.append(stats)
    return rows


def _write_log(path: Path, rows: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def fit(
    cfg: RunConfig,
    progress: Optional[Callable[[EpochStats], None]] = None,
) -> list:
    """Full training run as configured; returns the per-epoch stats.

    Writes <out_dir>/training_log.csv and the checkpoint after every
    epoch. With run.resume set and a checkpoint present, continues from
    the epoch after the stored one."""
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME
    ckpt_path = cfg.run.checkpoint_path()

    index = load_index(cfg.run.data_dir)
    train_data = load_split(index, "train", cfg.model.input_size)
    val_data = load_split(index, "val", cfg.model.input_size)
    if len(train_data.images) == 0:
        raise DataError(f"no training images under {cfg.run.data_dir}")

    start_epoch = 1
    rows: list = []
    if cfg.run.resume and ckpt_path.is_file():
        ckpt = load_checkpoint(ckpt_path)
        # epochs may grow on resume; every other experiment knob must match
        drop = "train.epochs = "
        stored = "\n".join(
            ln for ln in serialize_run_config(ckpt.config, include_volatile=False).splitlines()
            if not ln.startswith(drop)
        )
        current = "\n".join(
            ln for ln in serialize_run_config(cfg, include_volatile=False).splitlines()
            if not ln.startswith(drop)
        )
        if stored != current:
            raise ConfigError(
                f"checkpoint {ckpt_path} was trained with a different config; "
                "refusing to resume"
            )
        model = restore_model(ckpt)
        optimizer = SGD(
            model.parameters(), cfg.train.learning_rate, cfg.train.momentum,
            cfg.train.weight_decay,
        )
        optimizer.load_velocity(ckpt.momentum)
        start_epoch = ckpt.epoch + 1
        rows = _read_log_rows(log_path, ckpt.epoch)
    else:
        model = build_model(cfg.model, cfg.train.seed)
        optimizer = SGD(
            model.parameters(), cfg.train.learning_rate, cfg.train.momentum,
            cfg.train.weight_decay,
        )

    n = len(train_data.images)
    bs = cfg.train.batch_size
    for epoch in range(start_epoch, cfg.train.epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.train.seed, 1, epoch])
        ).permutation(n)
        sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        seen = 0
        for start in range(0, n, bs):
            batch = order[start : start + bs]
            images = train_data.images[batch]
            targets = [train_data.targets[i] for i in batch]
            try:
                breakdown = train_batch(model, optimizer, images, targets, cfg)
            except NumericError as e:
                node = first_nonfinite_node(model, images)
                raise NumericError(
                    f"training diverged in epoch {epoch} at image offset {start}: "
                    f"first non-finite value at node {node!r} ({e})"
                ) from e
            for k in sums:
                sums[k] += breakdown[k] * len(batch)
            seen += len(batch)

        result = evaluate_model(model, val_data, cfg.model.class_count, cfg.run.nms_iou)
        stats = EpochStats(
            epoch,
            sums["total"] / seen, sums["box"] / seen,
            sums["obj"] / seen, sums["cls"] / seen,
            result.map50, result.map50_95,
        )
        rows.append(stats)
        _write_log(log_path, rows)
        save_checkpoint(
            ckpt_path, cfg, epoch,
            {p.name: p.data for p in model.parameters()},
            dict(optimizer.velocity),
        )
        if progress is not None:
            progress(stats)

    if rows and not math.isfinite(rows[-1].loss_total):
        raise NumericError("final loss is not finite")
    return rows
