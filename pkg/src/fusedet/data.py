"""Synthetic grayscale defect dataset plus YOLO-format dataset IO.

Three defect classes instantiate the shape regimes the detector's fusion
blocks are meant to separate:

- streak: thin elongated bar, aspect ratio >= 6, axis-aligned by default
- blob:   small elliptical spot, bounding box area <= 1.5% of the image
- patch:  mid-size near-square rectangle with checkerboard texture

Each image carries at most one defect; a fixed fraction is defect-free.
Images are binary 8-bit PGM (P5), annotations are YOLO text lines
`<class> <cx> <cy> <w> <h>` normalized to [0,1], and splits.txt assigns
every stem to train/val/test via stratified sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DatasetIOError, FileFormatError

CLASS_NAMES = ("streak", "blob", "patch")
PAD_GRAY = 114  # letterbox fill, kept as the conventional constant
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruthBox:
    """Normalized center-format box: all fields relative to image dims."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise DataError(f"negative class id {self.class_id}")
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DataError(f"non-finite {name}={v}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise DataError(f"center ({self.cx}, {self.cy}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise DataError(f"size ({self.w}, {self.h}) outside (0,1]")

    def to_pixels(self, size: int) -> tuple:
        """Corner box in pixels, clamped to the image."""
        x1 = max(0.0, (self.cx - self.w / 2) * size)
        y1 = max(0.0, (self.cy - self.h / 2) * size)
        x2 = min(float(size), (self.cx + self.w / 2) * size)
        y2 = min(float(size), (self.cy + self.h / 2) * size)
        return (x1, y1, x2, y2)


def parse_annotation_line(line: str) -> GroundTruthBox:
    fields = line.split()
    if len(fields) != 5:
        raise DataError(f"expected 5 fields, got {len(fields)}: {line!r}")
    try:
        cls = int(fields[0])
        vals = [float(v) for v in fields[1:]]
    except ValueError as e:
        raise DataError(f"non-numeric annotation field in {line!r}") from e
    return GroundTruthBox(cls, *vals)


def serialize_annotation(box: GroundTruthBox) -> str:
    return f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def read_annotation_file(path) -> list[GroundTruthBox]:
    boxes = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetIOError(f"cannot read annotations at {path}: {e}") from e
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            boxes.append(parse_annotation_line(line))
        except DataError as e:
            raise DataError(f"{path}:{ln}: {e}") from e
    return boxes


def write_annotation_file(boxes: Sequence[GroundTruthBox], path) -> None:
    Path(path).write_text("".join(serialize_annotation(b) + "\n" for b in boxes))


# ---------------------------------------------------------------------------
# PGM IO


def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm wants a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(image.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write image at {path}: {e}") from e


def read_pgm(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read image at {path}: {e}") from e
    if not blob.startswith(b"P5"):
        raise FileFormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    # header: magic, width, height, maxval as whitespace/comment separated tokens
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric PGM header fields {tokens}")
    if w < 1 or h < 1 or not (0 < maxval < 256):
        raise FileFormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    data = blob[pos : pos + w * h]
    if len(data) != w * h:
        raise FileFormatError(f"{path}: PGM payload is {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    image_count: int = 250
    seed: int = 0
    defect_free_rate: float = 0.2
    noise_sigma: float = 6.0
    gradient_amplitude: float = 20.0
    # +/-45 degree streaks break the aspect-ratio >= 6 box guarantee, so
    # they are opt-in and excluded from the by-construction checks
    diagonal_streaks: bool = False

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.image_count < 1:
            raise ConfigError(f"image_count must be >= 1, got {self.image_count}")
        if not (0.0 <= self.defect_free_rate < 1.0):
            raise ConfigError(f"defect_free_rate must be in [0,1), got {self.defect_free_rate}")


def _is_defect_free(idx: int, rate: float) -> bool:
    """Exact integer spacing of defect-free images (round(rate*1000) per mille)."""
    k = round(rate * 1000)
    return (idx + 1) * k // 1000 - idx * k // 1000 >= 1


def _extent_box(mask: np.ndarray, size: int, class_id: int) -> GroundTruthBox:
    ys, xs = np.nonzero(mask)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    return GroundTruthBox(
        class_id,
        (x0 + x1 + 1) / 2.0 / size,
        (y0 + y1 + 1) / 2.0 / size,
        (x1 + 1 - x0) / size,
        (y1 + 1 - y0) / size,
    )


def _paint_streak(rng: np.random.Generator, img: np.ndarray, spec: SynthSpec) -> GroundTruthBox:
    size = spec.image_size
    margin = max(2, size // 16)
    l_max = min(size - 2 * margin, 3 * size // 4)
    t_hi = max(1, min(5, l_max // 6))
    t_lo = min(3, t_hi)
    t = int(rng.integers(t_lo, t_hi + 1))
    length = int(rng.integers(6 * t, l_max + 1))
    delta = float(rng.integers(0, 2) * 2 - 1) * rng.uniform(45.0, 90.0)
    mask = np.zeros((size, size), dtype=bool)

    orientations = ["h", "v"] + (["d+", "d-"] if spec.diagonal_streaks else [])
    o = orientations[int(rng.integers(0, len(orientations)))]
    if o == "h":
        y0 = int(rng.integers(margin, size - margin - t + 1))
        x0 = int(rng.integers(margin, size - margin - length + 1))
        mask[y0 : y0 + t, x0 : x0 + length] = True
    elif o == "v":
        x0 = int(rng.integers(margin, size - margin - t + 1))
        y0 = int(rng.integers(margin, size - margin - length + 1))
        mask[y0 : y0 + length, x0 : x0 + t] = True
    else:
        run = min(length, size - 2 * margin - t)
        x0 = int(rng.integers(margin, size - margin - run - t + 1))
        y0 = int(rng.integers(margin + (run if o == "d-" else 0), size - margin - t - (0 if o == "d-" else run) + 1))
        step = 1 if o == "d+" else -1
        for s in range(run):
            y = y0 + step * s
            mask[y : y + t, x0 + s : x0 + s + t] = True
    img[mask] += delta
    return _extent_box(mask, size, 0)


def _paint_blob(rng: np.random.Generator, img: np.ndarray, spec: SynthSpec) -> GroundTruthBox:
    size = spec.image_size
    # bounding box area stays <= 1.5% of the image by capping the semi-axes
    a_max = (math.sqrt(0.015) * size - 1.0) / 2.0
    a_lo = max(0.6, 0.58 * a_max)
    a = rng.uniform(a_lo, a_max)
    b = rng.uniform(a_lo, a_max)
    margin = max(2, size // 16)
    cx = rng.uniform(margin + a, size - margin - a)
    cy = rng.uniform(margin + b, size - margin - b)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    delta = float(rng.integers(0, 2) * 2 - 1) * rng.uniform(45.0, 90.0)
    img[mask] += delta
    box = _extent_box(mask, size, 1)
    if box.w * box.h * size * size > 0.015 * size * size + 1e-9:
        raise DataError(f"blob box violated the area cap: {box}")
    return box


def _paint_patch(rng: np.random.Generator, img: np.ndarray, spec: SynthSpec) -> GroundTruthBox:
    size = spec.image_size
    lo = max(4, 3 * size // 16)
    hi = min(size // 3, lo + 8)
    w = int(rng.integers(lo, hi + 1))
    h_lo = max(lo, math.ceil(w / 1.6))
    h_hi = min(hi, math.floor(w * 1.6))
    h = int(rng.integers(h_lo, h_hi + 1))
    margin = max(2, size // 16)
    x0 = int(rng.integers(margin, size - margin - w + 1))
    y0 = int(rng.integers(margin, size - margin - h + 1))
    cell = int(rng.integers(2, 4))
    amp = rng.uniform(25.0, 50.0)
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((xx // cell + yy // cell) % 2) * 2.0 - 1.0
    img[y0 : y0 + h, x0 : x0 + w] += checker * amp + float(rng.integers(0, 2) * 2 - 1) * 15.0
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    return _extent_box(mask, size, 2)


_PAINTERS = (_paint_streak, _paint_blob, _paint_patch)


def synthesize_image(spec: SynthSpec, idx: int, defect_class: Optional[int]) -> tuple:
    """One deterministic image: (uint8 array, list of boxes).

    defect_class None means defect-free. All randomness comes from the
    stream derived from (spec.seed, idx), so images are independent of
    generation order.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, idx]))
    size = spec.image_size
    base = rng.uniform(100.0, 150.0)
    img = np.full((size, size), base, dtype=np.float64)
    gdir = rng.uniform(0.0, 2.0 * math.pi)
    gamp = rng.uniform(0.0, spec.gradient_amplitude)
    yy, xx = np.mgrid[0:size, 0:size]
    ramp = (xx * math.cos(gdir) + yy * math.sin(gdir)) / size
    img += gamp * (ramp - ramp.mean())
    boxes = []
    if defect_class is not None:
        boxes.append(_PAINTERS[defect_class](rng, img, spec))
    img += rng.normal(0.0, spec.noise_sigma, size=(size, size))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


# ---------------------------------------------------------------------------
# splits


def stratified_split(
    strata: Sequence[str], seed: int, val_frac: float = 0.1, test_frac: float = 0.1
) -> list[str]:
    """Assign train/val/test per element, stratified by the given labels.

    Global val/test totals are exactly round(frac * n); per-stratum counts
    are apportioned by largest remainder, so the split is a pure function
    of (strata, seed).
    """
    n = len(strata)
    if n == 0:
        return []
    val_total = round(val_frac * n)
    test_total = round(test_frac * n)
    if val_total + test_total > n:
        raise ConfigError(f"split fractions too large for {n} elements")

    groups: dict[str, list[int]] = {}
    for i, s in enumerate(strata):
        groups.setdefault(s, []).append(i)
    keys = sorted(groups)
    sizes = np.array([len(groups[k]) for k in keys], dtype=np.int64)

    def apportion(total, capacity):
        quota = total * sizes / n
        base = np.minimum(np.floor(quota).astype(np.int64), capacity)
        remainder = quota - np.floor(quota)
        short = total - int(base.sum())
        order = sorted(range(len(keys)), key=lambda i: (-remainder[i], i))
        counts = base.copy()
        for i in order:
            if short == 0:
                break
            if counts[i] < capacity[i]:
                counts[i] += 1
                short -= 1
        if short > 0:  # spill anywhere with room, deterministically
            for i in range(len(keys)):
                take = min(short, int(capacity[i] - counts[i]))
                counts[i] += take
                short -= take
        return counts

    val_counts = apportion(val_total, sizes)
    test_counts = apportion(test_total, sizes - val_counts)

    out = ["train"] * n
    for ki, k in enumerate(keys):
        idxs = np.array(groups[k])
        rng_k = np.random.default_rng(np.random.SeedSequence([seed, 3, ki]))
        perm = idxs[rng_k.permutation(len(idxs))]
        for i in perm[: val_counts[ki]]:
            out[i] = "val"
        for i in perm[val_counts[ki] : val_counts[ki] + test_counts[ki]]:
            out[i] = "test"
    return out


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class DatasetRecord:
    stem: str
    image_path: Path
    label_path: Path
    split: str


@dataclass
class DatasetIndex:
    root: Path
    records: list

    def subset(self, split: str) -> list:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def __len__(self):
        return len(self.records)


def generate_synthetic_dataset(spec: SynthSpec, out_dir) -> DatasetIndex:
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directories under {root}: {e}") from e

    strata = []
    stems = []
    defective_seen = 0
    for idx in range(spec.image_count):
        if _is_defect_free(idx, spec.defect_free_rate):
            cls = None
        else:
            cls = defective_seen % len(CLASS_NAMES)  # round-robin keeps classes balanced
            defective_seen += 1
        img, boxes = synthesize_image(spec, idx, cls)
        stem = f"img_{idx:05d}"
        write_pgm(root / "images" / f"{stem}.pgm", img)
        write_annotation_file(boxes, root / "labels" / f"{stem}.txt")
        stems.append(stem)
        strata.append("empty" if cls is None else CLASS_NAMES[cls])

    splits = stratified_split(strata, spec.seed)
    lines = [f"{stem}\t{split}\n" for stem, split in zip(stems, splits)]
    try:
        (root / "splits.txt").write_text("".join(lines))
    except OSError as e:
        raise DatasetIOError(f"cannot write splits at {root}: {e}") from e
    records = [
        DatasetRecord(stem, root / "images" / f"{stem}.pgm", root / "labels" / f"{stem}.txt", split)
        for stem, split in zip(stems, splits)
    ]
    return DatasetIndex(root, records)


def load_index(root) -> DatasetIndex:
    root = Path(root)
    splits_path = root / "splits.txt"
    if not splits_path.is_file():
        raise DatasetIOError(f"no splits.txt under {root}")
    records = []
    for ln, line in enumerate(splits_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DataError(f"{splits_path}:{ln}: bad split line {line!r}")
        stem, split = parts
        img = root / "images" / f"{stem}.pgm"
        lbl = root / "labels" / f"{stem}.txt"
        if not img.is_file():
            raise DatasetIOError(f"missing image for stem {stem!r}: {img}")
        if not lbl.is_file():
            raise DatasetIOError(f"missing annotations for stem {stem!r}: {lbl}")
        records.append(DatasetRecord(stem, img, lbl, split))
    return DatasetIndex(root, records)


# ---------------------------------------------------------------------------
# loading and letterboxing


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center aligned bilinear resampling of a 2-D float array."""
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).reshape(-1, 1)
    wx = np.clip(xs - x0, 0.0, 1.0).reshape(1, -1)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass(frozen=True)
class LetterboxTransform:
    """Geometry of one aspect-preserving resize-plus-pad operation."""

    src_w: int
    src_h: int
    target: int
    scale: float
    pad_x: int
    pad_y: int

    def apply_box(self, box: GroundTruthBox) -> GroundTruthBox:
        cx = (box.cx * self.src_w * self.scale + self.pad_x) / self.target
        cy = (box.cy * self.src_h * self.scale + self.pad_y) / self.target
        return GroundTruthBox(
            box.class_id,
            cx,
            cy,
            box.w * self.src_w * self.scale / self.target,
            box.h * self.src_h * self.scale / self.target,
        )

    def invert_box(self, box: GroundTruthBox) -> GroundTruthBox:
        cx = (box.cx * self.target - self.pad_x) / (self.src_w * self.scale)
        cy = (box.cy * self.target - self.pad_y) / (self.src_h * self.scale)
        return GroundTruthBox(
            box.class_id,
            cx,
            cy,
            box.w * self.target / (self.src_w * self.scale),
            box.h * self.target / (self.src_h * self.scale),
        )


def letterbox(img01: np.ndarray, target: int) -> tuple:
    """Resize a [0,1] grayscale image into a target x target frame, padding
    the short side symmetrically with the gray constant."""
    h, w = img01.shape
    scale = min(target / w, target / h)
    new_w = max(1, round(w * scale))
    new_h = max(1, round(h * scale))
    resized = bilinear_resize(img01, new_h, new_w)
    pad_x = (target - new_w) // 2
    pad_y = (target - new_h) // 2
    out = np.full((target, target), PAD_GRAY / 255.0)
    out[pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    return out, LetterboxTransform(w, h, target, scale, pad_x, pad_y)


def load_sample(record: DatasetRecord, target_size: int) -> tuple:
    """One (image, boxes, transform) triple; image is (1, S, S) in [0,1]."""
    raw = read_pgm(record.image_path) / 255.0
    boxes = read_annotation_file(record.label_path)
    boxed, tf = letterbox(raw, target_size)
    return boxed.reshape(1, target_size, target_size), [tf.apply_box(b) for b in boxes], tf


def iter_samples(records: Sequence[DatasetRecord], target_size: int) -> Iterator[tuple]:
    for r in records:
        yield load_sample(r, target_size)
