"""Tests for dataset synthesis, IO, splitting, and letterboxing."""

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedet import data as D
from fusedet.data import GroundTruthBox, SynthSpec
from fusedet.errors import ConfigError, DataError, DatasetIOError, FileFormatError


# ---------------------------------------------------------------------------
# annotation grammar


def test_parse_basic_line():
    b = D.parse_annotation_line("2 0.25 0.75 0.5 0.2")
    assert (b.class_id, b.cx, b.cy, b.w, b.h) == (2, 0.25, 0.75, 0.5, 0.2)


def test_parse_tolerates_trailing_whitespace():
    b = D.parse_annotation_line("0 0.5 0.5 0.1 0.1   \t")
    assert b.class_id == 0


def test_parse_out_of_range():
    with pytest.raises(DataError):
        D.parse_annotation_line("0 1.5 0.5 0.1 0.1")
    with pytest.raises(DataError):
        D.parse_annotation_line("0 0.5 0.5 0.0 0.1")
    with pytest.raises(DataError):
        D.parse_annotation_line("-1 0.5 0.5 0.1 0.1")


def test_parse_field_count_and_numeric():
    with pytest.raises(DataError):
        D.parse_annotation_line("0 0.5 0.5")
    with pytest.raises(DataError):
        D.parse_annotation_line("0 0.5 x 0.1 0.1")


@given(
    cls=st.integers(0, 9),
    cx=st.floats(0.05, 0.95),
    cy=st.floats(0.05, 0.95),
    w=st.floats(0.01, 0.9),
    h=st.floats(0.01, 0.9),
)
@settings(max_examples=50, deadline=None)
def test_serialize_parse_roundtrip_six_places(cls, cx, cy, w, h):
    box = GroundTruthBox(cls, cx, cy, w, h)
    back = D.parse_annotation_line(D.serialize_annotation(box))
    assert back.class_id == cls
    for a, b in zip((cx, cy, w, h), (back.cx, back.cy, back.w, back.h)):
        assert abs(a - b) <= 5e-7  # six decimal places


def test_annotation_file_roundtrip(tmp_path):
    boxes = [GroundTruthBox(0, 0.5, 0.5, 0.25, 0.125), GroundTruthBox(2, 0.1, 0.9, 0.05, 0.05)]
    p = tmp_path / "a.txt"
    D.write_annotation_file(boxes, p)
    back = D.read_annotation_file(p)
    assert len(back) == 2
    assert back[0].class_id == 0 and back[1].class_id == 2


def test_annotation_error_cites_file_and_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0 0.5 0.5 0.1 0.1\n0 2.0 0.5 0.1 0.1\n")
    with pytest.raises(DataError) as ei:
        D.read_annotation_file(p)
    assert "bad.txt:2" in str(ei.value)


def test_empty_annotation_file_is_defect_free(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    assert D.read_annotation_file(p) == []


# ---------------------------------------------------------------------------
# PGM


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(13, 17), dtype=np.uint8)
    p = tmp_path / "x.pgm"
    D.write_pgm(p, img)
    np.testing.assert_array_equal(D.read_pgm(p), img)


def test_pgm_reads_commented_header(tmp_path):
    p = tmp_path / "c.pgm"
    payload = bytes(range(6))
    p.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
    img = D.read_pgm(p)
    assert img.shape == (2, 3)
    assert img.tobytes() == payload


def test_pgm_rejects_other_formats(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\n")
    with pytest.raises(FileFormatError):
        D.read_pgm(p)
    q = tmp_path / "trunc.pgm"
    q.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(FileFormatError):
        D.read_pgm(q)


def test_pgm_missing_file():
    with pytest.raises(DatasetIOError):
        D.read_pgm("/nonexistent/dir/x.pgm")


# ---------------------------------------------------------------------------
# synthesis


def _tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_generation_deterministic(tmp_path):
    spec = SynthSpec(image_size=64, image_count=10, seed=7)
    D.generate_synthetic_dataset(spec, tmp_path / "a")
    D.generate_synthetic_dataset(spec, tmp_path / "b")
    a = _tree_bytes(tmp_path / "a")
    b = _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 21  # 10 images + 10 labels + splits
    for k in a:
        assert a[k] == b[k], f"{k} differs between runs"


def test_generated_boxes_respect_class_constraints(tmp_path):
    spec = SynthSpec(image_size=64, image_count=40, seed=3)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    size = spec.image_size
    seen = set()
    for rec in index.records:
        for b in D.read_annotation_file(rec.label_path):
            seen.add(b.class_id)
            assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= 1 + 1e-9
            assert 0 <= b.cy - b.h / 2 and b.cy + b.h / 2 <= 1 + 1e-9
            long_side = max(b.w, b.h) * size
            short_side = min(b.w, b.h) * size
            if b.class_id == 0:
                assert long_side / short_side >= 6.0
            elif b.class_id == 1:
                assert (b.w * size) * (b.h * size) <= 0.015 * size * size + 1e-9
            else:
                assert long_side / short_side <= 1.6 + 1e-9
    assert seen == {0, 1, 2}


def test_generated_class_counts_balanced(tmp_path):
    spec = SynthSpec(image_size=64, image_count=50, seed=11)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    counts = {0: 0, 1: 0, 2: 0}
    empty = 0
    for rec in index.records:
        boxes = D.read_annotation_file(rec.label_path)
        if not boxes:
            empty += 1
        for b in boxes:
            counts[b.class_id] += 1
    assert max(counts.values()) - min(counts.values()) <= 1
    assert empty == 10  # exact 20% spacing


def test_streak_blob_separable_by_aspect_ratio(tmp_path):
    spec = SynthSpec(image_size=64, image_count=60, seed=5)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    for rec in index.records:
        for b in D.read_annotation_file(rec.label_path):
            ar = max(b.w, b.h) / min(b.w, b.h)
            predicted_streak = ar >= 4.0
            if b.class_id == 0:
                assert predicted_streak
            elif b.class_id == 1:
                assert not predicted_streak


def test_diagonal_streaks_flag(tmp_path):
    spec = SynthSpec(image_size=64, image_count=40, seed=9, diagonal_streaks=True)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    ars = []
    for rec in index.records:
        for b in D.read_annotation_file(rec.label_path):
            if b.class_id == 0:
                ars.append(max(b.w, b.h) / min(b.w, b.h))
    # with diagonal orientations enabled, some streak boxes go near-square
    assert any(a < 2.0 for a in ars) and any(a >= 6.0 for a in ars)


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(image_size=60)
    with pytest.raises(ConfigError):
        SynthSpec(image_count=0)
    with pytest.raises(ConfigError):
        SynthSpec(defect_free_rate=1.0)


def test_split_totals_200(tmp_path):
    spec = SynthSpec(image_size=64, image_count=200, seed=42)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    by = {s: len(index.subset(s)) for s in D.SPLITS}
    assert by == {"train": 160, "val": 20, "test": 20}


# ---------------------------------------------------------------------------
# stratified split


def test_split_pure_function_of_inputs():
    strata = ["a"] * 30 + ["b"] * 50 + ["c"] * 20
    s1 = D.stratified_split(strata, 123)
    s2 = D.stratified_split(strata, 123)
    s3 = D.stratified_split(strata, 124)
    assert s1 == s2
    assert s1 != s3  # different seed reshuffles


def test_split_exact_global_counts():
    rng = np.random.default_rng(1)
    for n in (10, 37, 100, 250):
        strata = [str(rng.integers(0, 4)) for _ in range(n)]
        out = D.stratified_split(strata, 7)
        assert out.count("val") == round(0.1 * n)
        assert out.count("test") == round(0.1 * n)
        assert len(out) == n


def test_split_stratification_proportional():
    strata = ["a"] * 100 + ["b"] * 100
    out = D.stratified_split(strata, 0)
    for tag, lo, hi in (("val", 9, 11), ("test", 9, 11)):
        a = sum(1 for s, t in zip(strata, out) if s == "a" and t == tag)
        b = sum(1 for s, t in zip(strata, out) if s == "b" and t == tag)
        assert lo <= a <= hi and lo <= b <= hi


# ---------------------------------------------------------------------------
# letterboxing


def test_letterbox_identity_square():
    rng = np.random.default_rng(2)
    img = rng.random((32, 32))
    out, tf = D.letterbox(img, 32)
    np.testing.assert_array_equal(out, img)
    assert (tf.scale, tf.pad_x, tf.pad_y) == (1.0, 0, 0)
    b = GroundTruthBox(0, 0.3, 0.6, 0.2, 0.1)
    bb = tf.apply_box(b)
    assert (bb.cx, bb.cy, bb.w, bb.h) == (0.3, 0.6, 0.2, 0.1)


def test_letterbox_wide_image_pads_rows():
    img = np.linspace(0, 1, 200 * 100).reshape(100, 200)  # 200 wide, 100 tall
    out, tf = D.letterbox(img, 100)
    assert out.shape == (100, 100)
    assert tf.scale == 0.5 and tf.pad_y == 25 and tf.pad_x == 0
    pad = D.PAD_GRAY / 255.0
    np.testing.assert_array_equal(out[:25], pad)
    np.testing.assert_array_equal(out[75:], pad)
    full = GroundTruthBox(0, 0.5, 0.5, 1.0, 1.0)
    bb = tf.apply_box(full)
    assert abs(bb.h - 0.5) < 1e-12 and abs(bb.w - 1.0) < 1e-12
    assert abs(bb.cy - 0.5) < 1e-12


@given(
    w=st.integers(20, 120),
    h=st.integers(20, 120),
    cx=st.floats(0.2, 0.8),
    cy=st.floats(0.2, 0.8),
    bw=st.floats(0.05, 0.3),
    bh=st.floats(0.05, 0.3),
)
@settings(max_examples=40, deadline=None)
def test_letterbox_box_roundtrip(w, h, cx, cy, bw, bh):
    img = np.zeros((h, w))
    _, tf = D.letterbox(img, 64)
    b = GroundTruthBox(1, cx, cy, bw, bh)
    back = tf.invert_box(tf.apply_box(b))
    for a, r in zip((cx, cy, bw, bh), (back.cx, back.cy, back.w, back.h)):
        assert abs(a - r) < 1e-6


def test_bilinear_downscale_constant_preserved():
    img = np.full((40, 60), 0.37)
    out = D.bilinear_resize(img, 20, 30)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_bilinear_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    img = rng.random((8, 6))
    out = D.bilinear_resize(img, 5, 4)
    h, w = img.shape
    for i in range(5):
        for j in range(4):
            sy = (i + 0.5) * h / 5 - 0.5
            sx = (j + 0.5) * w / 4 - 0.5
            y0 = min(max(int(math.floor(sy)), 0), h - 1)
            x0 = min(max(int(math.floor(sx)), 0), w - 1)
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            fy = min(max(sy - y0, 0.0), 1.0)
            fx = min(max(sx - x0, 0.0), 1.0)
            v = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
            assert abs(out[i, j] - v) < 1e-12


# ---------------------------------------------------------------------------
# index + loader


def test_load_index_roundtrip(tmp_path):
    spec = SynthSpec(image_size=64, image_count=12, seed=1)
    written = D.generate_synthetic_dataset(spec, tmp_path / "d")
    loaded = D.load_index(tmp_path / "d")
    assert len(loaded) == len(written) == 12
    assert [r.stem for r in loaded.records] == [r.stem for r in written.records]
    assert [r.split for r in loaded.records] == [r.split for r in written.records]


def test_load_index_missing_label(tmp_path):
    spec = SynthSpec(image_size=64, image_count=3, seed=1)
    D.generate_synthetic_dataset(spec, tmp_path / "d")
    (tmp_path / "d" / "labels" / "img_00001.txt").unlink()
    with pytest.raises(DatasetIOError):
        D.load_index(tmp_path / "d")


def test_iter_samples_shapes_and_range(tmp_path):
    spec = SynthSpec(image_size=64, image_count=6, seed=2)
    index = D.generate_synthetic_dataset(spec, tmp_path / "d")
    n = 0
    for img, boxes, tf in D.iter_samples(index.records, 64):
        assert img.shape == (1, 64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        for b in boxes:
            assert 0.0 <= b.cx <= 1.0 and 0.0 < b.w <= 1.0
        n += 1
    assert n == 6


def test_to_pixels_clamps():
    b = GroundTruthBox(0, 0.02, 0.5, 0.1, 0.2)
    x1, y1, x2, y2 = b.to_pixels(100)
    assert x1 == 0.0  # clamped at the border
    assert abs(x2 - 7.0) < 1e-9
    assert abs(y1 - 40.0) < 1e-9 and abs(y2 - 60.0) < 1e-9
