import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpforge import toy
from fpforge.binarize import classical_binarize
from fpforge.data import Dataset
from fpforge.errors import ExtractionError, StatsError
from fpforge.minutiae import (BIFURCATION, ENDING, STAT_ROWS, crossing_number, crossing_number_map, extract_minutiae,
                              fingerprint_stats, minutiae_per_megapixel, thin, write_minutiae_csv)


def kinds(ms):
    return sorted(m.kind for m in ms)


def line(h=64, w=64, y=32, x0=16, x1=48):
    b = np.zeros((h, w), np.uint8)
    b[y, x0:x1] = 1
    return b


def test_crossing_number_of_points():
    skel = line()
    assert crossing_number(skel, 32, 16) == 1
    assert crossing_number(skel, 32, 30) == 2
    cn = crossing_number_map(skel)
    assert cn[32, 16] == 1 and cn[32, 47] == 1 and cn[0, 0] == 0


def test_line_has_two_endings():
    ms = extract_minutiae(line())
    assert kinds(ms) == [ENDING, ENDING]


def test_ending_direction_points_outward():
    ms = sorted(extract_minutiae(line()), key=lambda m: m.x)
    assert math.cos(ms[0].theta) < -0.9
    assert math.cos(ms[1].theta) > 0.9


def test_t_junction():
    b = line()
    b[33:52, 32] = 1
    ms = extract_minutiae(b)
    assert sum(m.kind == BIFURCATION for m in ms) == 1
    assert sum(m.kind == ENDING for m in ms) == 3


def test_border_and_mask_margin():
    b = line(x0=2, x1=40)
    ms = extract_minutiae(b)
    assert [m.x for m in ms] == [39]
    mask = np.zeros_like(b, bool)
    mask[:, :30] = True
    assert extract_minutiae(b, mask=mask) == []


def test_spurs_are_pruned():
    b = line()
    b[33:35, 30] = 1  # two-pixel spur
    assert kinds(extract_minutiae(b)) == [ENDING, ENDING]


def test_non_binary_rejected():
    with pytest.raises(ExtractionError):
        extract_minutiae(np.full((8, 8), 0.5))
    with pytest.raises(ExtractionError):
        thin(np.zeros((2, 8, 8)))


def test_thin_thick_line():
    b = np.zeros((40, 60), np.uint8)
    b[18:23, 10:50] = 1
    sk = thin(b)
    assert sk[:, 20:40].sum(0).max() == 1


def test_minutiae_csv(tmp_path):
    p = write_minutiae_csv(tmp_path / "m.csv", extract_minutiae(line()))
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y,theta,kind,quality"
    assert len(lines) == 3


def test_per_megapixel_arithmetic():
    assert minutiae_per_megapixel(10.0, 0.5) == 20.0
    assert minutiae_per_megapixel(10.0, 0.0) == 0.0


def test_stats_rows(tmp_path):
    ds = toy.make_corpus(tmp_path, 3, 1, size=96, seed=2)
    s = fingerprint_stats(ds, nfiq2=None)
    assert [r[0] for r in s.rows()] == list(STAT_ROWS)
    assert s.n_images == 3
    assert s.total_count[0] == s.ending_count[0] + s.bifurcation_count[0]
    assert s.total_count[0] > 0
    out = s.to_csv(tmp_path / "s.csv").read_text()
    assert "Minutiae per Megapixel" in out


def test_stats_empty(tmp_path):
    with pytest.raises(StatsError):
        fingerprint_stats(Dataset(tmp_path, []))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_total_is_sum_of_kinds(seed):
    ridge = classical_binarize(toy.master_image(96, seed=seed, period=7.0))
    ms = extract_minutiae(ridge)
    n_end = sum(m.kind == ENDING for m in ms)
    n_bif = sum(m.kind == BIFURCATION for m in ms)
    assert len(ms) == n_end + n_bif
    assert all(0 <= m.quality <= 100 for m in ms)


def test_ridge_break_adds_two_endings():
    b = np.zeros((80, 80), np.uint8)
    b[16:64:8, 12:68] = 1  # parallel ridges
    base = extract_minutiae(b)
    broken = b.copy()
    broken[40, 38:41] = 0
    after = extract_minutiae(broken)
    assert sum(m.kind == ENDING for m in after) - sum(m.kind == ENDING for m in base) == 2
    assert sum(m.kind == BIFURCATION for m in after) == sum(m.kind == BIFURCATION for m in base)


def test_blank_images_are_degenerate(tmp_path):
    from fpforge.data import ImpressionRecord, write_image

    recs = []
    for k in range(2):
        write_image(tmp_path / f"b{k}.png", np.ones((64, 64)))
        recs.append(ImpressionRecord(f"f{k}", 0, "live", True, "train", f"b{k}.png", 64, 64))
    s = fingerprint_stats(Dataset(tmp_path, recs), nfiq2=None)
    assert s.total_count == (0.0, 0.0) and s.area_megapixels[0] == 0.0
    assert s.minutiae_per_megapixel == 0.0 and s.degenerate_area


def test_stats_invariant_to_duplication(tmp_path):
    ds = toy.make_corpus(tmp_path, 3, 1, size=96, seed=4)
    twice = Dataset(ds.root, [r for r in ds.records] + [r.__class__(r.finger_id + "_dup", r.impression_id, r.material,
                                                                  r.is_live, r.split, r.image_path, r.width, r.height)
                                                      for r in ds.records])
    a, b = fingerprint_stats(ds, nfiq2=None), fingerprint_stats(twice, nfiq2=None)
    for (_, m1, s1), (_, m2, s2) in zip(a.rows()[:5], b.rows()[:5]):
        assert m1 == pytest.approx(m2) and s1 == pytest.approx(s2)
