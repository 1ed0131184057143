import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import boundary_by_neighbours, dice_by_counting, hd95_brute_force
from pgseg.errors import ShapeError
from pgseg.metrics import (
    MetricReport,
    boundary,
    dice_score,
    evaluate_case,
    hd95,
    mdice,
    summarize,
    write_csv,
)
from pgseg.vocab import ORGANS

masks = arrays(np.bool_, (9, 9))


class TestDice:
    def test_identical(self):
        m = np.zeros((5, 5), int)
        m[1:3, 1:4] = 2
        assert dice_score(m, m, 2) == 1.0

    def test_both_empty(self):
        z = np.zeros((4, 4), int)
        assert dice_score(z, z, 3) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), int)
        b = a.copy()
        a[0, 0], b[3, 3] = 1, 1
        assert dice_score(a, b, 1) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(a=arrays(np.int8, (6, 7), elements=st.integers(0, 3)), b=arrays(np.int8, (6, 7), elements=st.integers(0, 3)))
    def test_against_counting(self, a, b):
        for c in range(4):
            assert dice_score(a, b, c) == dice_by_counting(a, b, c)

    def test_mdice_skips_background(self):
        t = np.zeros((4, 4), int)
        p = np.ones((4, 4), int)
        # background wrong everywhere, organ 1 wrong, organs 2..8 absent in both
        assert mdice(p, t) == pytest.approx(7 / 8)


class TestBoundary:
    @settings(max_examples=60, deadline=None)
    @given(m=masks)
    def test_against_neighbours(self, m):
        got = sorted(zip(*np.nonzero(boundary(m))))
        assert got == sorted(boundary_by_neighbours(m))

    def test_full_image_edge_counts(self):
        b = boundary(np.ones((4, 4), bool))
        assert b.sum() == 12


class TestHD95:
    def test_identical(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 3:5] = True
        assert hd95(m, m) == 0.0

    def test_single_pixels_three_apart(self):
        a = np.zeros((16, 16), bool)
        b = a.copy()
        a[5, 4], b[5, 7] = True, True
        assert hd95(a, b) == 3.0

    def test_empty_is_nan(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        b[1, 1] = True
        assert math.isnan(hd95(a, b)) and math.isnan(hd95(b, a)) and math.isnan(hd95(a, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hd95(np.ones((3, 3)), np.ones((3, 4)))

    @settings(max_examples=60, deadline=None)
    @given(a=masks, b=masks)
    def test_against_brute_force(self, a, b):
        got, ref = hd95(a, b), hd95_brute_force(a, b)
        if math.isnan(ref):
            assert math.isnan(got)
        else:
            assert abs(got - ref) <= 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((12, 12)) < 0.3, rng.random((12, 12)) < 0.5
        assert hd95(a, b) == hd95(b, a)

    def test_outlier_robust(self):
        # one far stray pixel among many boundary points barely moves HD95
        a = np.zeros((64, 64), bool)
        a[10:40, 10:40] = True
        b = a.copy()
        b[62, 62] = True
        assert hd95(a, b) == 0.0


class TestReports:
    def _label(self, rng):
        return rng.integers(0, 9, (20, 20)).astype(np.uint8)

    def test_summary_layout(self):
        rng = np.random.default_rng(0)
        reports = [evaluate_case(self._label(rng), self._label(rng), f"c{i}") for i in range(3)]
        s = summarize(reports)
        assert list(s)[:10] == [
            "Spleen", "Kidney(R)", "Kidney(L)", "Gallbladder", "Liver", "Stomach", "Aorta", "Pancreas", "mDice", "HD95",
        ]
        assert s["mDice"] == pytest.approx(np.mean([r.mdice for r in reports]))
        assert s["n_cases"] == 3

    def test_undefined_hd95_counted(self):
        lab = np.zeros((10, 10), np.uint8)
        lab[2:5, 2:5] = 5
        rep = evaluate_case(lab, lab, "x")
        assert rep.hd95_undefined == 7
        assert rep.hd95 == 0.0
        s = summarize([rep])
        assert s["hd95_undefined"] == 7 and s["HD95"] == 0.0

    def test_all_undefined(self):
        z = np.zeros((5, 5), np.uint8)
        s = summarize([evaluate_case(z, z, "empty")])
        assert s["HD95"] is None and s["mDice"] == 1.0

    def test_csv(self, tmp_path):
        rep = MetricReport("a", {o: 0.5 for o in ORGANS}, {o: math.nan for o in ORGANS})
        text = write_csv([rep], tmp_path / "m.csv").read_text().splitlines()
        assert text[0] == "case_id,organ,dice,hd95"
        assert text[1] == "a,aorta,0.500000,"
        assert len(text) == 9

    def test_empty_summary(self):
        with pytest.raises(ValueError):
            summarize([])
