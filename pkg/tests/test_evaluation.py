import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from recureg.evaluation import (
    EmptyReportError,
    bad_pixel_report,
    endpoint_error,
    format_table,
    occlusion_mask,
    read_records,
    write_records,
)

FIXTURES = Path(__file__).parent / "fixtures"


def square_scene(h=40, w=60, x0=25, x1=40, y0=10, y1=30, disp=10):
    """Foreground square at disparity ``disp`` over a zero-disparity background.

    Left view: the square covers columns [x0, x1). Right view: it sits at
    [x0 - disp, x1 - disp) with right-to-left disparity ``-disp``.
    """
    dl = np.zeros((h, w))
    dl[y0:y1, x0:x1] = disp
    dr = np.zeros((h, w))
    dr[y0:y1, x0 - disp:x1 - disp] = -disp
    return dl, dr


class TestReport:
    def test_perfect(self):
        gt = np.random.default_rng(0).uniform(0, 30, size=(5, 7))
        r = bad_pixel_report(gt, gt)
        assert (r.bad1, r.bad2, r.bad5, r.max_error) == (0, 0, 0, 0)
        assert r.evaluated_pixels == 35

    def test_uniform_offset(self):
        gt = np.full((4, 4), 7.0)
        r = bad_pixel_report(gt + 3, gt)
        assert (r.bad1, r.bad2, r.bad5, r.max_error) == (1.0, 1.0, 0.0, 3.0)

    def test_field_input_uses_dx(self):
        gt = np.zeros((3, 3))
        pred = np.zeros((3, 3, 2))
        pred[..., 1] = 50
        assert bad_pixel_report(pred, gt).max_error == 0

    def test_hand_counted(self):
        gt = np.zeros((2, 5))
        pred = np.array([[0.5, 1.5, 2.5, 6.0, 0.0], [1.0, 2.0, 5.0, -7.0, 0.0]])
        r = bad_pixel_report(pred, gt)
        # errors: .5 1.5 2.5 6 0 | 1 2 5 7 0   (thresholds are strict)
        assert (r.bad1, r.bad2, r.bad5) == (6 / 10, 4 / 10, 2 / 10)
        assert r.max_error == 7.0
        assert r.epe == pytest.approx(25.5 / 10)

    def test_holes_excluded(self):
        gt = np.array([[0.0, np.inf, np.inf], [0.0, 0.0, np.inf]])
        pred = np.array([[3.0, 100.0, -100.0], [0.0, 0.0, 0.0]])
        r = bad_pixel_report(pred, gt)
        assert r.evaluated_pixels == 3
        assert (r.bad1, r.bad2, r.bad5) == (1 / 3, 1 / 3, 0.0)
        assert r.max_error == 3.0

    def test_non_finite_prediction_counts_bad(self):
        r = bad_pixel_report(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
        assert r.bad5 == 0.5 and r.max_error == np.inf

    def test_all_holes(self):
        with pytest.raises(EmptyReportError):
            bad_pixel_report(np.zeros((2, 2)), np.full((2, 2), np.inf))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            bad_pixel_report(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_policy(self):
        gt = np.zeros((2, 2))
        pred = np.array([[0.0, 0.0], [9.0, 0.0]])
        occ = np.array([[False, False], [True, False]])
        a = bad_pixel_report(pred, gt, "all", occlusion=occ)
        b = bad_pixel_report(pred, gt, "non_occluded", occlusion=occ)
        assert (a.bad1, a.evaluated_pixels, a.occlusion_fraction) == (0.25, 4, 0.25)
        assert (b.bad1, b.evaluated_pixels) == (0.0, 3)
        with pytest.raises(ValueError):
            bad_pixel_report(pred, gt, "non_occluded")
        with pytest.raises(ValueError):
            bad_pixel_report(pred, gt, "some")

    def test_policy_from_right_view(self):
        dl, dr = square_scene()
        r = bad_pixel_report(dl, dl, "non_occluded", d_right=dr)
        assert r.evaluated_pixels == 40 * 60 - 20 * 10

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (6, 5), elements=st.floats(-50, 50)),
           arrays(np.float64, (6, 5), elements=st.floats(-50, 50)),
           arrays(np.bool_, (6, 5)))
    def test_properties(self, pred, gt, occ):
        occ[0, 0] = False  # keep at least one pixel
        r = bad_pixel_report(pred, gt)
        assert 0 <= r.bad5 <= r.bad2 <= r.bad1 <= 1
        m = bad_pixel_report(pred[:, ::-1] * -1, gt[:, ::-1] * -1)
        assert (m.bad1, m.bad2, m.bad5, m.max_error) == (r.bad1, r.bad2, r.bad5, r.max_error)
        n = bad_pixel_report(pred, gt, "non_occluded", occlusion=occ)
        assert n.evaluated_pixels <= r.evaluated_pixels


class TestOcclusion:
    def test_consistent_constant(self):
        mask, frac = occlusion_mask(np.full((5, 20), 3.0), np.full((5, 20), -3.0))
        assert frac == 0 and not mask.any()

    def test_all_occluded(self):
        mask, frac = occlusion_mask(np.full((4, 4), 5.0), np.zeros((4, 4)), tol=1)
        assert frac == 1 and mask.all()

    def test_square_band(self):
        dl, dr = square_scene(x0=25, disp=10)
        mask, frac = occlusion_mask(dl, dr)
        expected = np.zeros_like(mask)
        # background the square hides in the right view: columns [x0 - 10, x0)
        expected[10:30, 15:25] = True
        np.testing.assert_array_equal(mask, expected)
        assert frac == pytest.approx(200 / 2400)

    def test_holes_are_occluded(self):
        dl = np.zeros((2, 2))
        dl[0, 0] = np.inf
        mask, _ = occlusion_mask(dl, np.zeros((2, 2)))
        assert mask.tolist() == [[True, False], [False, False]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            occlusion_mask(np.zeros((2, 2)), np.zeros((2, 3)))


class TestOutput:
    def test_table_and_records(self, tmp_path):
        gt = np.zeros((2, 2))
        rows = [("cones", bad_pixel_report(gt + 3, gt)), ("teddy", bad_pixel_report(gt, gt))]
        table = format_table(rows)
        lines = table.splitlines()
        assert len(lines) == 3
        assert lines[1].split()[:4] == ["cones", "100.0%", "100.0%", "0.0%"]
        path = tmp_path / "r.jsonl"
        write_records(rows, path)
        recs = read_records(path)
        assert [r["name"] for r in recs] == ["cones", "teddy"]
        assert set(recs[0]) == {"name", "bad1", "bad2", "bad5", "max", "occl"}
        assert recs[0]["max"] == 3.0

    def test_endpoint_error(self):
        pred = np.zeros((2, 2, 2))
        truth = np.zeros((2, 2, 2))
        truth[..., 0] = 3
        truth[..., 1] = 4
        assert endpoint_error(pred, truth) == 5.0

    def test_reference_fixture(self):
        rows = json.loads((FIXTURES / "reference_rows.json").read_text())
        for row in rows["rows"]:
            assert row["bad1"] >= row["bad2"] >= row["bad5"]
