"""Endpoint error, F1-all, depth-band reports and flow visualization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogflow.flowviz import SEGMENTS, color_wheel, flow_to_rgb, write_flow_ppm
from fogflow.io import read_ppm_bytes
from fogflow.metrics import EvalReport, aggregate, depth_band_report, endpoint_errors, epe, evaluate, f1_all


@pytest.fixture
def fields():
    rng = np.random.default_rng(4)
    return rng.normal(0, 3, (6, 7, 2)), rng.normal(0, 3, (6, 7, 2))


class TestEpe:
    def test_identity(self, fields):
        assert epe(fields[0], fields[0]) == 0.0

    def test_345(self, fields):
        assert epe(fields[0] + [3.0, 4.0], fields[0]) == pytest.approx(5.0, abs=1e-12)

    def test_oracle(self, fields):
        p, g = fields
        ref = np.mean([np.hypot(*(p[i, j] - g[i, j])) for i in range(6) for j in range(7)])
        assert epe(p, g) == pytest.approx(ref, abs=1e-9)

    def test_masked(self, fields):
        p, g = fields
        valid = np.zeros((6, 7), bool)
        valid[1, 2] = True
        assert epe(p, g, valid) == pytest.approx(np.hypot(*(p[1, 2] - g[1, 2])))

    def test_errors(self, fields):
        with pytest.raises(ValueError):
            epe(fields[0], fields[0], np.zeros((6, 7)))
        with pytest.raises(ValueError):
            epe(fields[0], fields[0][:5])


class TestF1:
    def test_identity(self, fields):
        assert f1_all(fields[0], fields[0]) == 0.0

    @pytest.mark.parametrize("gt_u,pred_u,expect", [(100.0, 104.0, 0.0), (10.0, 14.0, 1.0), (10.0, 12.5, 0.0)])
    def test_rule(self, gt_u, pred_u, expect):
        gt = np.zeros((2, 2, 2))
        gt[..., 0] = gt_u
        pred = gt.copy()
        pred[..., 0] = pred_u
        assert f1_all(pred, gt) == expect

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded_by_3px_fraction(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.normal(0, 4, (2, 5, 5, 2))
        assert f1_all(p, g) <= (endpoint_errors(p, g) > 3).mean()


class TestBands:
    def test_uniform_error(self):
        gt = np.zeros((4, 4, 2))
        pred = gt + [0.0, 2.0]
        depth = np.linspace(1, 10, 16).reshape(4, 4)
        rows = depth_band_report(pred, gt, depth, [1, 4, 7, 10])
        assert [r["epe"] for r in rows] == [2.0, 2.0, 2.0]
        assert sum(r["count"] for r in rows) == 16

    def test_single_band_equals_epe(self, fields):
        depth = np.random.default_rng(0).uniform(5, 50, (6, 7))
        rows = depth_band_report(*fields, depth, [5, 50])
        assert rows[0]["epe"] == pytest.approx(epe(*fields))

    def test_empty_band_absent(self, fields):
        rows = depth_band_report(*fields, np.full((6, 7), 3.0), [1, 2, 5])
        assert rows[0]["epe"] is None and rows[0]["count"] == 0

    def test_bad_edges(self, fields):
        with pytest.raises(ValueError):
            depth_band_report(*fields, np.ones((6, 7)), [5, 2])


class TestReport:
    def test_json_roundtrip(self, fields):
        p, g = fields
        nr = np.zeros((6, 7))
        nr[:2] = 1
        rep = evaluate(p, g, nonrigid=nr, depth=np.full((6, 7), 10.0), bands=[5, 20])
        assert EvalReport.from_json(rep.to_json()) == rep
        assert rep.regions["rigid"]["count"] == 28 and rep.regions["nonrigid"]["count"] == 14

    def test_invariants(self):
        with pytest.raises(ValueError):
            EvalReport(-1.0, 0.0, 1)
        with pytest.raises(ValueError):
            EvalReport(1.0, 1.5, 1)

    def test_aggregate_is_pixel_weighted(self):
        agg = aggregate([EvalReport(1.0, 0.0, 10), EvalReport(4.0, 1.0, 30)])
        assert agg.epe == pytest.approx(3.25) and agg.f1_all == pytest.approx(0.75) and agg.count == 40
        with pytest.raises(ValueError):
            aggregate([])


class TestFlowViz:
    def test_wheel(self):
        w = color_wheel()
        assert w.shape == (sum(SEGMENTS), 3) == (55, 3)
        np.testing.assert_array_equal(w[0], [1, 0, 0])
        assert w.min() >= 0 and w.max() <= 1

    def test_zero_flow_is_white(self):
        rgb, _ = flow_to_rgb(np.zeros((3, 3, 2)))
        np.testing.assert_array_equal(rgb, 1.0)

    def test_saturated_and_in_range(self):
        flow = np.zeros((1, 2, 2))
        flow[0, 0] = (1.0, 0.0)
        flow[0, 1] = (5.0, 0.0)
        rgb, m = flow_to_rgb(flow, max_rad=2.0)
        assert m == 2.0 and 0 <= rgb.min() and rgb.max() <= 1
        assert np.all(rgb[0, 1] <= 0.75 + 1e-12)

    def test_ppm_records_normalizer(self, tmp_path):
        flow = np.random.default_rng(1).normal(size=(4, 4, 2))
        m = write_flow_ppm(tmp_path / "f.ppm", flow)
        _, comments = read_ppm_bytes(tmp_path / "f.ppm")
        assert m == pytest.approx(np.hypot(flow[..., 0], flow[..., 1]).max())
        assert any(f"max_rad={m:.9g}" in c for c in comments)
