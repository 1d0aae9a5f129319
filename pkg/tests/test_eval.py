import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stepdiff.eval import (EmptyEvaluation, daily_means, metrics, per_slice_csv, persistence_forecast,
                           report_json, station_mask, stratified, text_table, warning_counts, warning_eval)


class TestMetrics:
    def test_single_entry(self):
        r = metrics([40.0], [50.0])
        assert (r.mae, r.rmse, r.mape, r.n) == (10.0, 10.0, 0.2, 1)

    def test_two_entries(self):
        r = metrics([40.0, 120.0], [50.0, 100.0])
        assert r.mae == 15.0
        assert r.rmse == pytest.approx(math.sqrt(250.0), abs=1e-12)
        assert r.mape == pytest.approx(0.2)

    def test_identical(self):
        x = np.random.default_rng(0).uniform(1, 9, (4, 3, 3))
        r = metrics(x, x)
        assert r.mae == r.rmse == r.mape == 0.0

    def test_mask_and_zero_truth(self):
        r = metrics([1.0, 5.0, 9.0], [0.0, 4.0, 100.0], [1, 1, 0])
        assert r.n == 2 and r.n_mape == 1
        assert r.mae == 1.0 and r.mape == pytest.approx(0.25)
        assert math.isnan(metrics([1.0], [0.0]).mape)

    def test_errors(self):
        with pytest.raises(EmptyEvaluation):
            metrics([1.0, 2.0], [1.0, 2.0], [0, 0])
        with pytest.raises(ValueError):
            metrics([1.0], [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 60))
    def test_rmse_dominates_and_permutation(self, seed, n):
        rng = np.random.default_rng(seed)
        p, t = rng.normal(0, 10, (2, n))
        m = rng.random(n) < 0.7
        m[0] = True
        r = metrics(p, t, m)
        assert r.rmse >= r.mae - 1e-12 and r.mae >= 0
        perm = rng.permutation(n)
        r2 = metrics(p[perm], t[perm], m[perm])
        assert r2.mae == pytest.approx(r.mae, rel=1e-12) and r2.rmse == pytest.approx(r.rmse, rel=1e-12)


class TestStratified:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.truth = rng.uniform(10, 50, (24, 2, 2))
        self.cov = np.array([[0.1, 0.3], [0.5, 0.9]])

    def test_routing_by_hour(self):
        pred = self.truth.copy()
        pred[:6] += 2.0
        s = stratified(pred, self.truth, np.ones(pred.shape, bool), self.cov)
        assert s["time"]["00-06"].mae == pytest.approx(2.0)
        assert all(s["time"][k].mae == 0 for k in ("06-12", "12-18", "18-24"))

    def test_coverage_routing(self):
        pred = self.truth.copy()
        pred[:, 0, 0] += 1.0  # coverage 0.1
        pred[:, 1, 1] += 3.0  # coverage 0.9
        s = stratified(pred, self.truth, np.ones(pred.shape, bool), self.cov)
        c = s["coverage"]
        assert c["[0.0,0.2]"].mae == pytest.approx(1.0) and c["(0.6,1.0]"].mae == pytest.approx(3.0)
        assert c["(0.2,0.4]"].mae == 0 and c["(0.4,0.6]"].mae == 0

    def test_bucket_boundaries(self):
        cov = np.array([[0.2, 0.4], [0.6, 0.0]])
        s = stratified(self.truth, self.truth, np.ones(self.truth.shape, bool), cov)
        assert {k: v.n for k, v in s["coverage"].items()} == {"[0.0,0.2]": 48, "(0.2,0.4]": 24, "(0.4,0.6]": 24}

    def test_uniform_errors_equal_global(self):
        pred = self.truth + 1.5
        m = np.ones(pred.shape, bool)
        g = metrics(pred, self.truth, m)
        s = stratified(pred, self.truth, m, self.cov)
        for group in s.values():
            for r in group.values():
                assert r.mae == pytest.approx(g.mae) and r.rmse == pytest.approx(g.rmse)

    def test_empty_bucket_absent_and_start_hour(self):
        m = np.zeros(self.truth.shape, bool)
        m[:6] = True
        s = stratified(self.truth, self.truth, m, self.cov)
        assert list(s["time"]) == ["00-06"]
        s = stratified(self.truth, self.truth, m, self.cov, start_hour=12)
        assert list(s["time"]) == ["12-18"]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_recombination(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 60, (30, 3, 3))
        p = t + rng.normal(0, 5, t.shape)
        m = rng.random(t.shape) < 0.5
        m[0, 0, 0] = True
        cov = rng.random((3, 3))
        g = metrics(p, t, m)
        s = stratified(p, t, m, cov)
        for group in s.values():
            n = sum(r.n for r in group.values())
            assert n == g.n
            assert sum(r.mae * r.n for r in group.values()) / n == pytest.approx(g.mae, rel=1e-10)


class TestWarning:
    def test_confusion_arithmetic(self):
        r = warning_counts(4, 1, 0)
        assert r.recall == 1.0 and r.precision == 0.8
        assert r.f1 == pytest.approx(8 / 9)
        assert round(r.f1, 2) == 0.89

    def test_from_daily_means(self):
        truth = [30, 26, 40, 25, 10, 12]
        pred = [31, 27, 28, 26, 25.5, 3]
        r = warning_eval(pred, truth)
        assert (r.tp, r.fp, r.fn, r.tn) == (4, 1, 0, 1)
        assert r.f1 == pytest.approx(8 / 9)

    def test_identical(self):
        d = [10, 30, 50]
        r = warning_eval(d, d)
        assert r.recall == r.precision == r.f1 == 1.0

    def test_skipped_days(self):
        r = warning_eval([30, 30, 30], [30, 0, 30], valid=[True, False, True])
        assert r.skipped_days == 1 and r.tp == 2

    def test_daily_means(self):
        v = np.zeros((48, 2, 1))
        v[:24, 0] = 10.0
        v[:24, 1] = 30.0
        m = np.ones(v.shape, bool)
        m[24:] = False
        means, valid = daily_means(v, m)
        np.testing.assert_allclose(means, [20.0, 0.0])
        np.testing.assert_array_equal(valid, [True, False])


def test_station_mask():
    m = station_mask((5, 10, 10), 4, seed=1)
    assert m.sum() == 20 and (m == m[0]).all()
    np.testing.assert_array_equal(m, station_mask((5, 10, 10), 4, seed=1))


class TestPersistence:
    def test_last_observed_value(self):
        v = np.zeros((3, 1, 2))
        m = np.zeros((3, 1, 2), bool)
        v[0, 0, 0], m[0, 0, 0] = 5.0, True
        v[2, 0, 0], m[2, 0, 0] = 7.0, True
        v[1, 0, 1], m[1, 0, 1] = 3.0, True
        out = persistence_forecast(v, m, 4)
        assert out.shape == (4, 1, 2)
        np.testing.assert_array_equal(out[:, 0, 0], 7.0)
        np.testing.assert_array_equal(out[:, 0, 1], 3.0)

    def test_unseen_cells_use_last_slice_mean(self):
        v = np.zeros((2, 2, 2))
        m = np.zeros((2, 2, 2), bool)
        v[1, 0, 0], v[1, 0, 1] = 4.0, 8.0
        m[1, 0, 0] = m[1, 0, 1] = True
        out = persistence_forecast(v, m, 1)
        np.testing.assert_array_equal(out[0], [[4.0, 8.0], [6.0, 6.0]])

    def test_empty_history(self):
        assert not persistence_forecast(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), 2).any()


class TestFormats:
    def test_report_json_nan_to_null(self):
        out = json.loads(report_json({"a": metrics([1.0], [0.0])}))
        assert out["a"]["mape"] is None and out["a"]["mae"] == 1.0

    def test_text_table_aligned(self):
        t = text_table([{"name": "x", "mae": 1.0}, {"name": "longer", "mae": 12.5}])
        lines = t.splitlines()
        assert lines[0].split() == ["name", "mae"]
        assert len({len(l) for l in lines[1:]}) == 1
        assert lines[3].endswith("12.5000")

    def test_per_slice_csv(self):
        t = np.array([[[50.0]], [[10.0]]])
        p = np.array([[[40.0]], [[10.0]]])
        rows = per_slice_csv(p, t, np.array([[[True]], [[False]]])).splitlines()
        assert rows == ["slice,metric,value", "0,mae,10", "0,rmse,10", "0,mape,0.2"]
