import json

import numpy as np
import pytest

from stepdiff.grid_data import GridSpec, MaskedField, coverage_stats, load_field
from stepdiff.synth import (FleetConfig, SynthConfig, gen_fleet_mask, gen_ground_truth, make_observed,
                            source_at, write_scenario)


def centroid_x(v):
    xs = np.arange(v.shape[0])[:, None]
    return float((xs * v).sum() / v.sum())


class TestGroundTruth:
    def test_identity_dynamics(self):
        f = gen_ground_truth(SynthConfig(L=20, K=0.0, seed=3))
        assert f.mask.all()
        for l in range(1, 20):
            np.testing.assert_array_equal(f.values[l], f.values[0])

    def test_point_source_growth(self):
        S = np.zeros((10, 10))
        S[4, 5] = 0.002
        f = gen_ground_truth(SynthConfig(L=6, K=0.0, source=S.tolist(), seed=1))
        np.testing.assert_allclose(np.diff(f.values[:, 4, 5]), 3600 * 0.002, rtol=1e-12)
        other = np.delete(f.values.reshape(6, -1), 45, axis=1)
        np.testing.assert_allclose(other, np.broadcast_to(other[0], other.shape), atol=1e-9)

    def test_drift_follows_wind_sign_stable_direction(self):
        # negative P_x is the stable (upwind) orientation of the stencil: content moves to -x
        f = gen_ground_truth(SynthConfig(L=8, K=5.0, P_x=-0.05, init_mode="hotspot", base_level=10.0))
        c = [centroid_x(f.values[l]) for l in range(8)]
        assert all(b < a for a, b in zip(c, c[1:]))

    def test_positive_wind_drifts_plus_x_over_short_slices(self):
        grid = GridSpec(slice_length=60.0)
        f = gen_ground_truth(SynthConfig(grid=grid, L=5, K=5.0, P_x=2.0, init_mode="hotspot", base_level=10.0))
        c = [centroid_x(f.values[l]) for l in range(5)]
        assert all(b > a for a, b in zip(c, c[1:]))

    def test_nonnegative_and_deterministic(self):
        cfg = SynthConfig(L=30, K=5.0, P_x=-1.0, source=0.01, source_diurnal=0.5, seed=4)
        a, b = gen_ground_truth(cfg), gen_ground_truth(cfg)
        assert a == b and a.values.min() >= 0.0

    def test_diurnal_source(self):
        cfg = SynthConfig(source=0.01, source_diurnal=0.5)
        assert source_at(cfg, 15).max() == pytest.approx(0.015)
        assert source_at(cfg, 3).max() == pytest.approx(0.005)

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(K=-1.0)
        with pytest.raises(ValueError):
            SynthConfig(obs_noise_sigma=-0.1)
        with pytest.raises(ValueError):
            SynthConfig(init_mode="bogus")


class TestFleet:
    def test_single_route_coverage(self):
        m = gen_fleet_mask(FleetConfig(n_vehicles=1, mode="bus-route", route_length=10, seed=2), GridSpec(), 48)
        s, _ = coverage_stats(MaskedField(np.zeros(m.shape), m))
        np.testing.assert_allclose(s, 0.1)

    def test_inactive_hours_empty(self):
        cfg = FleetConfig(n_vehicles=5, active_hours=range(6, 24), seed=1)
        m = gen_fleet_mask(cfg, GridSpec(), 48)
        hours = np.arange(48) % 24
        assert not m[hours < 6].any() and m[hours >= 6].any()

    def test_bus_route_is_cyclic(self):
        cfg = FleetConfig(n_vehicles=2, mode="bus-route", route_period=3, route_length=9, seed=5)
        m = gen_fleet_mask(cfg, GridSpec(), 12)
        np.testing.assert_array_equal(m[:3], m[3:6])
        np.testing.assert_array_equal(m[:3], m[9:12])

    @pytest.mark.parametrize("mode", ["bus-route", "free-car"])
    def test_deterministic(self, mode):
        cfg = FleetConfig(n_vehicles=3, mode=mode, seed=9)
        np.testing.assert_array_equal(gen_fleet_mask(cfg, GridSpec(), 30), gen_fleet_mask(cfg, GridSpec(), 30))

    def test_validation(self):
        with pytest.raises(ValueError):
            FleetConfig(n_vehicles=0)
        with pytest.raises(ValueError):
            FleetConfig(mode="tram")


class TestObserved:
    def test_noise_free_equals_truth(self):
        truth = gen_ground_truth(SynthConfig(L=5, seed=1))
        m = np.random.default_rng(0).random(truth.values.shape) < 0.5
        obs = make_observed(truth, m, 0.0, 3)
        np.testing.assert_array_equal(obs.values[m], truth.values[m])
        assert np.all(obs.values[~m] == 0.0)

    def test_empty_mask_all_sentinel(self):
        truth = gen_ground_truth(SynthConfig(L=3, seed=1))
        obs = make_observed(truth, np.zeros(truth.values.shape, bool), 1.0, 3)
        assert not obs.values.any() and not obs.mask.any()

    def test_noise_statistics(self):
        truth = MaskedField(np.full((100, 10, 10), 50.0), np.ones((100, 10, 10), bool))
        obs = make_observed(truth, truth.mask, 1.0, 11)
        sd = (obs.values - truth.values).std()
        assert 0.97 <= sd <= 1.03

    def test_shape_mismatch(self):
        truth = gen_ground_truth(SynthConfig(L=3, seed=1))
        with pytest.raises(ValueError):
            make_observed(truth, np.ones((2, 10, 10), bool), 0.0, 1)


def test_write_scenario(tmp_path):
    paths = write_scenario(tmp_path, SynthConfig(L=10, seed=2), FleetConfig(seed=2))
    truth, obs = load_field(paths["truth"]), load_field(paths["observed"])
    assert truth.L == obs.L == 10 and truth.mask.all()
    prov = json.loads(paths["provenance"].read_text())
    assert prov["synth"]["seed"] == 2 and prov["fleet"]["n_vehicles"] == 6
