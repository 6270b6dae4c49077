import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snvanneal.exceptions import InvalidInputError, RegistrationFailure
from snvanneal.localization import (FWHM_PER_SIGMA, Gaussian2DFit, GridRegistrar, PLMap, activation_spread,
                                    detect_emitters, discrepancy_stats, fit_saturation, grid_positions,
                                    logistic, read_map, register_grid, render_map, write_map)

PITCH = 0.78


def _single_spot_map(x0=3.13, y0=2.87, sigma_px=2.0, scale=0.1):
    spot = Gaussian2DFit(x0, y0, sigma_px * scale, sigma_px * scale, 100.0, 0.0)
    return render_map([spot], (60, 64), scale, background=10.0), spot


def _array_map(n=5, scale=0.1, sigma=0.15):
    pos = grid_positions(n, PITCH, 0.6, 0.6)
    spots = [Gaussian2DFit(x, y, sigma, sigma, 50.0, 0.0) for x, y in pos]
    size = int((0.6 * 2 + (n - 1) * PITCH) / scale) + 1
    return render_map(spots, (size, size), scale, background=2.0), pos


class TestGaussianFit:
    def test_fwhm_constant(self):
        assert FWHM_PER_SIGMA == 2 * math.sqrt(2 * math.log(2))

    @settings(max_examples=100)
    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_fwhm_accessor_is_exact(self, sx, sy):
        f = Gaussian2DFit(0.0, 0.0, sx, sy, 1.0, 0.0)
        assert f.fwhm_x == 2.3548200450309493 * sx
        assert f.fwhm_y == 2.3548200450309493 * sy

    def test_rejects_bad_sigma(self):
        with pytest.raises(InvalidInputError):
            Gaussian2DFit(0, 0, 0.0, 1.0, 1, 0)


class TestDetect:
    def test_single_spot(self):
        m, spot = _single_spot_map()
        fits = detect_emitters(m, threshold=50.0)
        assert len(fits) == 1
        assert abs(fits[0].x0 - spot.x0) / m.scale < 0.05
        assert abs(fits[0].y0 - spot.y0) / m.scale < 0.05

    def test_empty_map(self):
        assert detect_emitters(PLMap(np.zeros((20, 20)), 0.1), threshold=0.0) == []

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            detect_emitters(PLMap(np.ones((6, 10)), 0.1), threshold=0.0)

    def test_five_by_five_array(self):
        m, pos = _array_map()
        fits = detect_emitters(m, threshold=20.0)
        assert len(fits) == 25
        got = np.array([[f.x0, f.y0] for f in fits])
        d = np.min(np.linalg.norm(got[:, None] - pos[None], axis=2), axis=1)
        assert d.max() < 1e-3

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_count_scale_invariant(self, k):
        m, _ = _array_map()
        scaled = PLMap(m.pixels * k, m.scale, m.origin)
        assert len(detect_emitters(scaled, 20.0 * k)) == len(detect_emitters(m, 20.0))


class TestRegister:
    def test_recovers_injected_transform(self):
        p = grid_positions(10, PITCH, 0.1, -0.05, np.deg2rad(1.0))
        r = register_grid(p, PITCH)
        assert abs(r.dx - 0.1) < 1e-3 and abs(r.dy + 0.05) < 1e-3
        assert abs(r.theta_deg - 1.0) < 0.01

    def test_exact_grid(self):
        r = register_grid(grid_positions(6, PITCH), PITCH)
        assert r.total_discrepancy == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(r.radial, 0.0, atol=1e-12)

    def test_stored_discrepancy_recomputes(self):
        rng = np.random.default_rng(4)
        p = grid_positions(8, PITCH, 0.2, 0.1, 0.01) + rng.normal(0, 0.03, (64, 2))
        r = register_grid(p, PITCH)
        total, dr = r.recompute()
        assert total == pytest.approx(r.total_discrepancy, abs=1e-9)
        np.testing.assert_allclose(dr, r.radial, atol=1e-9)

    def test_rayleigh_mean_over_seeds(self):
        sigma = 0.020
        means = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = grid_positions(10, PITCH, 0.05, 0.02, np.deg2rad(-0.4)) + rng.normal(0, sigma, (100, 2))
            means.append(discrepancy_stats(register_grid(p, PITCH, theta_step_deg=0.25)).mean)
        assert np.mean(means) == pytest.approx(sigma * math.sqrt(math.pi / 2), rel=0.15)

    def test_too_few(self):
        with pytest.raises(RegistrationFailure):
            register_grid([[0, 0], [1, 1]], PITCH)

    def test_coincident(self):
        with pytest.raises(RegistrationFailure):
            register_grid([[0.3, 0.3]] * 5, PITCH)

    def test_amplitude_weights(self):
        p = grid_positions(5, PITCH, 0.1, 0.1)
        reg = GridRegistrar(weighting="amplitude").fit(p, sample_weight=np.linspace(1, 2, 25))
        assert reg.registration_.weighting == "amplitude"
        np.testing.assert_allclose(reg.transform(p), 0.0, atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_translation_equivariance(self, a, b):
        rng = np.random.default_rng(7)
        p = grid_positions(5, PITCH, 0.1, -0.2, np.deg2rad(0.7)) + rng.normal(0, 0.02, (25, 2))
        r0 = register_grid(p, PITCH)
        r1 = register_grid(p + [a, b], PITCH)
        assert r1.dx - r0.dx == pytest.approx(a, abs=1e-9)
        assert r1.dy - r0.dy == pytest.approx(b, abs=1e-9)
        assert r1.total_discrepancy == pytest.approx(r0.total_discrepancy, abs=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-3.0, 3.0))
    def test_rotation_invariance_of_radial(self, deg):
        rng = np.random.default_rng(8)
        p = grid_positions(5, PITCH) + rng.normal(0, 0.02, (25, 2))
        c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
        q = p @ np.array([[c, -s], [s, c]]).T
        r0, r1 = register_grid(p, PITCH), register_grid(q, PITCH)
        np.testing.assert_allclose(np.sort(r1.radial), np.sort(r0.radial), atol=1e-6)


class TestStats:
    def test_zero(self):
        s = discrepancy_stats(np.zeros(5))
        assert s.mean == 0 and s.std == 0

    def test_two_sites_sample_std(self):
        s = discrepancy_stats(np.array([10.0, 30.0]))
        assert s.mean == 20.0
        assert s.std == pytest.approx(10 * math.sqrt(2), rel=1e-12)

    def test_rayleigh_reference_mean(self):
        rng = np.random.default_rng(2)
        dr = rng.rayleigh(22.0, 100)
        assert discrepancy_stats(dr).mean == pytest.approx(22.0 * math.sqrt(math.pi / 2), rel=0.10)
        assert 22.0 * math.sqrt(math.pi / 2) == pytest.approx(27.6, abs=0.05)

    def test_histogram_bins(self):
        s = discrepancy_stats(np.arange(10.0), bins=5)
        assert s.counts.sum() == 10 and s.edges.size == 6


class TestActivationSpread:
    def _map(self, sigma, height=100.0):
        spot = Gaussian2DFit(5.0, 5.0, sigma, sigma, height, 0.0)
        return render_map([spot], (101, 101), 0.1, background=1.0)

    def test_constant(self):
        out = activation_spread([self._map(0.8)] * 3, (5.0, 5.0))
        assert np.ptp(out[:, 0]) == 0 and np.ptp(out[:, 1]) == 0

    def test_growth_endpoints(self):
        sig = np.linspace(0.4, 2.1, 6)
        out = activation_spread([self._map(s) for s in sig], (5.0, 5.0))
        assert out[0, 0] == pytest.approx(0.94, abs=0.01)
        assert out[-1, 0] == pytest.approx(4.95, abs=0.01)
        np.testing.assert_allclose(out[:, 0], FWHM_PER_SIGMA * sig, rtol=1e-6)

    def test_failure_is_gap(self):
        maps = [self._map(0.5), PLMap(np.zeros((20, 20)), 0.1)]
        out = activation_spread(maps, (1.0, 1.0))
        assert np.all(np.isnan(out[1])) and np.all(np.isfinite(out[0]))

    def test_plateau_after_knee(self):
        t = np.linspace(0, 60, 31)
        f = fit_saturation(t, logistic(t, 0.9, 4.0, 15.0, 3.0))
        assert f.plateau and f.knee > f.t0
        assert f.t0 == pytest.approx(15.0, rel=1e-6)

    def test_no_plateau_when_still_rising(self):
        t = np.linspace(0, 10, 11)
        assert not fit_saturation(t, logistic(t, 0.9, 4.0, 15.0, 3.0)).plateau


def test_map_round_trip(tmp_path):
    m, _ = _single_spot_map()
    m = PLMap(m.pixels, m.scale, (12.5, -3.0))
    write_map(m, tmp_path / "m.csv")
    back = read_map(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.pixels, m.pixels)
    assert back.origin == (12.5, -3.0) and back.scale == m.scale
