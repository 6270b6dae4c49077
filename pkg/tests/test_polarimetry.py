import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snvanneal.exceptions import EmptyWindowError, InvalidInputError
from snvanneal.polarimetry import (MalusFitter, PolarizationScan, fit_malus, read_scan_csv, scan_from_spectra,
                                   synthetic_scan, write_scan_csv)
from snvanneal.spectra import SNV_DELTA, SNV_GAMMA, Spectrum, SpectralWindow, lorentzian

ANGLES = np.arange(0, 180, 10.0)


def _doublet(gamma_height, delta_height):
    wl = np.linspace(610, 632, 2201)
    y = lorentzian(wl, 620.3, 0.6, gamma_height) + lorentzian(wl, 623.5, 0.6, delta_height)
    return Spectrum(wl, y)


class TestScan:
    def test_too_few_angles(self):
        with pytest.raises(InvalidInputError):
            PolarizationScan(np.linspace(0, 90, 7), np.ones(7))

    def test_too_narrow(self):
        with pytest.raises(InvalidInputError):
            PolarizationScan(np.linspace(0, 80, 9), np.ones(9))

    def test_negative(self):
        with pytest.raises(InvalidInputError):
            PolarizationScan(ANGLES, -np.ones(ANGLES.size))


class TestFitMalus:
    def test_pure_cos_squared(self):
        scan = PolarizationScan(ANGLES, np.cos(2 * np.deg2rad(ANGLES)) ** 2)
        fit = fit_malus(scan)
        assert fit.visibility == pytest.approx(1.0, abs=1e-6)
        assert fit.axis == pytest.approx(0.0, abs=1e-6)
        assert fit.offset == pytest.approx(0.0, abs=1e-9)

    def test_constant_is_unpolarised(self):
        assert fit_malus(PolarizationScan(ANGLES, np.full(ANGLES.size, 37.0))).visibility < 0.05

    def test_all_zero(self):
        with pytest.raises(InvalidInputError):
            fit_malus(PolarizationScan(ANGLES, np.zeros(ANGLES.size)))

    def test_noisy_visibility(self):
        errs = [abs(fit_malus(synthetic_scan(0.9, axis=33.0, noise=0.02, rng=s)).visibility - 0.9)
                for s in range(200)]
        assert np.quantile(errs, 0.95) < 0.03

    @pytest.mark.parametrize("axis", [0.0, 12.5, 45.0, 89.0])
    def test_axis_recovery(self, axis):
        fit = fit_malus(synthetic_scan(0.7, axis=axis))
        assert fit.axis == pytest.approx(axis, abs=1e-9)
        assert fit.visibility == pytest.approx(0.7, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(-360, 360), st.floats(1e-3, 1e4))
    def test_scale_invariance(self, vis, axis, k):
        scan = synthetic_scan(vis, axis=axis, noise=0.01, rng=1)
        a = fit_malus(scan)
        b = fit_malus(PolarizationScan(scan.angles, scan.intensities * k))
        assert b.visibility == pytest.approx(a.visibility, abs=1e-9)
        if a.visibility > 1e-3:
            d = abs(b.axis - a.axis)
            assert min(d, 90 - d) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-1000, 1000))
    def test_axis_canonical_range(self, axis):
        fit = fit_malus(synthetic_scan(0.8, axis=axis))
        assert 0.0 <= fit.axis < 90.0
        d = abs(fit.axis - axis % 90.0)
        assert min(d, 90 - d) < 1e-6


class TestScanFromSpectra:
    def test_gamma_window_tracks_gamma(self):
        g = 100 * np.cos(np.deg2rad(2 * ANGLES)) ** 2 + 5
        d = 80 * np.cos(np.deg2rad(2 * ANGLES - 90)) ** 2 + 5
        spectra = [_doublet(gi, 0 * di) for gi, di in zip(g, d)]
        scan = scan_from_spectra(spectra, ANGLES, SNV_GAMMA)
        np.testing.assert_allclose(scan.intensities / scan.intensities.max(), g / g.max(), rtol=1e-9)
        assert fit_malus(scan).axis == pytest.approx(0.0, abs=1e-6)

    def test_empty_window(self):
        with pytest.raises(EmptyWindowError):
            scan_from_spectra([_doublet(1, 1)] * ANGLES.size, ANGLES, SpectralWindow("far", 700, 710))

    def test_identical_spectra_constant(self):
        scan = scan_from_spectra([_doublet(10, 5)] * ANGLES.size, ANGLES, SNV_DELTA)
        assert np.ptp(scan.intensities) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            scan_from_spectra([_doublet(1, 1)] * 3, ANGLES, SNV_GAMMA)


def test_csv_round_trip(tmp_path):
    scan = synthetic_scan(0.5, axis=20.0, noise=0.05, rng=0)
    write_scan_csv(scan, tmp_path / "s.csv")
    back = read_scan_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.intensities, scan.intensities)


def test_estimator():
    scan = synthetic_scan(0.6, axis=10.0)
    est = MalusFitter().fit(scan.angles, scan.intensities)
    assert est.visibility_ == pytest.approx(0.6)
    np.testing.assert_allclose(est.predict(scan.angles), scan.intensities, atol=1e-9)
