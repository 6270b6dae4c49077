import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snvanneal.exceptions import FitFailure, InvalidInputError
from snvanneal.hbt import (CorrelationHistogram, ThreeLevelFit, ThreeLevelFitter, TimetagStream,
                           background_correct, correlate, fit_three_level, g2_at_zero, is_single_emitter,
                           rates_for_lifetime, read_histogram_json, read_timetags, simulate_three_level_stream,
                           synthetic_histogram, three_level_g2, three_level_g2_binned, three_level_g2_exact,
                           three_level_parameters, write_histogram_json, write_timetags)


def _poisson_stream(n_per_channel, duration_s, rng):
    ta = np.sort(rng.integers(0, int(duration_s * 1e12), n_per_channel))
    tb = np.sort(rng.integers(0, int(duration_s * 1e12), n_per_channel))
    ts = np.concatenate([ta, tb])
    ch = np.concatenate([np.zeros(ta.size, np.uint8), np.ones(tb.size, np.uint8)])
    order = np.argsort(ts, kind="stable")
    return TimetagStream(ch[order], ts[order], duration_s)


def _flat_histogram(g, rho=1.0, norm=1000.0, n=41, width=0.25):
    edges = (np.arange(n + 1) - n / 2) * width
    return CorrelationHistogram(edges, np.full(n, g * norm), norm, rho)


class TestTimetagStream:
    def test_accepts_letters(self):
        t = TimetagStream(["A", "B", "A"], [0, 5, 9])
        assert t.channels.tolist() == [0, 1, 0]
        assert t.duration == pytest.approx(9e-12)

    def test_rejects_decreasing(self):
        with pytest.raises(InvalidInputError):
            TimetagStream([0, 1], [10, 5])

    def test_rejects_bad_channel(self):
        with pytest.raises(InvalidInputError):
            TimetagStream([0, 2], [1, 5])


class TestCorrelate:
    def test_uncorrelated_poisson_is_flat(self):
        rng = np.random.default_rng(3)
        # 1e5 per channel over 0.02 s gives ~125 coincidences per bin
        h = correlate(_poisson_stream(100_000, 0.02, rng))
        # 801 bins of ~125 counts: 3 sigma on the mean is ~0.01
        assert h.g2.mean() == pytest.approx(1.0, abs=0.02)

    def test_periodic_comb(self):
        period_ps = 10_000
        ts = np.arange(0, 2000) * period_ps
        ch = np.tile([0, 1], 1000).astype(np.uint8)
        # channel B delayed by one period relative to A in alternation
        h = correlate(TimetagStream(ch, ts, 2000 * period_ps * 1e-12), bin_width=0.5, max_delay=50)
        peaks = h.delays[h.counts > 0]
        np.testing.assert_allclose(np.round(peaks / 10.0), peaks / 10.0, atol=1e-12)
        assert set(np.round(peaks / 10.0).astype(int)) == {-5, -3, -1, 1, 3, 5}

    def test_empty_channel(self):
        with pytest.raises(InvalidInputError):
            correlate(TimetagStream([0, 0, 0], [1, 2, 3], 1e-6))

    def test_bins_are_whole(self):
        rng = np.random.default_rng(0)
        h = correlate(_poisson_stream(50_000, 0.01, rng), max_delay=20.0)
        edge_bins = h.g2[[0, -1]]
        assert np.all(edge_bins > 0.7)
        assert h.bin_edges[0] == pytest.approx(-20.125)

    def test_chunking_is_bit_identical(self):
        rng = np.random.default_rng(1)
        s = _poisson_stream(20_000, 0.002, rng)
        a = correlate(s, chunk=1_000_000)
        b = correlate(s, chunk=777)
        np.testing.assert_array_equal(a.counts, b.counts)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 400))
    def test_time_reversal_mirrors(self, seed, n):
        rng = np.random.default_rng(seed)
        ts = np.sort(rng.integers(0, 200_000, n))
        ch = rng.integers(0, 2, n).astype(np.uint8)
        ch[0], ch[-1] = 0, 1
        s = TimetagStream(ch, ts, 2e-7)
        if min(np.sum(ch == 0), np.sum(ch == 1)) == 0:
            return
        fwd = correlate(s, bin_width=0.25, max_delay=30)
        rev = correlate(s.time_reversed(), bin_width=0.25, max_delay=30)
        np.testing.assert_array_equal(fwd.counts, rev.counts[::-1])


class TestBackgroundCorrect:
    def test_identity_at_rho_one(self):
        h = synthetic_histogram(0.3, 1.4, 9.7, rng=np.random.default_rng(0))
        c = background_correct(h, 1.0)
        np.testing.assert_array_equal(c.counts, h.counts)

    @pytest.mark.parametrize("rho", [0.2, 0.55, 0.8, 1.0])
    def test_uncorrelated_fixed_point(self, rho):
        c = background_correct(_flat_histogram(1.0, rho))
        np.testing.assert_allclose(c.g2, 1.0, rtol=1e-12)

    def test_worked_example(self):
        c = background_correct(_flat_histogram(0.55, 0.8))
        assert c.g2[0] == pytest.approx(0.296875, rel=1e-12)

    def test_zero_rho(self):
        with pytest.raises(InvalidInputError):
            background_correct(_flat_histogram(1.0), rho=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 1.0))
    def test_second_pass_with_unit_rho_is_identity(self, rho):
        h = synthetic_histogram(0.3, 1.4, 9.7, rng=np.random.default_rng(1))
        once = background_correct(h, rho)
        twice = background_correct(once, 1.0)
        np.testing.assert_array_equal(once.counts, twice.counts)
        assert once.rho == 1.0


class TestThreeLevelModel:
    @pytest.mark.parametrize("rates", [(0.12, 0.3, 0.05, 0.05), (1.0, 0.5, 0.02, 0.1), (2.0, 0.3, 0.05, 0.05)])
    def test_rate_equation_oracle(self, rates):
        alpha, tau1, tau2 = three_level_parameters(*rates)
        d = np.array([0.0, 0.3, 1.0, 2.5, 7.0, 20.0, 60.0])
        np.testing.assert_allclose(three_level_g2(d, alpha, tau1, tau2), three_level_g2_exact(d, *rates),
                                   atol=1e-9)

    def test_oscillating_rates_rejected(self):
        with pytest.raises(InvalidInputError):
            three_level_parameters(0.05, 0.2, 0.1, 0.3)

    def test_rates_for_lifetime(self):
        rates = rates_for_lifetime(2.2)
        assert three_level_parameters(*rates)[1] == pytest.approx(2.2, rel=1e-9)

    def test_binned_model_converges_to_point_model(self):
        edges = np.linspace(-10, 10, 20001)
        centres = 0.5 * (edges[1:] + edges[:-1])
        np.testing.assert_allclose(three_level_g2_binned(edges, 0.3, 1.4, 9.7),
                                   three_level_g2(centres, 0.3, 1.4, 9.7), atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 3.0), st.floats(0.2, 5.0), st.floats(1.5, 10.0), st.floats(0.3, 1.0))
    def test_curve_returns_to_one(self, alpha, tau1, ratio, depth):
        f = ThreeLevelFit(alpha, tau1, tau1 * ratio, depth)
        assert abs(f.evaluate(10 * f.tau2) - 1.0) <= 1e-3 * alpha


class TestFit:
    def test_noiseless_recovery(self):
        f = fit_three_level(synthetic_histogram(0.3, 1.4, 9.7))
        assert f.alpha == pytest.approx(0.3, rel=1e-6)
        assert f.tau1 == pytest.approx(1.4, rel=1e-6)
        assert f.tau2 == pytest.approx(9.7, rel=1e-6)

    def test_ideal_g2_zero(self):
        g0, err = g2_at_zero(fit_three_level(synthetic_histogram(0.3, 1.4, 9.7)))
        assert g0 == pytest.approx(0.0, abs=1e-6)
        assert err >= 0

    def test_fixed_depth(self):
        f = fit_three_level(synthetic_histogram(0.3, 1.4, 9.7), free_depth=False)
        assert f.depth == 1.0 and f.g2_zero == pytest.approx(0.0, abs=1e-12)

    def test_flat_fails(self):
        rng = np.random.default_rng(5)
        edges = (np.arange(802) - 400.5) * 0.25
        h = CorrelationHistogram(edges, rng.poisson(500, 801).astype(float), 500.0)
        with pytest.raises(FitFailure):
            fit_three_level(h)

    def test_noisy_reference_shape(self):
        h = synthetic_histogram(0.3, 1.4, 9.7, counts_per_bin=500, rng=np.random.default_rng(11))
        f = fit_three_level(h)
        assert abs(f.g2_zero) < 0.5
        assert is_single_emitter(f)

    def test_short_span_rejected(self):
        h = synthetic_histogram(0.3, 1.4, 9.7, max_delay=20.0)
        with pytest.raises(InvalidInputError):
            fit_three_level(h)

    def test_photon_stream_lifetime(self):
        rates = rates_for_lifetime(2.2)
        f = fit_three_level(correlate(simulate_three_level_stream(1_000_000, *rates, seed=2)))
        assert f.tau1 == pytest.approx(2.2, rel=0.10)
        assert f.g2_zero < 0.5

    def test_two_emitters_near_half(self):
        rates = rates_for_lifetime(2.2)
        f = fit_three_level(correlate(simulate_three_level_stream(1_000_000, *rates, n_emitters=2, seed=2)))
        assert f.g2_zero == pytest.approx(0.5, abs=0.05)
        assert not is_single_emitter(f)

    @pytest.mark.slow
    def test_classifier_matches_truth(self):
        rates = rates_for_lifetime(2.2)
        correct = 0
        for trial in range(100):
            n_em = 1 + trial % 2
            s = simulate_three_level_stream(200_000, *rates, n_emitters=n_em, seed=1000 + trial)
            correct += is_single_emitter(fit_three_level(correlate(s))) == (n_em == 1)
        assert correct >= 95


class TestIO:
    @pytest.mark.parametrize("name", ["tags.bin", "tags.csv"])
    def test_round_trip(self, tmp_path, name):
        s = simulate_three_level_stream(2000, *rates_for_lifetime(2.2), seed=0)
        path = tmp_path / name
        write_timetags(s, path)
        back = read_timetags(path)
        np.testing.assert_array_equal(back.timestamps, s.timestamps)
        np.testing.assert_array_equal(back.channels, s.channels)

    def test_binary_layout(self, tmp_path):
        path = tmp_path / "t.bin"
        write_timetags(TimetagStream([1], [2**40 + 7]), path)
        raw = path.read_bytes()
        assert raw[:8] == b"HBTTAGS1" and len(raw) == 16 + 9
        assert raw[16] == 1 and int.from_bytes(raw[17:], "little") == 2**40 + 7

    def test_bad_file(self, tmp_path):
        path = tmp_path / "junk.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(InvalidInputError):
            read_timetags(path)

    def test_histogram_json(self, tmp_path):
        h = synthetic_histogram(0.3, 1.4, 9.7, rng=np.random.default_rng(0))
        write_histogram_json(h, tmp_path / "h.json")
        back = read_histogram_json(tmp_path / "h.json")
        np.testing.assert_array_equal(back.counts, h.counts)
        assert back.normalization == h.normalization


class TestEstimator:
    def test_fit_stream_and_histogram(self):
        h = synthetic_histogram(0.3, 1.4, 9.7)
        est = ThreeLevelFitter().fit(h)
        assert est.fit_.tau1 == pytest.approx(1.4, rel=1e-6)
        assert est.predict([0.0])[0] == pytest.approx(0.0, abs=1e-6)
        assert est.get_params() == {"rho": 1.0, "free_depth": True, "bin_width": 0.25, "max_delay": 100.0}

    def test_rho_applied(self):
        h = synthetic_histogram(0.3, 1.4, 9.7)
        raw = CorrelationHistogram(h.bin_edges, h.counts * 0.64 + 0.36 * h.normalization, h.normalization)
        est = ThreeLevelFitter(rho=0.8).fit(raw)
        assert est.g2_zero_ == pytest.approx(0.0, abs=1e-6)
