import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snvanneal.exceptions import InvalidInputError
from snvanneal.feedback import (ACTIVATION, DEACTIVATION, ChangePointDetector, FeedbackEvent, Protocol,
                                background_reference, classify_site, detect_changepoints, ever_snv, run_protocol)
from snvanneal.kinetics import AnnealSegment, RateModel, SiteState, State, anneal, implant
from snvanneal.kinetics.emission import emit_spad_trace, emit_spectrum
from snvanneal.spectra import Spectrum, gaussian, integrate_window, GR1, SNV, subtract_baseline
from snvanneal.traces import SpadTrace

BIN = 0.02


def _step(lo, hi, at=2000, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    return SpadTrace(BIN, np.r_[rng.poisson(lo, at), rng.poisson(hi, n - at)])


def _site(state, zpl=None, n_sv=4, dose=10):
    return SiteState(0, (0.0, 0.0), dose, n_sv, state, zpl, dose, (0, 0))


class TestFeedbackEvent:
    def test_direction_matches_kind(self):
        with pytest.raises(InvalidInputError):
            FeedbackEvent(ACTIVATION, 1.0, 50.0, 20.0, 9.0, 50, 1.5)
        with pytest.raises(InvalidInputError):
            FeedbackEvent("Blip", 1.0, 20.0, 50.0, 9.0, 50, 1.5)


class TestDetector:
    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            detect_changepoints(SpadTrace(BIN, np.ones(49, int)), min_dwell_bins=25)

    def test_false_alarm_rate(self):
        with_events = sum(bool(detect_changepoints(SpadTrace(BIN, np.random.default_rng(s).poisson(50, 10_000))))
                          for s in range(100))
        assert with_events <= 1

    @pytest.mark.parametrize("seed", range(10))
    def test_step_up(self, seed):
        ev = detect_changepoints(_step(20, 200, seed=seed))
        assert len(ev) == 1 and ev[0].kind == ACTIVATION and abs(ev[0].onset_bin - 2000) <= 5

    @pytest.mark.parametrize("seed", range(5))
    def test_step_down(self, seed):
        ev = detect_changepoints(_step(200, 20, seed=seed))
        assert len(ev) == 1 and ev[0].kind == DEACTIVATION

    @pytest.mark.parametrize("seed", range(10))
    def test_matched_scaling(self, seed):
        a = detect_changepoints(_step(20, 200, seed=seed))
        b = detect_changepoints(_step(40, 400, seed=seed))
        assert len(a) == len(b) == 1 and abs(a[0].onset_bin - b[0].onset_bin) <= 1

    def test_transient_spike_ignored(self):
        rng = np.random.default_rng(1)
        x = np.r_[rng.poisson(50, 1000), rng.poisson(300, 10), rng.poisson(50, 1000)]
        assert detect_changepoints(SpadTrace(BIN, x)) == []

    def test_dip_then_spike_then_step(self):
        rng = np.random.default_rng(2)
        x = np.r_[rng.poisson(40, 300), rng.poisson(10, 8), rng.poisson(150, 6), rng.poisson(40, 1700),
                  rng.poisson(300, 1000)]
        ev = detect_changepoints(SpadTrace(BIN, x))
        assert len(ev) == 1 and abs(ev[0].onset_bin - 2014) <= 5

    def test_simulated_activation_at_40s(self):
        tl = [(-np.inf, State.DARK, None), (40.0, State.SNV, 620.0)]
        tr = emit_spad_trace(tl, SNV, BIN, 0.0, 80.0, site=_site(State.DARK), noise_seed=3)
        ev = detect_changepoints(tr)
        assert len(ev) == 1 and ev[0].kind == ACTIVATION and abs(ev[0].time - 40.0) <= 0.5

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 1.0), st.sampled_from([(State.DARK, State.SNV), (State.SNV, State.TYPEII),
                                                  (State.TYPEII, State.SNV)]))
    def test_latency_noiseless(self, frac, pair):
        t_true = 40.0 + frac * BIN
        zpl = {State.SNV: 620.0, State.TYPEII: 595.0, State.DARK: None}
        tl = [(-np.inf, pair[0], zpl[pair[0]]), (t_true, pair[1], zpl[pair[1]])]
        tr = emit_spad_trace(tl, SNV, BIN, 0.0, 80.0, site=_site(pair[0]), noiseless=True)
        ev = detect_changepoints(tr)
        assert len(ev) == 1
        assert 0 <= ev[0].detected_at - t_true <= 25 * BIN + BIN + 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 400), st.integers(5, 400), st.integers(0, 2**31))
    def test_event_invariants(self, lo, hi, seed):
        for e in detect_changepoints(_step(lo, hi, n=3000, at=1500, seed=seed)):
            assert e.significance >= 5.0
            assert (e.post_mean > e.pre_mean) == (e.kind == ACTIVATION)

    def test_estimator(self):
        det = ChangePointDetector().fit(_step(20, 200))
        assert len(det.events_) == 1 and det.get_params()["min_dwell_bins"] == 25


def _clean(s):
    return subtract_baseline(s, "reference", reference=background_reference())


class TestClassify:
    def test_type_ii(self):
        assert classify_site(_clean(emit_spectrum(_site(State.TYPEII, 595.0), noise_seed=1))) == "TypeII"

    def test_snv_with_weak_gr1(self):
        wl = np.arange(560.0, 800.0, 0.1)
        rng = np.random.default_rng(0)
        y = gaussian(wl, 620.0, 2.0, 400.0) + gaussian(wl, 741.0, 3.0, 60.0) + rng.normal(0, 3.0, wl.size)
        s = Spectrum(wl, y, baseline_subtracted=True)
        assert integrate_window(s, SNV) > integrate_window(s, GR1)
        assert classify_site(s) == "SnV"

    def test_raman_only(self):
        assert classify_site(_clean(emit_spectrum(_site(State.EMPTY, dose=0, n_sv=0), noise_seed=2))) == "background"

    def test_gr1_only(self):
        s = _clean(emit_spectrum(_site(State.DARK, dose=200, n_sv=80), noise_seed=3))
        assert classify_site(s) == "GR1-only"

    def test_agreement_with_ground_truth(self):
        from snvanneal.kinetics import run_segments
        a, _ = run_segments(implant(40, 40, 0.78, 10.0, seed=0), [AnnealSegment(1.7, 1.0), AnnealSegment(1.0, 300.0)])
        ref = background_reference()
        agree = n = 0
        for i in range(a.n_sites):
            site = a.site(i)
            if not site.state.emitting:
                continue
            label = classify_site(subtract_baseline(emit_spectrum(site, noise_seed=i), "reference", reference=ref))
            agree += label == site.state.label
            n += 1
            if n == 1000:
                break
        assert n == 1000 and agree >= 950


class TestProtocol:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            Protocol(AnnealSegment(1.0, 60.0), max_cycles=0)
        with pytest.raises(InvalidInputError):
            Protocol(AnnealSegment(1.0, 60.0), stop_rule="whenever")

    def test_defaults_from_config(self):
        p = Protocol.default()
        assert p.segment.duration == 60.0 and p.bin_width == 0.02 and p.min_dwell_bins == 25

    def test_zero_duration_single_cycle_identity(self):
        a = implant(3, 3, 0.78, 10.0, seed=0)
        rep = run_protocol(a, Protocol(AnnealSegment(1.0, 0.0), max_cycles=1), seed=0)
        assert np.array_equal(rep.array.state, a.state) and rep.events == []

    def test_unmonitored_equals_plain_anneals(self):
        a = implant(3, 3, 0.78, 10.0, seed=1)
        proto = Protocol.default(monitor=False, max_cycles=2)
        rep = run_protocol(a, proto, seed=5)
        b, log = a, []
        for target in range(a.n_sites):
            for _ in range(2):
                b, ev = anneal(b, AnnealSegment(1.0, 60.0, focus=tuple(a.positions[target])))
                log.extend(ev)
        assert rep.events == sorted(log, key=lambda e: (e.time, e.site))
        assert np.array_equal(rep.array.state, b.state)

    def test_escape_dominated_on_activation(self):
        rates = RateModel.default("escape_dominated")
        # 10 µm pitch keeps neighbours outside each other's activation spot
        a = implant(3, 3, 10.0, 10.0, seed=2, rates=rates)
        rep = run_protocol(a, Protocol.default(), rates, seed=2)
        for s in rep.sites:
            if a.state[s["site"]] != State.EMPTY:
                assert s["final_state"] in ("SnV", "TypeII")
                assert any(e["kind"] == ACTIVATION for e in s["feedback_events"])

    def test_deterministic(self):
        rates = RateModel.default("reversal_heavy")
        a = implant(3, 3, 0.78, 10.0, seed=3, rates=rates)
        r1 = run_protocol(a, Protocol.default(), rates, seed=9).to_dict()
        r2 = run_protocol(a, Protocol.default(), rates, seed=9).to_dict()
        assert r1 == r2

    def test_bad_target(self):
        a = implant(2, 2, 0.78, 10.0, seed=0)
        with pytest.raises(InvalidInputError):
            run_protocol(a, Protocol.default(targets=(7,)))

    def test_halt_freezes_snv(self):
        rates = RateModel.default("reversal_heavy")
        a = implant(4, 4, 0.78, 10.0, seed=4, rates=rates)
        rep = run_protocol(a, Protocol.default(), rates, seed=4)
        reached = ever_snv(rep.events)
        stopped = [s for s in rep.sites if s["stopped_by_rule"]]
        assert all(s["final_state"] == "SnV" for s in stopped)
        assert len(stopped) >= 0.5 * len(reached & set(range(a.n_sites)))
