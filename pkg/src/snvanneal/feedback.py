"""Change-point detection on SPAD traces, spectral site classification and
the closed-loop anneal/measure controller."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import FitFailure, InvalidInputError
from .kinetics.emission import emit_spad_trace, emit_spectrum, expected_spectrum
from .kinetics.model import RateModel, Species, resolve_preset
from .kinetics.sites import AnnealSegment, Event, SiteArray, SiteState, State, anneal
from .spectra import BUILTIN_WINDOWS, SNV, Spectrum, SpectralWindow, fit_peak, integrate_window, subtract_baseline
from .traces import DEFAULT_BIN_S, SpadTrace

ACTIVATION = "Activation"
DEACTIVATION = "Deactivation"
STOP_RULES = ("on-activation", "on-deactivation", "max-cycles")
CLASS_LABELS = {"TypeIISn": "TypeII", "SnV": "SnV", "GR1": "GR1-only"}


@dataclass(frozen=True)
class FeedbackEvent:
    """A confirmed level change in a SPAD trace.

    ``time`` is the start of the onset bin; ``detected_at`` is the end of
    the last bin needed to confirm the change.
    """

    kind: str
    time: float
    pre_mean: float
    post_mean: float
    significance: float
    onset_bin: int
    detected_at: float

    def __post_init__(self):
        if self.kind not in (ACTIVATION, DEACTIVATION):
            raise InvalidInputError(f"unknown event kind {self.kind!r}")
        if (self.post_mean > self.pre_mean) != (self.kind == ACTIVATION):
            raise InvalidInputError("an Activation must raise the mean and a Deactivation lower it")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "time_s": self.time, "pre_mean": self.pre_mean, "post_mean": self.post_mean,
                "significance": self.significance, "onset_bin": self.onset_bin, "detected_at_s": self.detected_at}


# --------------------------------------------------------------------------
# change-point detection
# --------------------------------------------------------------------------

def _confirm(x, csum, start, onset, dwell, threshold, min_step, n_blocks):
    """Windowed test of the shift starting at ``onset``; returns (pre, post, z) or None."""
    n_pre = onset - start
    pre = (csum[onset] - csum[start]) / n_pre
    post = (csum[onset + dwell] - csum[onset]) / dwell
    delta = post - pre
    # Poisson variances, floored at one count so empty bins do not give zero noise
    z = abs(delta) / math.sqrt(max(pre, 1.0) / n_pre + max(post, 1.0) / dwell)
    if z < threshold or abs(delta) < min_step or delta == 0:
        return None
    # persistence: the post window must be one level, so neither a transient
    # spike nor a second step inside it passes
    for block in np.array_split(x[onset:onset + dwell], n_blocks):
        if abs(block.mean() - post) > 4.0 * math.sqrt(max(post, 1.0) / block.size):
            return None
    return pre, post, z


def _xlogx(v):
    return np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)


def _refine_onset(csum, start, lo, hi, end):
    """Maximum-likelihood split point in ``[lo, hi]`` for a Poisson mean change on ``[start, end)``."""
    taus = np.arange(lo, hi + 1)
    n1 = taus - start
    n2 = end - taus
    c1 = csum[taus] - csum[start]
    c2 = csum[end] - csum[taus]
    # profile log-likelihood up to terms that do not depend on the split
    ll = _xlogx(c1) - c1 * np.log(n1) + _xlogx(c2) - c2 * np.log(n2)
    return int(taus[np.argmax(ll)])


def detect_changepoints(trace: SpadTrace, threshold_sigma: float = 5.0, min_dwell_bins: int = 25,
                        min_step: float = 0.0, drift: float = 0.5, alarm: float = 4.0,
                        max_events: Optional[int] = None) -> List[FeedbackEvent]:
    """Two-sided CUSUM on Poisson counts with a windowed confirmation test.

    Parameters
    ----------
    trace : SpadTrace
    threshold_sigma : float
        Required significance of the mean shift between the bins since the
        previous change and the ``min_dwell_bins`` bins after the onset.
    min_dwell_bins : int
        Length of the confirmation window; shifts must persist this long.
    min_step : float
        Smallest accepted absolute shift (counts/bin).
    drift, alarm : float
        CUSUM reference value and decision interval, in units of the
        per-bin Poisson standard deviation of the current level.
    max_events : int, optional
        Stop scanning after this many events.

    Returns
    -------
    list of FeedbackEvent
        In time order.  Event times are onset bins.

    Raises
    ------
    InvalidInputError
        If the trace is shorter than ``2 * min_dwell_bins``.
    """
    if min_dwell_bins < 1:
        raise InvalidInputError("min_dwell_bins must be >= 1")
    if not threshold_sigma > 0:
        raise InvalidInputError("threshold_sigma must be > 0")
    x = trace.counts.astype(float)
    n = x.size
    if n < 2 * min_dwell_bins:
        raise InvalidInputError(f"trace has {n} bins; need at least {2 * min_dwell_bins}")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    n_blocks = min(5, min_dwell_bins)
    bw, t0 = trace.bin_width, trace.t0
    events: List[FeedbackEvent] = []
    start = 0
    i = min_dwell_bins
    while i < n:
        idx = np.arange(i, n)
        mu = (csum[idx] - csum[start]) / (idx - start)
        z = (x[idx] - mu) / np.sqrt(np.maximum(mu, 1.0))
        # CUSUM S_t = max(0, S_{t-1} + y_t) in closed form: C_t - min(0, min_{s<=t} C_s)
        alarms = []
        for y in (z - drift, -z - drift):
            c = np.cumsum(y)
            low = np.minimum(np.minimum.accumulate(c), 0.0)
            stat = c - low
            hit = np.flatnonzero(stat > alarm)
            if hit.size:
                t = int(hit[0])
                zero = np.flatnonzero(stat[:t] == 0.0)
                alarms.append((t, int(zero[-1]) + 1 if zero.size else 0))
        if not alarms:
            break
        t_rel = min(t for t, _ in alarms)
        fired = [i + o for t, o in alarms if t == t_rel]
        t_abs = i + t_rel
        if t_abs + 1 + min_dwell_bins > n:
            break
        lo = max(min(fired) - min_dwell_bins, start + 1)
        onset = _refine_onset(csum, start, lo, t_abs, t_abs + 1 + min_dwell_bins)
        res = _confirm(x, csum, start, onset, min_dwell_bins, threshold_sigma, min_step, n_blocks)
        if res is None:
            i = t_abs + 1
            continue
        pre, post, sig = res
        kind = ACTIVATION if post > pre else DEACTIVATION
        events.append(FeedbackEvent(kind, t0 + onset * bw, float(pre), float(post), float(sig), int(onset),
                                    t0 + (onset + min_dwell_bins) * bw))
        if max_events is not None and len(events) >= max_events:
            break
        start = onset
        i = onset + min_dwell_bins
    return events


class ChangePointDetector(BaseEstimator):
    """Estimator wrapper: ``fit`` is a no-op, ``predict`` returns events."""

    def __init__(self, threshold_sigma: float = 5.0, min_dwell_bins: int = 25, min_step: float = 0.0):
        self.threshold_sigma = threshold_sigma
        self.min_dwell_bins = min_dwell_bins
        self.min_step = min_step

    def fit(self, trace: SpadTrace, y=None):
        self.events_ = self.predict(trace)
        return self

    def predict(self, trace: SpadTrace) -> List[FeedbackEvent]:
        return detect_changepoints(trace, self.threshold_sigma, self.min_dwell_bins, self.min_step)


# --------------------------------------------------------------------------
# spectral classification
# --------------------------------------------------------------------------

def _noise_sigma(y: np.ndarray) -> float:
    d = np.diff(y)
    mad = np.median(np.abs(d - np.median(d)))
    return max(1.4826 * mad / math.sqrt(2.0), 1e-12)


def classify_site(spectrum: Spectrum, k_sigma: float = 5.0, windows: Optional[Sequence[SpectralWindow]] = None,
                  pad_nm: float = 8.0, max_fwhm_nm: float = 5.0) -> str:
    """Label a baseline-subtracted site spectrum.

    A window qualifies when a fitted Gaussian peak inside it, widened by
    ``pad_nm`` on both sides to admit strain-shifted ZPLs, is narrower
    than ``max_fwhm_nm`` and taller than ``k_sigma`` times the noise
    (estimated from pixel-to-pixel differences inside the window).  Each qualifying window
    is then re-centred on its fitted line, keeping its nominal width, and
    the one with the largest integral wins.  Re-centring keeps broad
    phonon sidebands of a bluer line from outweighing a redder window and
    follows strain-shifted lines.

    Returns
    -------
    {"TypeII", "SnV", "GR1-only", "background"}
        Custom windows map to their own labels.
    """
    windows = list(BUILTIN_WINDOWS.values()) if windows is None else list(windows)
    best, best_area = "background", -np.inf
    for w in windows:
        pw = w.padded(pad_nm)
        sel = (spectrum.grid >= pw.lo) & (spectrum.grid <= pw.hi)
        if sel.sum() < 5:
            continue
        # shot noise varies along the spectrum, so estimate it inside the window
        sigma = _noise_sigma(spectrum.intensity[sel])
        if spectrum.intensity[sel].max() <= k_sigma * sigma:
            continue
        seed = float(spectrum.grid[sel][np.argmax(spectrum.intensity[sel])])
        try:
            fit = fit_peak(spectrum, seed, model="gaussian", bounds=(pw.lo, pw.hi), xtol=1e-5)
        except (FitFailure, InvalidInputError):
            continue
        if not (fit.fwhm <= max_fwhm_nm and fit.height > k_sigma * sigma and pw.lo <= fit.center <= pw.hi):
            continue
        # integrate a window of the nominal width centred on the fitted line
        half = 0.5 * (w.hi - w.lo)
        lo, hi = max(fit.center - half, spectrum.grid[0]), min(fit.center + half, spectrum.grid[-1])
        area = integrate_window(spectrum, SpectralWindow("custom", lo, hi))
        if area > best_area:
            best, best_area = CLASS_LABELS.get(w.label, w.label), area
    return best


def background_reference(species: Optional[Species] = None, acquisition: float = 1.0, grid=None) -> Spectrum:
    """Expected spectrum of bare diamond (Raman and flat background only)."""
    blank = SiteState(-1, (0.0, 0.0), 0, 0, State.EMPTY, None, 0, (0, -1))
    return expected_spectrum(blank, acquisition, grid, species)


# --------------------------------------------------------------------------
# protocol driver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Protocol:
    """Alternating anneal/measure recipe applied to each target site in turn.

    Parameters
    ----------
    segment : AnnealSegment
        Template exposure; its focus is replaced by each target's position.
    stop_rule : {"on-activation", "on-deactivation", "max-cycles"}
    max_cycles : int
        Anneal segments allowed per target, >= 1.
    targets : tuple of int, optional
        Site ids in visiting order; all sites when omitted.
    monitor : bool
        Watch the SPAD trace during each segment.  Without monitoring the
        driver reduces to repeated plain anneals.
    measure : {"spectrum", "none"}
        Take a spectrum after every segment or halt.
    """

    segment: AnnealSegment
    stop_rule: str = "on-activation"
    max_cycles: int = 10
    targets: Optional[tuple] = None
    monitor: bool = True
    measure: str = "spectrum"
    window: SpectralWindow = SNV
    bin_width: float = DEFAULT_BIN_S
    threshold_sigma: float = 5.0
    min_dwell_bins: int = 25
    acquisition: float = 1.0

    def __post_init__(self):
        if self.stop_rule not in STOP_RULES:
            raise InvalidInputError(f"stop_rule must be one of {STOP_RULES}")
        if int(self.max_cycles) < 1:
            raise InvalidInputError("max_cycles must be >= 1")
        if self.measure not in ("spectrum", "none"):
            raise InvalidInputError("measure must be 'spectrum' or 'none'")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))

    @classmethod
    def default(cls, preset: Optional[str] = None, **changes) -> "Protocol":
        cfg = resolve_preset(preset)
        seg = cfg["protocols"]["feedback_segment"]
        fb = cfg["feedback"]
        base = cls(AnnealSegment(float(seg["pulse_nJ"]), float(seg["duration_s"])), max_cycles=int(fb["max_cycles"]),
                   bin_width=float(fb["bin_s"]), threshold_sigma=float(fb["threshold_sigma"]),
                   min_dwell_bins=int(fb["min_dwell_bins"]))
        return replace(base, **changes)

    def to_dict(self) -> dict:
        return {"segment": self.segment.to_dict(), "stop_rule": self.stop_rule, "max_cycles": self.max_cycles,
                "targets": list(self.targets) if self.targets is not None else None, "monitor": self.monitor,
                "measure": self.measure, "window": {"label": self.window.label, "lo": self.window.lo,
                                                    "hi": self.window.hi},
                "bin_s": self.bin_width, "threshold_sigma": self.threshold_sigma,
                "min_dwell_bins": self.min_dwell_bins, "acquisition_s": self.acquisition}


@dataclass
class CampaignReport:
    """Outcome of :func:`run_protocol`."""

    array: SiteArray
    events: List[Event]
    sites: List[dict]
    protocol: Protocol
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "protocol": self.protocol.to_dict(), "final_counts": self.array.counts(),
                "time_s": self.array.time, "sites": self.sites,
                "summary": {"snv_reached": len(ever_snv(self.events)), "snv_frozen": len(frozen_snv(self))}}


def ever_snv(events: Sequence[Event]) -> set:
    return {e.site for e in events if e.dst == State.SNV}


def frozen_snv(report: CampaignReport) -> set:
    """Sites that reached SnV at some point and end the campaign in SnV."""
    return {s for s in ever_snv(report.events) if report.array.state[s] == State.SNV}


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def _timeline(state: State, zpl, events: Sequence[Event], site: int) -> list:
    tl = [(-np.inf, State(state), None if not State(state).emitting else zpl)]
    tl += [(e.time, e.dst, e.zpl_nm) for e in events if e.site == site]
    return tl


def run_protocol(array: SiteArray, protocol: Protocol, rates: Optional[RateModel] = None, seed: int = 0,
                 species: Optional[Species] = None) -> CampaignReport:
    """Anneal each target with SPAD monitoring and spectral checks.

    For every target the driver runs up to ``max_cycles`` exposures
    focused on it.  When monitoring, the exposure is replayed only up to
    the moment a change point is confirmed (the per-segment random streams
    make the truncated run an exact prefix of the full one).  A spectrum
    then decides whether the stop rule is met:

    * ``on-activation``: stop once the site classifies as SnV, either at a
      halt or at the end of a segment;
    * ``on-deactivation``: stop at the first confirmed Deactivation;
    * ``max-cycles``: never stop early.
    """
    rates = rates or RateModel.default()
    sp = species or Species.default()
    targets = protocol.targets if protocol.targets is not None else tuple(range(array.n_sites))
    for t in targets:
        if not 0 <= t < array.n_sites:
            raise InvalidInputError(f"target site {t} outside the array")
    reference = background_reference(sp, protocol.acquisition)
    pos = array.positions
    log: List[Event] = []
    site_reports = []
    for target in targets:
        seg = replace(protocol.segment, focus=tuple(pos[target]))
        fb_events: List[dict] = []
        cycles = 0
        stopped = False
        labels = []
        while cycles < protocol.max_cycles and not stopped:
            cycles += 1
            before = array
            array, ev = anneal(before, seg, rates, sp)
            halt = None
            if protocol.monitor and seg.duration > 0:
                st0 = State(int(before.state[target]))
                tl = _timeline(st0, float(before.zpl[target]), ev, target)
                trace = emit_spad_trace(tl, protocol.window, protocol.bin_width, before.time,
                                        before.time + seg.duration, site=before.site(target), species=sp,
                                        noise_seed=_sub_seed(seed, target, cycles, 0))
                if len(trace) >= 2 * protocol.min_dwell_bins:
                    found = detect_changepoints(trace, protocol.threshold_sigma, protocol.min_dwell_bins)
                    if protocol.stop_rule == "on-deactivation":
                        found = [f for f in found if f.kind == DEACTIVATION]
                    if found and protocol.stop_rule != "max-cycles":
                        halt = found[0]
                    for f in (found[:1] if halt else found):
                        fb_events.append({**f.to_dict(), "cycle": cycles})
            if halt is not None and halt.detected_at < before.time + seg.duration:
                array, ev = anneal(before, replace(seg, duration=halt.detected_at - before.time), rates, sp)
            log.extend(ev)
            label = None
            if protocol.measure == "spectrum" and (protocol.monitor or halt is not None):
                spec = emit_spectrum(array.site(target), protocol.acquisition, _sub_seed(seed, target, cycles, 1),
                                     species=sp)
                label = classify_site(subtract_baseline(spec, "reference", reference=reference))
                labels.append(label)
            if protocol.stop_rule == "on-activation" and label == "SnV":
                stopped = True
            elif protocol.stop_rule == "on-deactivation" and halt is not None:
                stopped = True
        site_reports.append({"site": int(target), "final_state": State(int(array.state[target])).label,
                             "cycles": cycles, "stopped_by_rule": stopped, "feedback_events": fb_events,
                             "classifications": labels})
    log.sort(key=lambda e: (e.time, e.site))
    return CampaignReport(array, log, site_reports, protocol, int(seed))
