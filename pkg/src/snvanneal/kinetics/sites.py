"""Implantation and stochastic annealing of an array of implantation sites.

Each site carries one tracked Sn complex whose state follows a
continuous-time Markov chain:

    Dark --escape--> TypeII --escape--> SnV --deactivate--> Quenched
    Dark <-recapture- TypeII <-recapture- SnV

Randomness is drawn from per-site streams keyed by
``(seed, site_id, purpose, segment)``, so any subset of sites can be
simulated in any order with identical results.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .._validation import check_positive
from ..exceptions import InvalidInputError
from .model import RateModel, Species

_IMPLANT_STREAM = 0
_ANNEAL_STREAM = 1


class State(enum.IntEnum):
    EMPTY = 0
    DARK = 1
    TYPEII = 2
    SNV = 3
    QUENCHED = 4

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "State":
        try:
            return _FROM_LABEL[label]
        except KeyError:
            raise InvalidInputError(f"unknown state {label!r}") from None

    @property
    def emitting(self) -> bool:
        return self in (State.TYPEII, State.SNV)


_LABELS = {State.EMPTY: "Empty", State.DARK: "Dark", State.TYPEII: "TypeII", State.SNV: "SnV",
           State.QUENCHED: "Quenched"}
_FROM_LABEL = {v: k for k, v in _LABELS.items()}


@dataclass(frozen=True)
class AnnealSegment:
    """One laser exposure: pulse energy (nJ), duration (s), focus (µm) or None for a raster."""

    pulse_energy: float
    duration: float
    focus: Optional[tuple] = None

    def __post_init__(self):
        check_positive(self.pulse_energy, "pulse_energy")
        check_positive(self.duration, "duration", strict=False)
        if self.focus is not None:
            f = tuple(float(v) for v in self.focus)
            if len(f) != 2:
                raise InvalidInputError("focus must be (x, y) in µm")
            object.__setattr__(self, "focus", f)

    @classmethod
    def from_dict(cls, d) -> "AnnealSegment":
        return cls(float(d["pulse_nJ"]), float(d["duration_s"]), d.get("focus_um"))

    def to_dict(self) -> dict:
        return {"pulse_nJ": self.pulse_energy, "duration_s": self.duration,
                "focus_um": list(self.focus) if self.focus is not None else None}


@dataclass(frozen=True)
class Event:
    """A state transition of one site at campaign time ``time`` (s)."""

    time: float
    site: int
    src: State
    dst: State
    zpl_nm: Optional[float] = None
    segment: int = 0

    def to_dict(self) -> dict:
        return {"t_s": self.time, "site": self.site, "from": self.src.label, "to": self.dst.label,
                "zpl_nm": self.zpl_nm, "segment": self.segment}

    @classmethod
    def from_dict(cls, d) -> "Event":
        return cls(float(d["t_s"]), int(d["site"]), State.from_label(d["from"]), State.from_label(d["to"]),
                   d.get("zpl_nm"), int(d.get("segment", 0)))


@dataclass(frozen=True)
class SiteState:
    """Read-only view of one implantation site.

    ``zpl_center`` is None unless the site is TypeII or SnV.  ``rng_stream``
    is the ``(seed, site_id)`` pair keying the site's random streams.
    """

    site_id: int
    position: tuple
    dose: int
    n_sv: int
    state: State
    zpl_center: Optional[float]
    gr1_population: int
    rng_stream: tuple

    def to_dict(self) -> dict:
        return {"site": self.site_id, "x_um": self.position[0], "y_um": self.position[1], "dose": self.dose,
                "n_sv": self.n_sv, "state": self.state.label, "zpl_nm": self.zpl_center,
                "gr1_population": self.gr1_population}


def _site_rng(seed: int, site: int, purpose: int, segment: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(site), purpose, int(segment)])


@dataclass(frozen=True, eq=False)
class SiteArray:
    """State of every implantation site plus the campaign clock.

    Arrays are indexed by ``site_id``; sites are numbered row-major.
    ``segments_run`` counts anneal calls and keys the per-segment random
    streams.
    """

    rows: int
    cols: int
    pitch: float
    mean_dose: float
    seed: int
    dose: np.ndarray
    n_sv: np.ndarray
    state: np.ndarray
    zpl: np.ndarray
    reservoir: np.ndarray
    graphitized: np.ndarray
    time: float = 0.0
    segments_run: int = 0

    def __post_init__(self):
        for name in ("dose", "n_sv", "state", "zpl", "reservoir", "graphitized"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols

    @property
    def positions(self) -> np.ndarray:
        """(x, y) of each site in µm; site ``i * cols + j`` sits at ``(j, i) * pitch``."""
        ii, jj = np.divmod(np.arange(self.n_sites), self.cols)
        return np.column_stack([jj, ii]).astype(float) * self.pitch

    def site(self, i: int) -> SiteState:
        if not 0 <= i < self.n_sites:
            raise InvalidInputError(f"site {i} outside 0..{self.n_sites - 1}")
        st = State(int(self.state[i]))
        x, y = self.positions[i]
        return SiteState(int(i), (float(x), float(y)), int(self.dose[i]), int(self.n_sv[i]), st,
                         float(self.zpl[i]) if st.emitting else None, int(self.dose[i]), (self.seed, int(i)))

    def states(self) -> List[State]:
        return [State(int(s)) for s in self.state]

    def counts(self) -> dict:
        return {s.label: int(np.sum(self.state == s)) for s in State}

    def evolve(self, **changes) -> "SiteArray":
        return replace(self, **changes)

    def snapshot(self) -> dict:
        """JSON-ready site table."""
        pos = self.positions
        sites = []
        for i in range(self.n_sites):
            st = State(int(self.state[i]))
            sites.append({"site": i, "x_um": float(pos[i, 0]), "y_um": float(pos[i, 1]), "dose": int(self.dose[i]),
                          "n_sv": int(self.n_sv[i]), "state": st.label,
                          "zpl_nm": float(self.zpl[i]) if st.emitting else None,
                          "gr1_population": int(self.dose[i]), "reservoir": float(self.reservoir[i]),
                          "graphitized": bool(self.graphitized[i])})
        return {"rows": self.rows, "cols": self.cols, "pitch_um": self.pitch, "mean_dose": self.mean_dose,
                "seed": self.seed, "time_s": self.time, "segments_run": self.segments_run, "sites": sites}


def implant(rows: int, cols: int, pitch: float, mean_dose: float, seed: int,
            rates: Optional[RateModel] = None) -> SiteArray:
    """Poisson-implanted array; each ion forms a Dark split-vacancy complex with
    probability ``rates.p_split_vacancy``."""
    if mean_dose < 0:
        raise InvalidInputError("mean dose must be >= 0")
    if rows < 1 or cols < 1:
        raise InvalidInputError("array needs at least one row and column")
    check_positive(pitch, "pitch")
    rates = rates or RateModel.default()
    n = rows * cols
    dose = np.zeros(n, dtype=np.int64)
    n_sv = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rng = _site_rng(seed, i, _IMPLANT_STREAM)
        dose[i] = rng.poisson(mean_dose)
        n_sv[i] = rng.binomial(dose[i], rates.p_split_vacancy)
    state = np.where(n_sv > 0, int(State.DARK), int(State.EMPTY)).astype(np.int8)
    return SiteArray(rows, cols, float(pitch), float(mean_dose), int(seed), dose, n_sv, state,
                     np.full(n, np.nan), np.where(n_sv > 0, rates.reservoir_initial, 0.0), np.zeros(n, bool))


def _transitions(state: int, reservoir: float, base: dict, f: float, graphitized: bool):
    """Outgoing (destination, rate) pairs for one site."""
    if state == State.DARK:
        return [] if graphitized else [(State.TYPEII, f * base["first_escape"])]
    if state == State.TYPEII:
        out = [] if graphitized else [(State.SNV, f * base["second_escape"])]
        return out + [(State.DARK, f * reservoir * base["recapture"])]
    if state == State.SNV:
        return [(State.TYPEII, f * reservoir * base["recapture"]), (State.QUENCHED, f * reservoir * base["quench"])]
    return []


_ESCAPES = {(State.DARK, State.TYPEII), (State.TYPEII, State.SNV)}


def _draw_zpl(rng, dst: State, species: Species) -> float:
    if dst == State.TYPEII:
        return float(rng.normal(species.typeii.zpl_mean_nm, species.typeii.zpl_sd_nm))
    if dst == State.SNV:
        return float(rng.normal(species.center.zpl_mean_nm, species.center.zpl_sd_nm))
    return float("nan")


def _evolve_site(i, state, reservoir, zpl, base, f, graphitized, duration, rates, species, rng, t0, seg,
                 method, dt):
    events = []
    t = 0.0
    while True:
        trans = _transitions(state, reservoir, base, f, graphitized)
        total = sum(k for _, k in trans)
        if total <= 0:
            break
        if method == "exact":
            t += rng.exponential(1.0 / total)
            if t > duration:
                break
        else:
            p_step = -np.expm1(-total * dt)
            n_steps = int(np.floor((duration - t) / dt + 1e-9))
            if n_steps <= 0:
                break
            # first successful step of a Bernoulli sequence
            k = int(rng.geometric(p_step)) if p_step > 0 else n_steps + 1
            if k > n_steps:
                break
            t += k * dt
        u = rng.random() * total
        acc = 0.0
        dst = trans[-1][0]
        for cand, k in trans:
            acc += k
            if u < acc:
                dst = cand
                break
        src = State(state)
        if (src, dst) in _ESCAPES and rng.random() < rates.p_loss:
            reservoir = max(reservoir - 1.0, 0.0)
        zpl = _draw_zpl(rng, dst, species)
        events.append(Event(t0 + t, i, src, dst, zpl if dst.emitting else None, seg))
        state = int(dst)
    return state, reservoir, zpl, events


def anneal(array: SiteArray, segment: AnnealSegment, rates: Optional[RateModel] = None,
           species: Optional[Species] = None, method: str = "exact", dt: Optional[float] = None,
           sites: Optional[Iterable[int]] = None):
    """Evolve every site through one laser segment.

    Parameters
    ----------
    method : {"exact", "fixed_dt"}
        Exact exponential waiting times (default) or Bernoulli steps of ``dt``.
    dt : float, optional
        Step for ``fixed_dt``; must satisfy ``dt <= 0.1 / k_max``.
    sites : iterable of int, optional
        Restrict evolution to these sites (others are left untouched);
        the result for a site does not depend on which others are included.

    Returns
    -------
    (SiteArray, list of Event)
        Events are sorted by (time, site).
    """
    rates = rates or RateModel.default()
    species = species or Species.default()
    if method not in ("exact", "fixed_dt"):
        raise InvalidInputError("method must be 'exact' or 'fixed_dt'")
    seg = array.segments_run
    if segment.duration == 0:
        return array.evolve(segments_run=seg + 1), []
    base = rates.base_rates(segment.pulse_energy)
    pos = array.positions
    if segment.focus is None:
        falloff = np.ones(array.n_sites)
    else:
        falloff = rates.falloff(np.linalg.norm(pos - np.asarray(segment.focus), axis=1))
    if method == "fixed_dt":
        k_max = max(base.values()) * max(float(np.max(array.reservoir, initial=0.0)), 1.0)
        if dt is None or not dt > 0 or dt > 0.1 / k_max:
            raise InvalidInputError(f"fixed_dt needs 0 < dt <= {0.1 / k_max:.3g} s")
    graph_now = rates.graphitizes(segment.pulse_energy, segment.duration)

    state = np.array(array.state, dtype=np.int8)
    zpl = np.array(array.zpl)
    reservoir = np.array(array.reservoir)
    graphitized = np.array(array.graphitized)
    events: List[Event] = []
    chosen = range(array.n_sites) if sites is None else sorted(set(int(s) for s in sites))
    for i in chosen:
        if falloff[i] <= 0 or state[i] in (State.EMPTY, State.QUENCHED):
            continue
        rng = _site_rng(array.seed, i, _ANNEAL_STREAM, seg)
        s, r, z, ev = _evolve_site(i, int(state[i]), float(reservoir[i]), float(zpl[i]), base, float(falloff[i]),
                                   bool(graphitized[i]), segment.duration, rates, species, rng, array.time, seg,
                                   method, dt)
        state[i], reservoir[i], zpl[i] = s, r, z
        events.extend(ev)
    if graph_now:
        # damage is flagged at the end of the exposure and blocks later activation
        graphitized |= falloff > 0.5
    events.sort(key=lambda e: (e.time, e.site))
    out = array.evolve(state=state, zpl=zpl, reservoir=reservoir, graphitized=graphitized,
                       time=array.time + segment.duration, segments_run=seg + 1)
    return out, events


def run_segments(array: SiteArray, segments: Sequence[AnnealSegment], rates: Optional[RateModel] = None,
                 species: Optional[Species] = None):
    """Apply segments in order; returns the final array and the merged event log."""
    log: List[Event] = []
    for seg in segments:
        array, ev = anneal(array, seg, rates, species)
        log.extend(ev)
    return array, log


def replay(initial: SiteArray, events: Iterable[Event]) -> np.ndarray:
    """Final per-site states reconstructed from an initial array and its event log.

    Raises
    ------
    InvalidInputError
        If an event's source state disagrees with the replayed state.
    """
    state = np.array(initial.state, dtype=np.int8)
    for e in events:
        if state[e.site] != e.src:
            raise InvalidInputError(f"event at t={e.time} for site {e.site} starts from {e.src.label}, "
                                    f"replayed state is {State(int(state[e.site])).label}")
        state[e.site] = e.dst
    return state


def site_timeline(events: Iterable[Event], site: int, initial: State) -> list:
    """[(time, state, zpl)] for one site, starting with ``(−inf, initial, None)``."""
    out = [(-np.inf, initial, None)]
    for e in events:
        if e.site == site:
            out.append((e.time, e.dst, e.zpl_nm))
    return out


def write_event_log(events: Iterable[Event], path) -> None:
    """JSON-lines, one transition per line, keys sorted."""
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_event_log(path) -> List[Event]:
    with open(path) as fh:
        return [Event.from_dict(json.loads(line)) for line in fh if line.strip()]
