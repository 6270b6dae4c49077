"""Optical output of simulated sites: spectra, SPAD count traces and
array-integrated window intensities.

Line shapes come from :mod:`snvanneal.vibronic`.  Each species' shape is
synthesised once at its mean ZPL and shifted rigidly in photon energy to
the ZPL drawn for a particular site, so window fractions reduce to lookups
in a cumulative table.

Absolute brightness constants are configuration values with no measured
counterpart; only ratios between species carry meaning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import ndtr

from .._validation import as_1d_float, check_positive
from ..spectra import GR1, HC_EV_NM, SNV, TYPE_II_SN, Spectrum, SpectralWindow, SpectrumMeta
from ..traces import DEFAULT_BIN_S, SpadTrace
from ..vibronic import VibronicModel, default_energy_grid, synthesize
from .model import LineParams, RateModel, Species
from .sites import AnnealSegment, SiteArray, SiteState, State, implant, run_segments

PLANCK_EV_S = 4.135667696e-15
DIAMOND_RAMAN_CM = 1332.0
SECOND_ORDER_CENTER_CM = 2450.0
SECOND_ORDER_SD_CM = 120.0
FIRST_ORDER_FWHM_NM = 0.6
DEFAULT_GRID = np.round(np.arange(560.0, 800.0 + 1e-9, 0.1), 10)


# --------------------------------------------------------------------------
# line templates
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LineTemplate:
    """Unit-area emission density versus photon-energy offset from the ZPL.

    Attributes
    ----------
    offsets : ndarray
        ``E - E_zpl`` in eV, ascending.
    density : ndarray
        Density per eV.
    cdf : ndarray
        Cumulative integral of ``density``, ending at 1.
    """

    offsets: np.ndarray
    density: np.ndarray
    cdf: np.ndarray

    def density_nm(self, wavelength, zpl_nm: float) -> np.ndarray:
        """Density per nm on ``wavelength`` for a line centred at ``zpl_nm``."""
        wl = np.asarray(wavelength, dtype=float)
        off = HC_EV_NM / wl - HC_EV_NM / zpl_nm
        return np.interp(off, self.offsets, self.density, left=0.0, right=0.0) * HC_EV_NM / wl**2

    def fraction(self, lo: float, hi: float, zpl_nm) -> np.ndarray:
        """Share of the emission falling in ``[lo, hi]`` nm; vectorised over ``zpl_nm``."""
        e_zpl = HC_EV_NM / np.asarray(zpl_nm, dtype=float)
        top = np.interp(HC_EV_NM / lo - e_zpl, self.offsets, self.cdf, left=0.0, right=1.0)
        bottom = np.interp(HC_EV_NM / hi - e_zpl, self.offsets, self.cdf, left=0.0, right=1.0)
        return top - bottom


@lru_cache(maxsize=64)
def line_template(zpl_nm: float, huang_rhys: float, fwhm_nm: float, doublet_THz: float = 0.0) -> LineTemplate:
    """Template for a Franck–Condon line; a nonzero ``doublet_THz`` splits it
    into two equal components placed symmetrically about ``zpl_nm``."""
    fwhm_mev = 1000.0 * HC_EV_NM * fwhm_nm / zpl_nm**2
    m = VibronicModel.from_wavelength(zpl_nm, huang_rhys, zpl_width=fwhm_mev)
    energy = default_energy_grid(m)
    dens = synthesize(m, energy).intensity
    off = energy - m.zpl_energy
    if doublet_THz > 0:
        half = 0.5 * PLANCK_EV_S * doublet_THz * 1e12
        step = off[1] - off[0]
        n_pad = int(math.ceil(half / step)) + 1
        grid = off[0] - n_pad * step + np.arange(off.size + 2 * n_pad) * step
        dens = 0.5 * (np.interp(grid - half, off, dens, left=0.0, right=0.0)
                      + np.interp(grid + half, off, dens, left=0.0, right=0.0))
        off = grid
    cdf = cumulative_trapezoid(dens, off, initial=0.0)
    dens, cdf = dens / cdf[-1], cdf / cdf[-1]
    return LineTemplate(off, dens, cdf)


def _template(p: LineParams) -> LineTemplate:
    return line_template(p.zpl_mean_nm, p.huang_rhys, p.zpl_fwhm_nm, p.doublet_splitting_THz)


def _gr1_template(sp: Species) -> LineTemplate:
    return line_template(sp.gr1_zpl_nm, sp.gr1_huang_rhys, sp.gr1_fwhm_nm)


def _line_params(sp: Species, state: State) -> Optional[LineParams]:
    return {State.TYPEII: sp.typeii, State.SNV: sp.center}.get(State(state))


# --------------------------------------------------------------------------
# Raman and flat background
# --------------------------------------------------------------------------

def _stokes_nm(excitation_nm: float, shift_cm: float) -> float:
    return 1.0 / (1.0 / excitation_nm - shift_cm * 1e-7)


def _raman_lines(sp: Species):
    """(centre nm, sd nm, cps) for the first- and second-order diamond Raman features."""
    c1 = _stokes_nm(sp.excitation_nm, DIAMOND_RAMAN_CM)
    c2 = _stokes_nm(sp.excitation_nm, SECOND_ORDER_CENTER_CM)
    sd2 = SECOND_ORDER_SD_CM * 1e-7 * c2**2
    return ((c1, FIRST_ORDER_FWHM_NM / 2.3548200450309493, sp.raman_first_order_cps),
            (c2, sd2, sp.raman_second_order_cps))


def background_density(wavelength, species: Optional[Species] = None) -> np.ndarray:
    """Raman plus flat background in counts/s per nm."""
    sp = species or Species.default()
    wl = np.asarray(wavelength, dtype=float)
    out = np.full(wl.shape, sp.flat_cps_per_nm)
    for c, sd, cps in _raman_lines(sp):
        out += cps * np.exp(-0.5 * ((wl - c) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    return out


def background_rate(window: SpectralWindow, species: Optional[Species] = None) -> float:
    """Background counts/s inside ``window``."""
    sp = species or Species.default()
    rate = sp.flat_cps_per_nm * (window.hi - window.lo)
    for c, sd, cps in _raman_lines(sp):
        rate += cps * (ndtr((window.hi - c) / sd) - ndtr((window.lo - c) / sd))
    return float(rate)


# --------------------------------------------------------------------------
# per-site rates
# --------------------------------------------------------------------------

def emitter_window_rate(state, zpl_nm, n_sv, window: SpectralWindow, species: Optional[Species] = None):
    """Counts/s of the Sn emitter inside ``window``; zero unless TypeII or SnV.

    Vectorised over ``state``, ``zpl_nm`` and ``n_sv``.
    """
    sp = species or Species.default()
    state = np.asarray(state)
    zpl = np.asarray(zpl_nm, dtype=float)
    g = sp.multiplicity(n_sv)
    out = np.zeros(np.broadcast(state, zpl, g).shape)
    for st in (State.TYPEII, State.SNV):
        p = _line_params(sp, st)
        mask = np.broadcast_to(state == st, out.shape)
        if np.any(mask):
            z = np.broadcast_to(zpl, out.shape)[mask]
            out[mask] = p.brightness_cps * np.broadcast_to(g, out.shape)[mask] * _template(p).fraction(
                window.lo, window.hi, z)
    return out if out.ndim else float(out)


def gr1_window_rate(dose, window: SpectralWindow, species: Optional[Species] = None):
    """Counts/s of the GR1 population (proportional to dose) inside ``window``."""
    sp = species or Species.default()
    frac = float(_gr1_template(sp).fraction(window.lo, window.hi, sp.gr1_zpl_nm))
    return np.asarray(dose, dtype=float) * sp.gr1_brightness_per_ion * frac


def window_rate(site: SiteState, window: SpectralWindow = SNV, species: Optional[Species] = None,
                include_background: bool = True) -> float:
    """Total in-window counts/s seen from one site in its current state."""
    sp = species or Species.default()
    r = emitter_window_rate(int(site.state), site.zpl_center if site.zpl_center is not None else np.nan,
                            site.n_sv, window, sp)
    r += float(gr1_window_rate(site.dose, window, sp))
    if include_background:
        r += background_rate(window, sp)
    return float(r)


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

def expected_spectrum(site: SiteState, acquisition: float = 1.0, grid=None, species: Optional[Species] = None,
                      include_background: bool = True) -> Spectrum:
    """Noise-free counts per pixel for ``site`` integrated over ``acquisition`` seconds."""
    check_positive(acquisition, "acquisition")
    sp = species or Species.default()
    wl = DEFAULT_GRID if grid is None else as_1d_float(grid, "grid")
    dens = np.zeros_like(wl)
    p = _line_params(sp, site.state)
    if p is not None:
        dens += p.brightness_cps * float(sp.multiplicity(site.n_sv)) * _template(p).density_nm(wl, site.zpl_center)
    if site.gr1_population:
        dens += site.gr1_population * sp.gr1_brightness_per_ion * _gr1_template(sp).density_nm(wl, sp.gr1_zpl_nm)
    if include_background:
        dens += background_density(wl, sp)
    pixel = np.gradient(wl)
    return Spectrum(wl, dens * pixel * acquisition,
                    SpectrumMeta(integration_s=float(acquisition), excitation_nm=sp.excitation_nm))


def emit_spectrum(site: SiteState, acquisition: float = 1.0, noise_seed: Optional[int] = None, grid=None,
                  species: Optional[Species] = None) -> Spectrum:
    """Simulated spectrometer read-out of one site.

    Parameters
    ----------
    site : SiteState
    acquisition : float
        Integration time (s), > 0.
    noise_seed : int, optional
        Seed for Poisson shot noise; ``None`` returns expected counts.
    grid : array-like, optional
        Wavelengths (nm); defaults to 560–800 nm in 0.1 nm steps.

    Notes
    -----
    Dark, Empty and Quenched sites contribute only their GR1 population
    and the Raman/flat background.
    """
    s = expected_spectrum(site, acquisition, grid, species)
    if noise_seed is None:
        return s
    rng = np.random.default_rng([int(noise_seed), site.site_id])
    return s.with_intensity(rng.poisson(s.intensity).astype(float))


# --------------------------------------------------------------------------
# SPAD traces
# --------------------------------------------------------------------------

Timeline = Sequence[tuple]


def _as_timeline(source) -> list:
    if isinstance(source, SiteState):
        return [(-np.inf, source.state, source.zpl_center)]
    tl = [(float(t), State(s), z) for t, s, z in source]
    if not tl:
        raise ValueError("timeline is empty")
    return tl


def emit_spad_trace(timeline: Union[SiteState, Timeline], window: SpectralWindow = SNV,
                    bin_width: float = DEFAULT_BIN_S, t_start: float = 0.0, t_stop: Optional[float] = None,
                    site: Optional[SiteState] = None, species: Optional[Species] = None,
                    noise_seed: Optional[int] = None, noiseless: bool = False,
                    include_background: bool = True) -> SpadTrace:
    """Binned photon counts from a site following a piecewise-constant state history.

    Parameters
    ----------
    timeline : SiteState or sequence of (time, state, zpl_nm)
        State history sorted by time; the first entry holds from ``-inf``
        (or from ``t_start``) until the next.  A ``SiteState`` gives a
        constant trace.
    window : SpectralWindow
        Detection band.
    bin_width : float
        Bin length (s).
    t_start, t_stop : float
        Trace span; ``t_stop`` defaults to ``t_start + 60``.
    site : SiteState, optional
        Supplies ``n_sv`` and dose when ``timeline`` is a plain sequence.
    noise_seed : int, optional
        Seed for Poisson counts.
    noiseless : bool
        Return rounded expected counts instead of Poisson draws.

    Notes
    -----
    Expected counts integrate the rate exactly over each bin, so a
    transition inside a bin splits that bin's expectation proportionally.
    """
    check_positive(bin_width, "bin_width")
    sp = species or Species.default()
    if isinstance(timeline, SiteState):
        site = timeline
    tl = _as_timeline(timeline)
    n_sv = site.n_sv if site is not None else 1
    dose = site.dose if site is not None else 0
    t_stop = t_start + 60.0 if t_stop is None else t_stop
    n_bins = int(round((t_stop - t_start) / bin_width))
    if n_bins < 1:
        raise ValueError("trace span must cover at least one bin")
    const = float(gr1_window_rate(dose, window, sp)) + (background_rate(window, sp) if include_background else 0.0)
    rates = np.array([float(emitter_window_rate(int(s), np.nan if z is None else z, n_sv, window, sp)) + const
                      for _, s, z in tl])
    edges = t_start + np.arange(n_bins + 1) * bin_width
    starts = np.array([t for t, _, _ in tl])
    starts[0] = -np.inf
    # cumulative expected counts at each edge, exact for a piecewise-constant rate
    idx = np.searchsorted(starts, edges, side="right") - 1
    idx = np.clip(idx, 0, len(tl) - 1)
    seg_start = np.maximum(starts, t_start)
    cum_at_start = np.concatenate([[0.0], np.cumsum(rates[:-1] * np.diff(seg_start))])
    lam = cum_at_start[idx] + rates[idx] * (edges - seg_start[idx])
    expected = np.diff(lam)
    if noiseless:
        counts = np.rint(expected)
    else:
        rng = np.random.default_rng(None if noise_seed is None else [int(noise_seed), 7])
        counts = rng.poisson(expected)
    return SpadTrace(bin_width, counts.astype(np.int64), window, t_start)


# --------------------------------------------------------------------------
# array-level intensities
# --------------------------------------------------------------------------

DOSE_STUDY_WINDOWS = (TYPE_II_SN, SNV, GR1)


def array_window_intensity(array: SiteArray, window: SpectralWindow, acquisition: float = 1.0,
                           species: Optional[Species] = None, include_background: bool = True) -> float:
    """Expected counts from every site of ``array`` in ``window`` over ``acquisition`` seconds."""
    sp = species or Species.default()
    em = emitter_window_rate(array.state, array.zpl, array.n_sv, window, sp)
    total = float(np.sum(em)) + float(np.sum(gr1_window_rate(array.dose, window, sp)))
    if include_background:
        total += array.n_sites * background_rate(window, sp)
    return total * acquisition


def dose_study(doses: Iterable[float], rows: int = 100, cols: int = 100, pitch: float = 0.78, seed: int = 0,
               segments: Optional[Sequence[AnnealSegment]] = None, rates: Optional[RateModel] = None,
               species: Optional[Species] = None, windows: Sequence[SpectralWindow] = DOSE_STUDY_WINDOWS,
               acquisition: float = 1.0, noise: bool = True) -> List[dict]:
    """Array-integrated window intensity versus mean implantation dose.

    Each dose gets a fresh ``rows x cols`` array implanted with the same
    seed, annealed through ``segments`` (default: the preliminary raster
    exposure) and read out in every window.

    Returns
    -------
    list of dict
        Rows ``{"dose", "window", "intensity"}`` in dose-major order.
    """
    rates = rates or RateModel.default()
    sp = species or Species.default()
    if segments is None:
        from .model import resolve_preset
        segments = [AnnealSegment.from_dict(resolve_preset(None)["protocols"]["preliminary"])]
    out = []
    for k, lam in enumerate(doses):
        arr = implant(rows, cols, pitch, float(lam), seed, rates)
        arr, _ = run_segments(arr, segments, rates, sp)
        rng = np.random.default_rng([int(seed), k, 2])
        for w in windows:
            mu = array_window_intensity(arr, w, acquisition, sp)
            val = float(rng.poisson(mu)) if noise else mu
            out.append({"dose": float(lam), "window": w.label, "intensity": val})
    return out


def second_divided_differences(x, y) -> np.ndarray:
    """Second divided differences of ``y(x)``; all negative means strictly concave samples."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slopes = np.diff(y) / np.diff(x)
    return np.diff(slopes) / (0.5 * (x[2:] - x[:-2]))
