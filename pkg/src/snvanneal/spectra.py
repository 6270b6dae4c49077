"""Optical emission spectra: representation, unit conversion, window
integration, baseline removal and zero-phonon-line peak fitting.

All spectra are immutable :class:`Spectrum` values.  Wavelength grids are in
nm, energy grids in eV; the unit is carried on the object so that window
integration and peak fitting can refuse mismatched inputs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _lsq
from ._validation import (as_1d_float, check_positive, check_same_length,
                          check_strictly_increasing, readonly)
from .exceptions import EmptyWindowError, FitFailure, InvalidInputError

#: Photon energy (eV) times wavelength (nm).
HC_EV_NM = 1239.841984

_GAUSS_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class SpectrumMeta:
    integration_s: Optional[float] = None
    temperature_K: Optional[float] = None
    excitation_nm: Optional[float] = None

    def to_dict(self) -> dict:
        return {"integration_s": self.integration_s, "temperature_K": self.temperature_K,
                "excitation_nm": self.excitation_nm}


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Sampled emission intensity.

    Parameters
    ----------
    grid : array-like
        Strictly increasing sample positions (nm, or eV when ``unit="eV"``).
    intensity : array-like
        Counts per sample.  Negative values are only accepted when
        ``baseline_subtracted`` is set.
    meta : SpectrumMeta
        Acquisition metadata.
    unit : {"nm", "eV"}
    baseline_subtracted : bool
    """

    grid: np.ndarray
    intensity: np.ndarray
    meta: SpectrumMeta = field(default_factory=SpectrumMeta)
    unit: str = "nm"
    baseline_subtracted: bool = False

    def __post_init__(self):
        grid = as_1d_float(self.grid, "grid")
        intensity = as_1d_float(self.intensity, "intensity")
        check_same_length(grid, intensity, "grid and intensity")
        if grid.size < 2:
            raise InvalidInputError("a spectrum needs at least two samples")
        check_strictly_increasing(grid, "grid")
        if self.unit not in ("nm", "eV"):
            raise InvalidInputError(f"unknown grid unit {self.unit!r}")
        if not self.baseline_subtracted and np.any(intensity < 0):
            raise InvalidInputError("negative intensities require baseline_subtracted=True")
        object.__setattr__(self, "grid", readonly(grid))
        object.__setattr__(self, "intensity", readonly(intensity))

    def __len__(self):
        return self.grid.size

    def with_intensity(self, intensity, **changes) -> "Spectrum":
        return replace(self, intensity=intensity, **changes)


@dataclass(frozen=True)
class SpectralWindow:
    """Closed wavelength interval ``[lo, hi]`` in nm."""

    label: str
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise InvalidInputError(f"window bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    def padded(self, margin: float) -> "SpectralWindow":
        return SpectralWindow(self.label, self.lo - margin, self.hi + margin)


TYPE_II_SN = SpectralWindow("TypeIISn", 590.0, 600.0)
SNV = SpectralWindow("SnV", 615.0, 625.0)
GR1 = SpectralWindow("GR1", 730.0, 750.0)
BUILTIN_WINDOWS = {w.label: w for w in (TYPE_II_SN, SNV, GR1)}

# ZPL integration ranges used for polarimetry.
SNV_GAMMA = SpectralWindow("custom", 619.0, 622.0)
SNV_DELTA = SpectralWindow("custom", 622.0, 625.0)
TYPE_II_ZPL = SpectralWindow("custom", 593.0, 595.0)


def window_from_label(label: str) -> SpectralWindow:
    try:
        return BUILTIN_WINDOWS[label]
    except KeyError:
        raise InvalidInputError(f"unknown window {label!r}; expected one of {sorted(BUILTIN_WINDOWS)}") from None


# --------------------------------------------------------------------------
# unit conversion and integration
# --------------------------------------------------------------------------

def to_energy(s: Spectrum, jacobian: bool = True) -> Spectrum:
    """Convert a wavelength spectrum to photon energy (eV).

    With ``jacobian=True`` (default) the intensity is multiplied by
    ``lambda**2 / hc`` so that integrated counts are preserved.
    """
    if s.unit != "nm":
        raise InvalidInputError("to_energy expects a wavelength (nm) spectrum")
    if np.any(s.grid <= 0):
        raise InvalidInputError("wavelengths must be positive")
    energy = HC_EV_NM / s.grid[::-1]
    intensity = s.intensity[::-1]
    if jacobian:
        intensity = intensity * s.grid[::-1] ** 2 / HC_EV_NM
    return Spectrum(energy, intensity, s.meta, "eV", s.baseline_subtracted)


def to_wavelength(s: Spectrum, jacobian: bool = True) -> Spectrum:
    """Inverse of :func:`to_energy`."""
    if s.unit != "eV":
        raise InvalidInputError("to_wavelength expects an energy (eV) spectrum")
    if np.any(s.grid <= 0):
        raise InvalidInputError("photon energies must be positive")
    wavelength = HC_EV_NM / s.grid[::-1]
    intensity = s.intensity[::-1]
    if jacobian:
        intensity = intensity * s.grid[::-1] ** 2 / HC_EV_NM
    return Spectrum(wavelength, intensity, s.meta, "nm", s.baseline_subtracted)


def integrate_range(grid: np.ndarray, values: np.ndarray, lo: float, hi: float) -> float:
    """Trapezoidal integral of piecewise-linear samples over ``[lo, hi]``.

    The interval is clipped to the grid; partial end bins use linearly
    interpolated edge values.
    """
    a = max(lo, grid[0])
    b = min(hi, grid[-1])
    if not a < b:
        raise EmptyWindowError(f"range [{lo}, {hi}] does not overlap grid [{grid[0]}, {grid[-1]}]")
    inner = (grid > a) & (grid < b)
    x = np.concatenate(([a], grid[inner], [b]))
    y = np.concatenate(([np.interp(a, grid, values)], values[inner], [np.interp(b, grid, values)]))
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def integrate_window(s: Spectrum, w: SpectralWindow) -> float:
    """Integrated counts (counts·nm) of ``s`` inside window ``w``."""
    if s.unit != "nm":
        raise InvalidInputError("windows are defined in nm; convert the spectrum first")
    return integrate_range(s.grid, s.intensity, w.lo, w.hi)


# --------------------------------------------------------------------------
# baseline handling
# --------------------------------------------------------------------------

def _band_mask(grid, bands):
    mask = np.zeros(grid.size, dtype=bool)
    for lo, hi in bands:
        if not lo < hi:
            raise InvalidInputError(f"quiet band must satisfy lo < hi, got ({lo}, {hi})")
        mask |= (grid >= lo) & (grid <= hi)
    return mask


def _normalise_bands(quiet_bands):
    if quiet_bands is None:
        return None
    arr = np.asarray(quiet_bands, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError("quiet bands must be (lo, hi) pairs")
    return [tuple(b) for b in arr]


def estimate_baseline(s: Spectrum, method: str, quiet_bands=None, reference: Optional[Spectrum] = None) -> np.ndarray:
    """Baseline sampled on ``s.grid`` for the given method."""
    if method == "reference":
        if reference is None:
            raise InvalidInputError("reference method needs a reference spectrum")
        if reference.unit != s.unit or reference.grid.shape != s.grid.shape or not np.array_equal(reference.grid, s.grid):
            raise InvalidInputError("reference spectrum must share the grid of the data")
        return np.array(reference.intensity)
    bands = _normalise_bands(quiet_bands)
    if not bands:
        raise InvalidInputError(f"{method} baseline needs at least one quiet band")
    mask = _band_mask(s.grid, bands)
    if method == "constant":
        if not mask.any():
            raise InvalidInputError("quiet band contains no samples")
        return np.full(s.grid.size, float(np.median(s.intensity[mask])))
    if method == "linear":
        if mask.sum() < 2:
            raise InvalidInputError("linear baseline needs at least two quiet samples")
        slope, intercept = np.polyfit(s.grid[mask], s.intensity[mask], 1)
        return slope * s.grid + intercept
    raise InvalidInputError(f"unknown baseline method {method!r}")


def subtract_baseline(s: Spectrum, method: str = "linear", quiet_bands=None,
                      reference: Optional[Spectrum] = None) -> Spectrum:
    """Remove a background and mark the result ``baseline_subtracted``.

    Parameters
    ----------
    method : {"constant", "linear", "reference"}
        ``constant`` subtracts the median of the quiet band(s), ``linear``
        a straight line fitted to the quiet band(s), ``reference`` a
        spectrum on the identical grid (e.g. the pre-implantation Raman
        spectrum).
    """
    baseline = estimate_baseline(s, method, quiet_bands, reference)
    return replace(s, intensity=s.intensity - baseline, baseline_subtracted=True)


# --------------------------------------------------------------------------
# peak fitting
# --------------------------------------------------------------------------

def lorentzian(x, center, fwhm, height, offset=0.0):
    hw2 = (0.5 * fwhm) ** 2
    return offset + height * hw2 / ((x - center) ** 2 + hw2)


def gaussian(x, center, fwhm, height, offset=0.0):
    sigma = fwhm * _GAUSS_FWHM_TO_SIGMA
    return offset + height * np.exp(-0.5 * ((x - center) / sigma) ** 2)


_MODELS = {"lorentzian": lorentzian, "gaussian": gaussian}


def _lorentzian_jac(x, center, fwhm, height, offset=0.0):
    hw = 0.5 * fwhm
    d = x - center
    den = d**2 + hw**2
    shape = hw**2 / den
    return np.column_stack([2.0 * height * shape * d / den, height * hw * d**2 / den**2, shape,
                            np.ones_like(x)])


def _gaussian_jac(x, center, fwhm, height, offset=0.0):
    sigma = fwhm * _GAUSS_FWHM_TO_SIGMA
    d = x - center
    e = np.exp(-0.5 * (d / sigma) ** 2)
    return np.column_stack([height * e * d / sigma**2, height * e * d**2 / sigma**3 * _GAUSS_FWHM_TO_SIGMA, e,
                            np.ones_like(x)])


_JACOBIANS = {"lorentzian": _lorentzian_jac, "gaussian": _gaussian_jac}


def peak_area(model: str, height: float, fwhm: float) -> float:
    if model == "lorentzian":
        return math.pi * height * fwhm / 2.0
    if model == "gaussian":
        return height * fwhm * math.sqrt(math.pi / (4.0 * math.log(2.0)))
    raise InvalidInputError(f"unknown peak model {model!r}")


@dataclass(frozen=True, eq=False)
class PeakFit:
    """Result of a single-peak fit.  Units follow the spectrum grid."""

    center: float
    fwhm: float
    height: float
    offset: float
    model: str = "lorentzian"
    covariance: np.ndarray = field(default_factory=lambda: np.full((4, 4), np.nan))

    def __post_init__(self):
        if not self.fwhm > 0:
            raise InvalidInputError("fwhm must be positive")
        if self.model not in _MODELS:
            raise InvalidInputError(f"unknown peak model {self.model!r}")

    @property
    def area(self) -> float:
        return peak_area(self.model, self.height, self.fwhm)

    @property
    def uncertainties(self) -> dict:
        err = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(("center", "fwhm", "height", "offset"), err))

    def evaluate(self, x):
        return _MODELS[self.model](np.asarray(x, dtype=float), self.center, self.fwhm, self.height, self.offset)

    def to_dict(self) -> dict:
        err = self.uncertainties
        return {
            "model": self.model,
            "center_nm": self.center,
            "fwhm_nm": self.fwhm,
            "height_counts": self.height,
            "offset_counts": self.offset,
            "area_counts_nm": self.area,
            "center_err_nm": err["center"],
            "fwhm_err_nm": err["fwhm"],
            "height_err_counts": err["height"],
            "offset_err_counts": err["offset"],
        }


def _half_max_width(x, y, i_peak, base):
    half = base + 0.5 * (y[i_peak] - base)
    left = i_peak
    while left > 0 and y[left] > half:
        left -= 1
    right = i_peak
    while right < y.size - 1 and y[right] > half:
        right += 1
    return max(x[right] - x[left], 2.0 * np.median(np.diff(x)))


def _seed_peak(x, y, seed_center, search):
    near = np.flatnonzero(np.abs(x - seed_center) <= search)
    if near.size == 0:
        raise FitFailure("no samples near the seed center")
    i_peak = near[np.argmax(y[near])]
    base = float(np.percentile(y, 10))
    return i_peak, base


def fit_peak(s: Spectrum, seed_center: float, model: str = "lorentzian",
             seed_fwhm: Optional[float] = None, window_fwhm: float = 5.0,
             min_snr: float = 3.0, bounds: Optional[tuple] = None, xtol: float = _lsq.XTOL) -> PeakFit:
    """Fit one line shape plus constant offset near ``seed_center``.

    Parameters
    ----------
    s : Spectrum
    seed_center : float
        Initial center, same unit as the grid.
    model : {"lorentzian", "gaussian"}
    seed_fwhm : float, optional
        Initial width; estimated from the half-maximum crossings if omitted.
    window_fwhm : float
        Half-width of the fitted region in units of the seed FWHM.
    min_snr : float
        Fitted height must exceed this multiple of the residual RMS.
    bounds : (lo, hi), optional
        Restrict the fitted region (used by multiplet refinement).
    xtol : float
        Relative parameter-step tolerance of the optimiser.

    Raises
    ------
    FitFailure
        Flat data, too few samples, non-convergence or an insignificant peak.
    """
    if model not in _MODELS:
        raise InvalidInputError(f"unknown peak model {model!r}")
    x, y = s.grid, s.intensity
    if not x[0] <= seed_center <= x[-1]:
        raise InvalidInputError(f"seed center {seed_center} outside grid")
    lo_b, hi_b = bounds if bounds is not None else (x[0], x[-1])
    sel = (x >= lo_b) & (x <= hi_b)
    xs, ys = x[sel], y[sel]
    if xs.size < 5 or np.ptp(ys) == 0:
        raise FitFailure("degenerate (flat) data near the seed")

    step = float(np.median(np.diff(xs)))
    search = 3.0 * seed_fwhm if seed_fwhm else max(10 * step, 0.02 * (xs[-1] - xs[0]))
    i_peak, base = _seed_peak(xs, ys, seed_center, search)
    if ys[i_peak] <= base:
        raise FitFailure("no peak above the background near the seed")
    width = seed_fwhm if seed_fwhm else _half_max_width(xs, ys, i_peak, base)
    c0 = xs[i_peak]
    region = np.abs(xs - c0) <= window_fwhm * width
    if np.count_nonzero(np.abs(xs - c0) <= 3 * width) < 5:
        raise FitFailure("fewer than 5 samples within 3 seed widths")
    xr, yr = xs[region], ys[region]
    if np.ptp(yr) == 0:
        raise FitFailure("degenerate (flat) data near the seed")

    fn = _MODELS[model]
    scale = max(np.ptp(yr), 1e-300)

    jac_fn = _JACOBIANS[model]

    def residual(p):
        return (fn(xr, *p) - yr) / scale

    def jacobian(p):
        return jac_fn(xr, *p) / scale

    p0 = [c0, width, ys[i_peak] - base, base]
    lo = [xr[0], 0.1 * step, 0.0, -np.inf]
    hi = [xr[-1], 10.0 * (xr[-1] - xr[0]), np.inf, np.inf]
    res = _lsq.fit(residual, p0, bounds=(lo, hi), xtol=xtol, jac=jacobian)
    center, fwhm, height, offset = res.params
    cov = res.covariance * scale**2
    rms = float(np.sqrt(np.mean((res.residuals * scale) ** 2)))
    if not fwhm > 0 or height <= 0:
        raise FitFailure("fit converged to a non-peak", last_iterate=res.params)
    if not xr[0] < center < xr[-1]:
        raise FitFailure("fitted center left the fit region", last_iterate=res.params)
    if height <= min_snr * rms:
        raise FitFailure("peak not significant against residual noise", last_iterate=res.params)
    return PeakFit(float(center), float(fwhm), float(height), float(offset), model, cov)


def find_multiplet(s: Spectrum, window: SpectralWindow, min_prominence: float,
                   model: str = "lorentzian") -> list:
    """Locate and fit every peak in ``window`` whose prominence exceeds
    ``min_prominence``.  Returns PeakFit objects sorted by center."""
    sel = (s.grid >= window.lo) & (s.grid <= window.hi)
    if sel.sum() < 3:
        return []
    x, y = s.grid[sel], s.intensity[sel]
    idx, props = find_peaks(y, prominence=min_prominence)
    if idx.size == 0:
        return []
    centers = x[idx]
    fits = []
    for k, i in enumerate(idx):
        left = 0.5 * (centers[k - 1] + centers[k]) if k > 0 else window.lo
        right = 0.5 * (centers[k] + centers[k + 1]) if k + 1 < idx.size else window.hi
        try:
            fit = fit_peak(s, float(x[i]), model=model, bounds=(left, right))
        except FitFailure:
            continue
        if window.lo <= fit.center <= window.hi:
            fits.append(fit)
    return sorted(fits, key=lambda f: f.center)


def track_zpl(series: Sequence[Spectrum], seed_center: float, model: str = "lorentzian",
              **fit_kwargs) -> list:
    """Fit the same line through a time series.

    Each fit is seeded with the previous successful center.  A spectrum in
    which the line cannot be fitted yields ``None`` at that index.
    """
    if len(series) == 0:
        raise InvalidInputError("track_zpl needs at least one spectrum")
    out = []
    seed = seed_center
    for s in series:
        try:
            fit = fit_peak(s, seed, model=model, **fit_kwargs)
        except FitFailure:
            out.append(None)
            continue
        out.append(fit)
        seed = fit.center
    return out


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_spectrum_csv(s: Spectrum, path) -> None:
    """Write ``wavelength_nm,counts`` CSV plus a JSON metadata sidecar."""
    path = Path(path)
    if s.unit != "nm":
        raise InvalidInputError("only wavelength spectra are stored as CSV")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "counts"])
        for g, c in zip(s.grid, s.intensity):
            w.writerow([repr(float(g)), repr(float(c))])
    meta = s.meta.to_dict()
    meta["baseline_subtracted"] = s.baseline_subtracted
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def read_spectrum_csv(path) -> Spectrum:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or [c.strip() for c in rows[0]] != ["wavelength_nm", "counts"]:
        raise InvalidInputError(f"{path}: expected header 'wavelength_nm,counts'")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    meta, flag = SpectrumMeta(), False
    side = _sidecar(path)
    if side.exists():
        raw = json.loads(side.read_text())
        flag = bool(raw.pop("baseline_subtracted", False))
        meta = SpectrumMeta(**{k: raw.get(k) for k in ("integration_s", "temperature_K", "excitation_nm")})
    return Spectrum(data[:, 0], data[:, 1], meta, "nm", flag)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

class PeakFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_peak`.

    After ``fit`` the result is in ``peak_`` and mirrored in ``center_``,
    ``fwhm_``, ``height_``, ``offset_`` and ``area_``.
    """

    def __init__(self, seed_center=None, model="lorentzian", seed_fwhm=None, window_fwhm=5.0, min_snr=3.0):
        self.seed_center = seed_center
        self.model = model
        self.seed_fwhm = seed_fwhm
        self.window_fwhm = window_fwhm
        self.min_snr = min_snr

    def fit(self, X: Spectrum, y=None):
        seed = self.seed_center
        if seed is None:
            seed = float(X.grid[np.argmax(X.intensity)])
        self.peak_ = fit_peak(X, seed, model=self.model, seed_fwhm=self.seed_fwhm,
                              window_fwhm=self.window_fwhm, min_snr=self.min_snr)
        self.center_ = self.peak_.center
        self.fwhm_ = self.peak_.fwhm
        self.height_ = self.peak_.height
        self.offset_ = self.peak_.offset
        self.area_ = self.peak_.area
        return self

    def predict(self, X):
        check_is_fitted(self, "peak_")
        grid = X.grid if isinstance(X, Spectrum) else np.asarray(X, dtype=float)
        return self.peak_.evaluate(grid)


class BaselineSubtractor(TransformerMixin, BaseEstimator):
    """Learn a baseline from one spectrum and subtract it from others.

    ``fit`` on the reference (or on the data itself for the ``constant`` and
    ``linear`` methods); ``transform`` returns baseline-subtracted spectra.
    """

    def __init__(self, method="linear", quiet_bands=None):
        self.method = method
        self.quiet_bands = quiet_bands

    def fit(self, X: Spectrum, y=None):
        if self.method == "reference":
            self.baseline_ = np.array(X.intensity)
        else:
            self.baseline_ = estimate_baseline(X, self.method, self.quiet_bands)
        self.grid_ = np.array(X.grid)
        return self

    def transform(self, X: Spectrum) -> Spectrum:
        check_is_fitted(self, "baseline_")
        if X.grid.shape != self.grid_.shape or not np.array_equal(X.grid, self.grid_):
            raise InvalidInputError("spectrum grid differs from the fitted baseline grid")
        return replace(X, intensity=X.intensity - self.baseline_, baseline_subtracted=True)
