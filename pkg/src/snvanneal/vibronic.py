"""Franck–Condon model of vibronic emission: multi-phonon sideband synthesis
and Huang–Rhys factor extraction.

The single-phonon coupling spectrum lives on a uniform vibrational-energy
grid ``E_v = k * step`` (meV).  Integrals over that grid use the rectangle
rule, which is the measure under which the discrete convolution

    I_n[k] = step * sum_j I_1[j] * I_{n-1}[k - j]

conserves normalisation exactly.  Emission spectra are built on photon
energy grids in eV.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import poisson
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _lsq
from ._validation import as_1d_float, readonly
from .exceptions import FitFailure, InvalidInputError
from .spectra import HC_EV_NM, Spectrum, to_energy, to_wavelength

DEFAULT_CUTOFF_MEV = 165.0
DEFAULT_STEP_MEV = 0.5
TAIL_BOUND = 1e-6
NORM_TOL = 1e-9


# --------------------------------------------------------------------------
# phonon coupling spectra
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhononSpectrum:
    """Normalised single-phonon (or n-phonon) coupling lineshape.

    Parameters
    ----------
    density : array-like
        Samples at ``E_v = k * step`` meV, k = 0..len-1, in 1/meV.
    step : float
        Grid spacing (meV).
    cutoff : float
        Largest vibrational energy with non-zero density (meV).
    """

    density: np.ndarray
    step: float = DEFAULT_STEP_MEV
    cutoff: float = DEFAULT_CUTOFF_MEV

    def __post_init__(self):
        d = as_1d_float(self.density, "density")
        if self.step <= 0 or self.cutoff <= 0:
            raise InvalidInputError("step and cutoff must be positive")
        if np.any(d < 0):
            raise InvalidInputError("phonon density must be non-negative")
        grid = np.arange(d.size) * self.step
        if d[0] != 0.0 or np.any(d[grid > self.cutoff + 1e-9 * self.step] != 0.0):
            raise InvalidInputError("density must vanish at E_v <= 0 and beyond the cutoff")
        object.__setattr__(self, "density", readonly(d))

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.density.size) * self.step

    @property
    def norm(self) -> float:
        return float(self.density.sum() * self.step)

    @property
    def is_normalized(self) -> bool:
        return abs(self.norm - 1.0) < NORM_TOL

    @classmethod
    def from_function(cls, fn, cutoff=DEFAULT_CUTOFF_MEV, step=DEFAULT_STEP_MEV):
        """Sample ``fn(E_v)`` on ``(0, cutoff]`` and normalise."""
        n = int(round(cutoff / step))
        grid = np.arange(n + 1) * step
        d = np.where(grid > 0, np.asarray(fn(grid), dtype=float), 0.0)
        d = np.clip(d, 0.0, None)
        total = d.sum() * step
        if total <= 0:
            raise InvalidInputError("phonon density has zero weight")
        return cls(d / total, step, cutoff)

    @classmethod
    def default(cls, cutoff=DEFAULT_CUTOFF_MEV, step=DEFAULT_STEP_MEV):
        """Generic diamond-like coupling shape (acoustic band, optical band
        and a peak below the LO cutoff).  An arbitrary but smooth default."""
        def shape(e):
            bands = (0.45 * np.exp(-0.5 * ((e - 65.0) / 20.0) ** 2)
                     + 0.35 * np.exp(-0.5 * ((e - 120.0) / 15.0) ** 2)
                     + 0.20 * np.exp(-0.5 * ((e - 150.0) / 7.0) ** 2))
            taper = np.clip(e / 20.0, 0, 1) ** 2 * np.clip(1.0 - (e / cutoff) ** 8, 0, None)
            return bands * taper
        return cls.from_function(shape, cutoff, step)

    def to_dict(self) -> dict:
        return {"step_meV": self.step, "cutoff_meV": self.cutoff, "density_per_meV": self.density.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhononSpectrum":
        return cls(np.asarray(d["density_per_meV"], dtype=float), d["step_meV"], d["cutoff_meV"])


def _check_normalized(p: PhononSpectrum):
    if not p.is_normalized:
        raise InvalidInputError(f"phonon spectrum is not normalised (integral {p.norm:.12g})")


def convolve_order(p: PhononSpectrum, n: int) -> PhononSpectrum:
    """n-phonon lineshape by repeated convolution of the one-phonon shape.

    The result has support up to ``n * p.cutoff``.
    """
    if int(n) != n or n < 1:
        raise InvalidInputError(f"phonon order must be a positive integer, got {n}")
    _check_normalized(p)
    out = p.density
    for _ in range(int(n) - 1):
        out = np.convolve(p.density, out) * p.step
    return PhononSpectrum(out, p.step, p.cutoff * n)


def _orders(i1: np.ndarray, step: float, n_max: int, length: int) -> list:
    """Return [I_1, ..., I_n_max] truncated/padded to ``length`` samples."""
    i1 = i1[:length]
    cur = np.zeros(length)
    cur[: i1.size] = i1
    out = [cur]
    for _ in range(n_max - 1):
        cur = np.convolve(i1, cur)[:length] * step
        out.append(cur)
    return out


# --------------------------------------------------------------------------
# vibronic model
# --------------------------------------------------------------------------

def franck_condon_weights(S: float, n_max: int) -> np.ndarray:
    """Poisson weights ``S**n exp(-S) / n!`` for n = 0..n_max."""
    n = np.arange(n_max + 1)
    return poisson.pmf(n, S) if S > 0 else (n == 0).astype(float)


def required_orders(S: float, tail: float = TAIL_BOUND) -> int:
    """Smallest n_max >= 1 whose Poisson tail beyond n_max is below ``tail``."""
    n = 1
    while poisson.sf(n, S) >= tail:
        n += 1
    return n


def _zpl_line(energy, center, fwhm_ev, shape):
    if shape == "gaussian":
        sigma = fwhm_ev / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        return np.exp(-0.5 * ((energy - center) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    if shape == "lorentzian":
        hw = 0.5 * fwhm_ev
        return hw / math.pi / ((energy - center) ** 2 + hw**2)
    raise InvalidInputError(f"unknown ZPL shape {shape!r}")


@dataclass(frozen=True, eq=False)
class VibronicModel:
    """Franck–Condon emission model.

    Parameters
    ----------
    zpl_energy : float
        Zero-phonon line energy (eV).
    huang_rhys : float
        Huang–Rhys factor S >= 0.
    phonons : PhononSpectrum
        Normalised one-phonon coupling spectrum.
    zpl_width : float
        ZPL full width at half maximum (meV).
    n_max : int, optional
        Phonon-order truncation; chosen from the Poisson tail bound when omitted.
    zpl_shape : {"gaussian", "lorentzian"}
    """

    zpl_energy: float
    huang_rhys: float
    phonons: PhononSpectrum = field(default_factory=PhononSpectrum.default)
    zpl_width: float = 1.0
    n_max: Optional[int] = None
    zpl_shape: str = "gaussian"

    def __post_init__(self):
        if not self.huang_rhys >= 0:
            raise InvalidInputError("Huang-Rhys factor must be >= 0")
        if not self.zpl_energy > 0 or not self.zpl_width > 0:
            raise InvalidInputError("ZPL energy and width must be positive")
        _check_normalized(self.phonons)
        if self.zpl_shape not in ("gaussian", "lorentzian"):
            raise InvalidInputError(f"unknown ZPL shape {self.zpl_shape!r}")
        needed = required_orders(self.huang_rhys)
        if self.n_max is None:
            object.__setattr__(self, "n_max", needed)
        elif self.n_max < 1 or poisson.sf(self.n_max, self.huang_rhys) >= TAIL_BOUND:
            raise InvalidInputError(f"n_max={self.n_max} leaves a Franck-Condon tail >= {TAIL_BOUND}")

    @classmethod
    def from_wavelength(cls, zpl_nm: float, huang_rhys: float, **kwargs) -> "VibronicModel":
        return cls(HC_EV_NM / zpl_nm, huang_rhys, **kwargs)

    @property
    def zpl_nm(self) -> float:
        return HC_EV_NM / self.zpl_energy

    @property
    def debye_waller(self) -> float:
        return math.exp(-self.huang_rhys)

    @property
    def weights(self) -> np.ndarray:
        return franck_condon_weights(self.huang_rhys, self.n_max)

    def required_span(self) -> tuple:
        """Energy interval (eV) a synthesis grid must cover."""
        lo = self.zpl_energy - self.n_max * self.phonons.cutoff / 1000.0
        hi = self.zpl_energy + 3.0 * self.zpl_width / 1000.0
        return lo, hi

    def to_dict(self) -> dict:
        return {"zpl_nm": self.zpl_nm, "S": self.huang_rhys, "zpl_fwhm_meV": self.zpl_width,
                "n_max": self.n_max, "zpl_shape": self.zpl_shape, "phonons": self.phonons.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "VibronicModel":
        return cls(HC_EV_NM / d["zpl_nm"], d["S"], PhononSpectrum.from_dict(d["phonons"]),
                   d["zpl_fwhm_meV"], d.get("n_max"), d.get("zpl_shape", "gaussian"))


def _sideband_on_grid(psb_mev: np.ndarray, step: float, zpl_energy: float, energy: np.ndarray) -> np.ndarray:
    """Interpolate a sideband sampled in E_v (meV) onto photon energies (eV),
    converting 1/meV to 1/eV."""
    ev = (zpl_energy - energy) * 1000.0
    grid = np.arange(psb_mev.size) * step
    return 1000.0 * np.interp(ev, grid, psb_mev, left=0.0, right=0.0)


def emission_components(m: VibronicModel, energy) -> tuple:
    """ZPL and phonon-sideband densities (1/eV) before the E³ factor.

    Their integrals over the full line are ``exp(-S)`` and
    ``sum_{n=1}^{n_max} S^n exp(-S)/n!``.
    """
    energy = as_1d_float(energy, "energy")
    zpl = m.debye_waller * _zpl_line(energy, m.zpl_energy, m.zpl_width / 1000.0, m.zpl_shape)
    w = m.weights
    if m.n_max == 0 or m.huang_rhys == 0:
        return zpl, np.zeros_like(zpl)
    reach = max((m.zpl_energy - energy.min()) * 1000.0, 0.0)
    length = min(int(reach / m.phonons.step) + 2, m.n_max * (m.phonons.density.size - 1) + 1)
    length = max(length, 2)
    psb = np.zeros(length)
    for n, i_n in enumerate(_orders(m.phonons.density, m.phonons.step, m.n_max, length), start=1):
        psb += w[n] * i_n
    return zpl, _sideband_on_grid(psb, m.phonons.step, m.zpl_energy, energy)


def synthesize(m: VibronicModel, energy_grid, apply_e3: bool = True) -> Spectrum:
    """Emission spectrum on ``energy_grid`` (eV), normalised to unit area.

    ``I(E) ∝ E³ [exp(-S) L(E) + Σ_n S^n exp(-S)/n! · I_n(E_zpl - E)]``

    Raises
    ------
    InvalidInputError
        When the grid does not span the full sideband and the ZPL.
    """
    energy = as_1d_float(energy_grid, "energy_grid")
    lo, hi = m.required_span()
    tol = 1e-12 * max(abs(lo), abs(hi))
    if energy[0] > lo + tol or energy[-1] < hi - tol:
        raise InvalidInputError(
            f"energy grid [{energy[0]:.4f}, {energy[-1]:.4f}] eV must span [{lo:.4f}, {hi:.4f}] eV")
    if energy[0] <= 0:
        raise InvalidInputError("photon energies must be positive")
    zpl, psb = emission_components(m, energy)
    total = zpl + psb
    if apply_e3:
        total = total * energy**3
    area = np.trapezoid(total, energy)
    return Spectrum(energy, total / area, unit="eV")


def default_energy_grid(m: VibronicModel, step_mev: Optional[float] = None) -> np.ndarray:
    """Uniform grid covering :meth:`VibronicModel.required_span` that
    resolves the ZPL with at least ten samples per FWHM."""
    lo, hi = m.required_span()
    lo = max(lo, 1e-3)
    step = step_mev if step_mev else min(m.phonons.step, m.zpl_width / 10.0)
    n = int(math.ceil((hi - lo) * 1000.0 / step)) + 1
    return np.linspace(lo, lo + (n - 1) * step / 1000.0, n)


def synthesize_wavelength(m: VibronicModel, wavelength_grid, apply_e3: bool = True) -> Spectrum:
    """Synthesise on a covering energy grid, then resample per nm.

    The returned spectrum is a density per nm whose integral over the whole
    line is one; ``wavelength_grid`` may cover only part of it.
    """
    wl = as_1d_float(wavelength_grid, "wavelength_grid")
    s = to_wavelength(synthesize(m, default_energy_grid(m), apply_e3))
    return Spectrum(wl, np.interp(wl, s.grid, s.intensity, left=0.0, right=0.0))


def debye_waller_fraction(m: VibronicModel, energy_grid) -> float:
    """ZPL share of the pre-E³ emission integrated on ``energy_grid``."""
    energy = as_1d_float(energy_grid, "energy_grid")
    zpl, psb = emission_components(m, energy)
    z = np.trapezoid(zpl, energy)
    return float(z / (z + np.trapezoid(psb, energy)))


# --------------------------------------------------------------------------
# Huang–Rhys fitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhononBasis:
    """Piecewise-linear hat functions with nodes every ``bin_width`` meV on
    ``(0, cutoff]``; the node at E_v = 0 is pinned to zero."""

    bin_width: float = 5.0
    cutoff: float = DEFAULT_CUTOFF_MEV
    step: float = DEFAULT_STEP_MEV

    @property
    def nodes(self) -> np.ndarray:
        n = int(round(self.cutoff / self.bin_width))
        return np.arange(1, n + 1) * self.bin_width

    def matrix(self) -> np.ndarray:
        grid = np.arange(int(round(self.cutoff / self.step)) + 1) * self.step
        return np.clip(1.0 - np.abs(grid[:, None] - self.nodes[None, :]) / self.bin_width, 0.0, None)

    def project(self, p: PhononSpectrum) -> np.ndarray:
        """Non-negative coefficients approximating ``p``."""
        from scipy.optimize import nnls
        b = self.matrix()
        d = np.zeros(b.shape[0])
        m = min(d.size, p.density.size)
        d[:m] = p.density[:m]
        coef, _ = nnls(b, d)
        return coef

    def spectrum(self, coef) -> PhononSpectrum:
        dens = self.matrix() @ np.clip(np.asarray(coef, dtype=float), 0.0, None)
        total = dens.sum() * self.step
        if total <= 0:
            raise InvalidInputError("basis coefficients have zero weight")
        return PhononSpectrum(dens / total, self.step, self.cutoff)


@dataclass(frozen=True, eq=False)
class HuangRhysFit:
    model: VibronicModel
    residual: float
    rounds: int
    converged: bool
    coefficients: np.ndarray

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update({"residual_rel": self.residual, "rounds": self.rounds, "converged": self.converged,
                  "basis_coefficients": np.asarray(self.coefficients).tolist()})
        return d


class _SidebandProblem:
    """Model evaluation and Jacobians for the alternating Huang–Rhys fit."""

    def __init__(self, energy, data, basis: PhononBasis, shape: str, apply_e3: bool, n_max: int):
        self.energy = energy
        self.data = data
        self.basis = basis
        self.b = basis.matrix()
        self.step = basis.step
        self.shape = shape
        self.e3 = energy**3 if apply_e3 else np.ones_like(energy)
        self.n_max = n_max

    def _length(self, e0):
        reach = max((e0 - self.energy.min()) * 1000.0, 0.0)
        return max(min(int(reach / self.step) + 2, self.n_max * (self.b.shape[0] - 1) + 1), 2)

    def i1(self, coef):
        dens = self.b @ coef
        z = dens.sum() * self.step
        return dens / z, z

    def sideband(self, coef, S, e0):
        """Pre-E³ sideband on the data grid plus pieces reused by Jacobians."""
        i1, z = self.i1(coef)
        length = self._length(e0)
        orders = _orders(i1, self.step, self.n_max, length)
        w = franck_condon_weights(S, self.n_max)
        psb = np.zeros(length)
        for n, i_n in enumerate(orders, start=1):
            psb += w[n] * i_n
        return psb, orders, w, z

    def shape_fn(self, coef, S, e0, width_mev):
        psb, *_ = self.sideband(coef, S, e0)
        zpl = math.exp(-S) * _zpl_line(self.energy, e0, width_mev / 1000.0, self.shape)
        return self.e3 * (zpl + _sideband_on_grid(psb, self.step, e0, self.energy))

    @staticmethod
    def profile_amplitude(h, y):
        hh = float(h @ h)
        return float(h @ y) / hh if hh > 0 else 0.0

    def residual_zpl_step(self, coef):
        def fn(p):
            e0, width, S = p
            h = self.shape_fn(coef, S, e0, width)
            a = self.profile_amplitude(h, self.data)
            return a * h - self.data
        return fn

    def residual_basis_step(self, S, e0, width):
        zpl = self.e3 * math.exp(-S) * _zpl_line(self.energy, e0, width / 1000.0, self.shape)
        ev = (e0 - self.energy) * 1000.0

        def interp(vec):
            return _sideband_on_grid(vec, self.step, e0, self.energy)

        hats = [np.flatnonzero(self.b[:, k]) for k in range(self.b.shape[1])]
        col_sums = self.b.sum(axis=0)

        def fn(x):
            coef, amp = x[:-1], x[-1]
            psb, _, _, _ = self.sideband(coef, S, e0)
            return amp * (zpl + self.e3 * interp(psb)) - self.data

        def jac(x):
            coef, amp = x[:-1], x[-1]
            psb, orders, w, z = self.sideband(coef, S, e0)
            length = psb.size
            # Q = sum_n n w_n I_{n-1}, with I_0 a unit impulse at E_v = 0.
            q = np.zeros(length)
            q[0] = w[1] / self.step
            for n in range(2, self.n_max + 1):
                q += n * w[n] * orders[n - 2]
            homog = np.zeros(length)
            for n, i_n in enumerate(orders, start=1):
                homog += n * w[n] * i_n
            homog_e = self.e3 * interp(homog)
            cols = np.empty((self.energy.size, coef.size + 1))
            for k, idx in enumerate(hats):
                d = np.zeros(length)
                conv = np.convolve(q, self.b[idx, k])[: max(length - idx[0], 0)] * self.step
                d[idx[0]: idx[0] + conv.size] = conv
                col = self.e3 * interp(d) / z - (self.step * col_sums[k] / z) * homog_e
                cols[:, k] = amp * col
            cols[:, -1] = zpl + self.e3 * interp(psb)
            return cols

        del ev
        return fn, jac


def _estimate_zpl(energy, y, e_hint, search_mev):
    near = np.flatnonzero(np.abs(energy - e_hint) * 1000.0 <= search_mev)
    if near.size < 3:
        raise FitFailure("no samples near the ZPL hint")
    i = near[np.argmax(y[near])]
    base = float(np.median(y))
    if y[i] <= 2.0 * max(base, 0.0) or y[i] <= 0:
        raise FitFailure("ZPL not resolvable near the hint")
    half = 0.5 * y[i]
    lo = i
    while lo > 0 and y[lo] > half:
        lo -= 1
    hi = i
    while hi < y.size - 1 and y[hi] > half:
        hi += 1
    step = float(np.median(np.diff(energy)))
    width = max((energy[hi] - energy[lo]) * 1000.0, 2.0 * step * 1000.0)
    return float(energy[i]), width, y[i]


def fit_huang_rhys(observed: Spectrum, zpl_center_hint: float, phonon_basis: Optional[PhononBasis] = None,
                   apply_e3: bool = True, zpl_shape: str = "gaussian", initial_phonons: Optional[PhononSpectrum] = None,
                   max_rounds: int = 50, tol: float = 1e-6, search_mev: float = 15.0) -> HuangRhysFit:
    """Fit S, the ZPL and the one-phonon spectrum to an emission spectrum.

    Alternates (i) a damped least-squares fit of ZPL energy, width and S
    with the phonon shape fixed, and (ii) a non-negative fit of the
    phonon-shape coefficients on ``phonon_basis`` with the ZPL fixed.  The
    overall amplitude is profiled out in (i) and fitted jointly in (ii).

    Parameters
    ----------
    observed : Spectrum
        Baseline-subtracted spectrum in nm or eV.
    zpl_center_hint : float
        Approximate ZPL wavelength (nm).
    """
    basis = phonon_basis or PhononBasis()
    s = to_energy(observed) if observed.unit == "nm" else observed
    energy = np.array(s.grid)
    y = np.array(s.intensity)
    area = np.trapezoid(y, energy)
    if not area > 0:
        raise FitFailure("spectrum has no positive weight")
    y = y / area
    e0, width, peak = _estimate_zpl(energy, y, HC_EV_NM / zpl_center_hint, search_mev)

    # Debye-Waller estimate from the ZPL area inside +-1.5 FWHM.
    core = np.abs(energy - e0) * 1000.0 <= 1.5 * width
    frac = np.trapezoid(y[core], energy[core]) if core.sum() > 1 else 1.0
    S = float(np.clip(-math.log(max(min(frac, 1.0), 1e-6)), 0.0, 8.0))

    if initial_phonons is not None:
        coef = basis.project(initial_phonons)
    else:
        coef = np.ones(basis.nodes.size)
    n_max = required_orders(10.0)
    prob = _SidebandProblem(energy, y, basis, zpl_shape, apply_e3, n_max)
    scale = float(np.sqrt(np.mean(y**2)))

    prev = np.inf
    converged = False
    rounds = 0
    amp = 1.0
    for rounds in range(1, max_rounds + 1):
        fn = prob.residual_zpl_step(coef)
        step_ev = float(np.median(np.diff(energy)))
        lo = [e0 - 0.005, 0.1 * step_ev * 1000.0, 0.0]
        hi = [e0 + 0.005, 50.0 * width, 10.0]
        res = _lsq.fit(fn, [e0, width, S], bounds=(lo, hi), max_iter=400)
        e0, width, S = res.params
        if S > 1e-4:
            f2, j2 = prob.residual_basis_step(S, e0, width)
            h = prob.shape_fn(coef, S, e0, width)
            amp = prob.profile_amplitude(h, y)
            x0 = np.concatenate([coef / (prob.i1(coef)[1]), [amp]])
            sol = least_squares(f2, x0, jac=j2, bounds=(0.0, np.inf), method="trf",
                                xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=200, x_scale="jac")
            coef = sol.x[:-1]
            if not np.any(coef > 0):
                raise FitFailure("phonon coefficients collapsed to zero", last_iterate=sol.x)
            coef = coef / prob.i1(coef)[1]
        h = prob.shape_fn(coef, S, e0, width)
        amp = prob.profile_amplitude(h, y)
        resid = float(np.sqrt(np.mean((amp * h - y) ** 2))) / scale
        if abs(prev - resid) <= tol * max(resid, 1e-300) or resid < 1e-12:
            converged = True
            break
        prev = resid

    phonons = basis.spectrum(coef)
    model = VibronicModel(float(e0), float(S), phonons, float(width), zpl_shape=zpl_shape)
    return HuangRhysFit(model, resid, rounds, converged, readonly(coef))


class HuangRhysFitter(BaseEstimator):
    """Estimator form of :func:`fit_huang_rhys`.

    ``fit`` stores ``model_``, ``huang_rhys_``, ``residual_`` and
    ``converged_``; ``predict`` synthesises the fitted model on an energy grid.
    """

    def __init__(self, zpl_center_hint=None, bin_width=5.0, cutoff=DEFAULT_CUTOFF_MEV, apply_e3=True,
                 zpl_shape="gaussian", max_rounds=50, tol=1e-6):
        self.zpl_center_hint = zpl_center_hint
        self.bin_width = bin_width
        self.cutoff = cutoff
        self.apply_e3 = apply_e3
        self.zpl_shape = zpl_shape
        self.max_rounds = max_rounds
        self.tol = tol

    def fit(self, X: Spectrum, y=None):
        hint = self.zpl_center_hint
        if hint is None:
            s = X if X.unit == "nm" else to_wavelength(X)
            hint = float(s.grid[np.argmax(s.intensity)])
        result = fit_huang_rhys(X, hint, PhononBasis(self.bin_width, self.cutoff), apply_e3=self.apply_e3,
                                zpl_shape=self.zpl_shape, max_rounds=self.max_rounds, tol=self.tol)
        self.result_ = result
        self.model_ = result.model
        self.huang_rhys_ = result.model.huang_rhys
        self.residual_ = result.residual
        self.converged_ = result.converged
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        grid = X.grid if isinstance(X, Spectrum) else np.asarray(X, dtype=float)
        return synthesize(self.model_, grid, self.apply_e3).intensity
