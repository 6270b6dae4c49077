"""Malus-law analysis of ZPL polarization behind a rotating half-wave plate.

A half-wave plate at angle θ rotates linear polarization by 2θ, so the
transmitted ZPL intensity follows ``A cos²(2θ - φ) + C``.  Expanding the
square gives a model linear in ``[1, cos 4θ, sin 4θ]``, which is solved by
ordinary least squares; no iterative fit is needed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_1d_float, check_same_length, readonly
from .exceptions import InvalidInputError
from .spectra import Spectrum, SpectralWindow, integrate_window

MIN_ANGLES = 8
MIN_SPAN_DEG = 90.0


@dataclass(frozen=True, eq=False)
class PolarizationScan:
    """Integrated ZPL counts versus half-wave-plate angle.

    Parameters
    ----------
    angles : array-like
        HWP angles (deg); at least 8 spanning at least 90 deg.
    intensities : array-like
        Non-negative integrated counts per angle.
    window : SpectralWindow, optional
        Window the counts were integrated over.
    """

    angles: np.ndarray
    intensities: np.ndarray
    window: Optional[SpectralWindow] = None

    def __post_init__(self):
        a = as_1d_float(self.angles, "angles")
        i = as_1d_float(self.intensities, "intensities")
        check_same_length(a, i, "angles and intensities")
        if a.size < MIN_ANGLES:
            raise InvalidInputError(f"need at least {MIN_ANGLES} angles, got {a.size}")
        if np.ptp(a) < MIN_SPAN_DEG - 1e-9:
            raise InvalidInputError(f"angles span {np.ptp(a):.3g} deg < {MIN_SPAN_DEG} deg")
        if np.any(i < 0):
            raise InvalidInputError("intensities must be >= 0")
        object.__setattr__(self, "angles", readonly(a))
        object.__setattr__(self, "intensities", readonly(i))


@dataclass(frozen=True)
class MalusFit:
    """Fitted ``A cos²(2θ - φ) + C``.

    ``axis`` is the HWP angle of maximum transmission in [0, 90) deg and
    ``visibility = A / (A + 2C)`` clipped to [0, 1].
    """

    visibility: float
    axis: float
    offset: float
    amplitude: float
    residual_rms: float

    def as_tuple(self) -> tuple:
        return self.visibility, self.axis, self.offset

    def evaluate(self, angles) -> np.ndarray:
        th = np.deg2rad(np.asarray(angles, dtype=float))
        return self.amplitude * np.cos(2 * th - 2 * np.deg2rad(self.axis)) ** 2 + self.offset

    def to_dict(self) -> dict:
        return {"visibility": self.visibility, "axis_deg": self.axis, "offset_counts": self.offset,
                "amplitude_counts": self.amplitude, "residual_rms_counts": self.residual_rms}


def _canonical_axis(deg: float) -> float:
    axis = float(deg % 90.0)
    return 0.0 if np.isclose(axis, 90.0, rtol=0, atol=1e-9) else axis


def fit_malus(scan: PolarizationScan) -> MalusFit:
    """Least-squares Malus fit of a polarization scan.

    Raises
    ------
    InvalidInputError
        If every intensity is zero.
    """
    y = scan.intensities
    if not np.any(y > 0):
        raise InvalidInputError("all intensities are zero")
    th = np.deg2rad(scan.angles)
    design = np.column_stack([np.ones_like(th), np.cos(4 * th), np.sin(4 * th)])
    (a0, a1, a2), *_ = np.linalg.lstsq(design, y, rcond=None)
    half_amp = float(np.hypot(a1, a2))
    amplitude = 2.0 * half_amp
    offset = float(a0 - half_amp)
    # A + 2C = 2 a0, so visibility reduces to half_amp / a0
    visibility = float(np.clip(half_amp / a0, 0.0, 1.0)) if a0 > 0 else 0.0
    axis = _canonical_axis(np.rad2deg(np.arctan2(a2, a1)) / 4.0)
    resid = y - design @ np.array([a0, a1, a2])
    return MalusFit(visibility, axis, offset, amplitude, float(np.sqrt(np.mean(resid ** 2))))


def scan_from_spectra(spectra: Sequence[Spectrum], angles, window: SpectralWindow) -> PolarizationScan:
    """Integrate each spectrum over ``window`` to build a scan."""
    angles = as_1d_float(angles, "angles")
    if len(spectra) != angles.size:
        raise InvalidInputError(f"{len(spectra)} spectra but {angles.size} angles")
    counts = np.array([integrate_window(s, window) for s in spectra])
    return PolarizationScan(angles, np.clip(counts, 0.0, None), window)


def synthetic_scan(visibility: float, axis: float = 0.0, total: float = 1000.0, n_angles: int = 19,
                   span: float = 180.0, noise: float = 0.0, rng=None) -> PolarizationScan:
    """Scan with the given visibility and axis; ``noise`` is a relative Gaussian sd."""
    if not 0 <= visibility <= 1:
        raise InvalidInputError("visibility must lie in [0, 1]")
    angles = np.linspace(0.0, span, n_angles)
    amplitude = visibility * total
    offset = (total - amplitude) / 2.0
    clean = MalusFit(visibility, axis, offset, amplitude, 0.0).evaluate(angles)
    if noise:
        rng = np.random.default_rng(rng)
        clean = clean + rng.normal(0.0, noise * clean.max(), clean.size)
    return PolarizationScan(angles, np.clip(clean, 0.0, None))


def write_scan_csv(scan: PolarizationScan, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "counts"])
        for a, c in zip(scan.angles, scan.intensities):
            w.writerow([repr(float(a)), repr(float(c))])


def read_scan_csv(path) -> PolarizationScan:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["angle_deg", "counts"]:
        raise InvalidInputError(f"{path}: expected header 'angle_deg,counts'")
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float).reshape(-1, 2)
    return PolarizationScan(data[:, 0], data[:, 1])


def write_fit_json(fit: MalusFit, path) -> None:
    Path(path).write_text(json.dumps(fit.to_dict(), sort_keys=True, indent=2) + "\n")


class MalusFitter(BaseEstimator):
    """Estimator form of :func:`fit_malus`.

    ``fit(X, y)`` takes HWP angles ``X`` (deg) and intensities ``y``, or a
    :class:`PolarizationScan` as ``X`` alone.
    """

    def fit(self, X, y=None):
        scan = X if isinstance(X, PolarizationScan) else PolarizationScan(np.ravel(X), y)
        self.fit_ = fit_malus(scan)
        self.visibility_, self.axis_, self.offset_ = self.fit_.as_tuple()
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.evaluate(np.ravel(X))
