"""Emitter localization in PL maps and registration to an implantation grid.

Emitters are located by 2-D Gaussian fits around local maxima.  Their
positions are then registered to a square lattice of known pitch by
minimising the weighted sum of distances to the nearest lattice node over
a translation and a small rotation.  The lattice is indexed so that node
(0, 0) is the one assigned to the first center; ``dx, dy`` are its stage
coordinates.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _lsq
from ._validation import as_1d_float, as_2d_float, check_positive, readonly
from .exceptions import FitFailure, InvalidInputError, RegistrationFailure

log = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.3548200450309493
MIN_MAP_SIZE = 7


@dataclass(frozen=True, eq=False)
class PLMap:
    """PL intensity raster.

    Pixel (row ``i``, column ``j``) sits at stage position
    ``(origin[0] + j * scale, origin[1] + i * scale)`` in µm.
    """

    pixels: np.ndarray
    scale: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        px = as_2d_float(self.pixels, "pixels")
        if np.any(px < 0):
            raise InvalidInputError("pixels must be >= 0")
        check_positive(self.scale, "scale")
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 2:
            raise InvalidInputError("origin must be (x, y)")
        object.__setattr__(self, "pixels", readonly(px))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def shape(self):
        return self.pixels.shape

    def to_stage(self, i, j):
        return self.origin[0] + np.asarray(j) * self.scale, self.origin[1] + np.asarray(i) * self.scale

    def to_pixel(self, x, y):
        return (np.asarray(y) - self.origin[1]) / self.scale, (np.asarray(x) - self.origin[0]) / self.scale


@dataclass(frozen=True)
class Gaussian2DFit:
    """Axis-aligned 2-D Gaussian; positions and widths in µm."""

    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    amplitude: float
    offset: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise InvalidInputError("sigma_x and sigma_y must be positive")

    @property
    def fwhm_x(self) -> float:
        return FWHM_PER_SIGMA * self.sigma_x

    @property
    def fwhm_y(self) -> float:
        return FWHM_PER_SIGMA * self.sigma_y

    @property
    def fwhm(self) -> float:
        return 0.5 * (self.fwhm_x + self.fwhm_y)

    def evaluate(self, x, y):
        return gaussian2d(x, y, self.x0, self.y0, self.sigma_x, self.sigma_y, self.amplitude, self.offset)

    def to_dict(self) -> dict:
        return {"x0_um": self.x0, "y0_um": self.y0, "sigma_x_um": self.sigma_x, "sigma_y_um": self.sigma_y,
                "fwhm_x_um": self.fwhm_x, "fwhm_y_um": self.fwhm_y, "amplitude_counts": self.amplitude,
                "offset_counts": self.offset}


def gaussian2d(x, y, x0, y0, sigma_x, sigma_y, amplitude, offset=0.0):
    return amplitude * np.exp(-0.5 * (((x - x0) / sigma_x) ** 2 + ((y - y0) / sigma_y) ** 2)) + offset


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def fit_gaussian2d(m: PLMap, center_px=None, half_window: Optional[int] = 3) -> Gaussian2DFit:
    """Fit one Gaussian in a ``±half_window`` pixel box (whole map if None).

    Seeds come from the brightest pixel and the second moments of the
    offset-subtracted box.
    """
    rows, cols = m.shape
    if center_px is None:
        center_px = np.unravel_index(int(np.argmax(m.pixels)), m.shape)
    ci, cj = (int(round(v)) for v in center_px)
    if half_window is None:
        i0, i1, j0, j1 = 0, rows, 0, cols
    else:
        i0, i1 = max(ci - half_window, 0), min(ci + half_window + 1, rows)
        j0, j1 = max(cj - half_window, 0), min(cj + half_window + 1, cols)
    box = m.pixels[i0:i1, j0:j1]
    if box.size < 7:
        raise FitFailure("fit window holds fewer than 7 pixels")
    ii, jj = np.mgrid[i0:i1, j0:j1]
    x, y = m.to_stage(ii.astype(float), jj.astype(float))
    x, y, z = x.ravel(), y.ravel(), box.ravel()

    off0 = float(np.percentile(z, 10))
    w = np.clip(z - off0, 0, None)
    if w.sum() <= 0:
        raise FitFailure("no signal above the local background")
    xc, yc = m.to_stage(ci, cj)
    sx0 = float(np.sqrt(np.sum(w * (x - xc) ** 2) / w.sum())) or m.scale
    sy0 = float(np.sqrt(np.sum(w * (y - yc) ** 2) / w.sum())) or m.scale
    amp0 = float(z.max() - off0)
    scale_z = max(amp0, 1e-300)

    def residual(p):
        return (gaussian2d(x, y, *p) - z) / scale_z

    span_x, span_y = np.ptp(x) + m.scale, np.ptp(y) + m.scale
    lo = [x.min() - m.scale, y.min() - m.scale, 0.05 * m.scale, 0.05 * m.scale, 0.0, -np.inf]
    hi = [x.max() + m.scale, y.max() + m.scale, 4 * span_x, 4 * span_y, np.inf, np.inf]
    p0 = np.clip([float(xc), float(yc), max(sx0, 0.3 * m.scale), max(sy0, 0.3 * m.scale), amp0, off0],
                 np.array(lo) + 1e-12, np.array(hi) - 1e-12)
    res = _lsq.fit(residual, p0, bounds=(lo, hi), xtol=1e-10)
    return Gaussian2DFit(*(float(v) for v in res.params))


def detect_emitters(m: PLMap, threshold: float, half_window: int = 3) -> List[Gaussian2DFit]:
    """Gaussian fits at every local maximum above ``threshold``.

    Fits closer than one pixel to a brighter fit are dropped; failed fits
    are skipped with a log message.  Results are ordered by row, then column.
    """
    if min(m.shape) < MIN_MAP_SIZE:
        raise InvalidInputError(f"map must be at least {MIN_MAP_SIZE}x{MIN_MAP_SIZE} pixels")
    px = m.pixels
    peaks = (px == ndimage.maximum_filter(px, size=3, mode="nearest")) & (px > threshold)
    fits: List[Gaussian2DFit] = []
    for i, j in zip(*np.nonzero(peaks)):
        try:
            fits.append(fit_gaussian2d(m, (i, j), half_window))
        except FitFailure as exc:
            log.info("skipping maximum at pixel (%d, %d): %s", i, j, exc)
    kept: List[Gaussian2DFit] = []
    for f in sorted(fits, key=lambda f: -f.amplitude):
        if all(np.hypot(f.x0 - k.x0, f.y0 - k.y0) >= m.scale for k in kept):
            kept.append(f)
    return sorted(kept, key=lambda f: (round(f.y0 / m.scale), f.x0))


# --------------------------------------------------------------------------
# grid registration
# --------------------------------------------------------------------------

def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _assign(p, spacing, d, theta):
    """Nearest lattice indices and the distances to those nodes."""
    q = (p - d) @ _rot(theta) / spacing  # row-vector form of R(-theta) (p - d)
    nodes = np.round(q)
    ideal = nodes * spacing @ _rot(theta).T + d
    return nodes, np.linalg.norm(p - ideal, axis=1)


@dataclass(frozen=True, eq=False)
class GridRegistration:
    """Rigid placement of a square lattice on a set of emitter positions.

    ``total_discrepancy = Σ w_i · D_r,i`` where ``D_r,i`` is the distance
    from center ``i`` to its nearest node.
    """

    spacing: float
    dx: float
    dy: float
    theta: float
    centers: np.ndarray
    weights: np.ndarray
    total_discrepancy: float
    radial: np.ndarray
    weighting: str = "uniform"

    @property
    def theta_deg(self) -> float:
        return float(np.rad2deg(self.theta))

    def nodes(self) -> np.ndarray:
        return _assign(self.centers, self.spacing, np.array([self.dx, self.dy]), self.theta)[0].astype(int)

    def recompute(self) -> tuple:
        """(D, D_r) evaluated afresh from the stored parameters."""
        _, dist = _assign(self.centers, self.spacing, np.array([self.dx, self.dy]), self.theta)
        return float(np.sum(self.weights * dist)), dist

    def to_dict(self) -> dict:
        return {"spacing_um": self.spacing, "dx_um": self.dx, "dy_um": self.dy, "theta_rad": self.theta,
                "theta_deg": self.theta_deg, "total_discrepancy_um": self.total_discrepancy,
                "radial_discrepancy_um": self.radial.tolist(), "weighting": self.weighting,
                "nodes": self.nodes().tolist()}


def _best_translation(p, w, spacing, d, theta, n_iter=5):
    for _ in range(n_iter):
        nodes, _ = _assign(p, spacing, d, theta)
        ideal0 = nodes * spacing @ _rot(theta).T
        d = np.sum(w[:, None] * (p - ideal0), axis=0) / w.sum()
    return d


def _procrustes(p, w, targets0):
    """Weighted rigid fit p ≈ R(theta) targets0 + d for fixed node assignment."""
    pc = p - np.sum(w[:, None] * p, axis=0) / w.sum()
    tc = targets0 - np.sum(w[:, None] * targets0, axis=0) / w.sum()
    cross = np.sum(w * (tc[:, 0] * pc[:, 1] - tc[:, 1] * pc[:, 0]))
    dot = np.sum(w * (tc[:, 0] * pc[:, 0] + tc[:, 1] * pc[:, 1]))
    theta = float(np.arctan2(cross, dot))
    d = np.sum(w[:, None] * (p - targets0 @ _rot(theta).T), axis=0) / w.sum()
    return d, theta


def _polish(p, w, spacing, d, theta):
    """Gradient polish of D with the node assignment held fixed.

    Nelder–Mead stops on a tolerance, which leaves the answer sensitive to
    rounding in the input; converging the smooth fixed-assignment problem
    makes the result reproducible to ~1e-12 µm.  Skipped when any distance
    is effectively zero, where D is not differentiable.
    """
    nodes, dist = _assign(p, spacing, d, theta)
    if np.min(dist) < 1e-9 * spacing:
        return d, theta
    n = nodes * spacing

    def fun(v):
        c, s = np.cos(v[2] / spacing), np.sin(v[2] / spacing)
        ideal = np.column_stack([c * n[:, 0] - s * n[:, 1], s * n[:, 0] + c * n[:, 1]])
        r = p - ideal - v[:2]
        norm = np.linalg.norm(r, axis=1)
        u = w[:, None] * r / norm[:, None]
        dideal = np.column_stack([-s * n[:, 0] - c * n[:, 1], c * n[:, 0] - s * n[:, 1]]) / spacing
        return float(np.sum(w * norm)), np.array([-u[:, 0].sum(), -u[:, 1].sum(), -np.sum(u * dideal)])

    x0 = np.array([d[0], d[1], theta * spacing])
    # D is too flat near its minimum to resolve 1e-9 µm from function
    # values, so solve grad D = 0 directly
    sol = optimize.root(lambda v: fun(v)[1], x0, method="hybr", options={"xtol": 1e-15})
    d_new, theta_new = sol.x[:2], sol.x[2] / spacing
    same_nodes = np.array_equal(_assign(p, spacing, d_new, theta_new)[0], nodes)
    converged = np.max(np.abs(sol.fun)) < 1e-10 * w.sum()
    if converged and same_nodes and fun(sol.x)[0] <= fun(x0)[0] + 1e-12 * max(fun(x0)[0], 1.0):
        return d_new, theta_new
    return d, theta


def register_grid(centers, spacing: float, weights=None, theta_range_deg: float = 5.0,
                  theta_step_deg: float = 0.05, tol: float = 1e-4, weighting: Optional[str] = None
                  ) -> GridRegistration:
    """Register a square lattice of pitch ``spacing`` (µm) to ``centers``.

    A coarse scan over θ picks the start; for each θ the translation is the
    weighted mean residual after nearest-node assignment.  A weighted
    Procrustes step then converges the assignment, and a Nelder–Mead
    polish minimises the weighted sum of distances itself.

    Raises
    ------
    RegistrationFailure
        Fewer than three centers, or all centers coincident.
    """
    p = as_2d_float(centers, "centers")
    if p.shape[1] != 2:
        raise InvalidInputError("centers must be an (n, 2) array")
    if p.shape[0] < 3:
        raise RegistrationFailure("need at least 3 centers")
    check_positive(spacing, "spacing")
    if np.all(np.ptp(p, axis=0) == 0):
        raise RegistrationFailure("all centers coincide")
    w = np.ones(p.shape[0]) if weights is None else as_1d_float(weights, "weights")
    if w.size != p.shape[0] or np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("weights must be non-negative, one per center, with a positive sum")
    weighting = weighting or ("uniform" if weights is None else "custom")
    # work relative to the anchor so a global shift of the input cannot
    # change the optimiser path; added back at the end
    anchor = p[0].copy()
    p = p - anchor

    def total(d, theta):
        return float(np.sum(w * _assign(p, spacing, d, theta)[1]))

    n_steps = int(round(2 * theta_range_deg / theta_step_deg))
    best = None
    for theta in np.deg2rad(np.linspace(-theta_range_deg, theta_range_deg, n_steps + 1)):
        d = _best_translation(p, w, spacing, np.zeros(2), theta)
        cost = total(d, theta)
        if best is None or cost < best[0]:
            best = (cost, d, theta)
    _, d, theta = best

    for _ in range(20):
        nodes, _ = _assign(p, spacing, d, theta)
        # keep the first center on node (0, 0) so (dx, dy) stays anchored
        nodes = nodes - nodes[0]
        d_new, theta_new = _procrustes(p, w, nodes * spacing)
        if total(d_new, theta_new) > total(d, theta):
            break
        moved = np.hypot(*(d_new - d)) + spacing * abs(theta_new - theta)
        d, theta = d_new, theta_new
        if moved < 1e-12:
            break

    def objective(v):
        return total(v[:2], v[2] / spacing)

    x0 = np.array([d[0], d[1], theta * spacing])
    simplex = np.vstack([x0, x0 + np.diag([10 * tol] * 3)])
    res = optimize.minimize(objective, x0, method="Nelder-Mead",
                            options={"xatol": tol * 1e-2, "fatol": 1e-15, "initial_simplex": simplex,
                                     "maxiter": 4000})
    if res.fun < objective(x0):
        d, theta = res.x[:2], res.x[2] / spacing
    d, theta = _polish(p, w, spacing, d, theta)
    _, dist = _assign(p, spacing, d, theta)
    d = d + anchor
    return GridRegistration(float(spacing), float(d[0]), float(d[1]), float(theta), readonly(p + anchor), readonly(w),
                            float(np.sum(w * dist)), readonly(dist), weighting)


@dataclass(frozen=True)
class DiscrepancyStats:
    mean: float
    std: float
    counts: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean_um": self.mean, "std_um": self.std, "histogram_counts": self.counts.tolist(),
                "histogram_edges_um": self.edges.tolist()}


def discrepancy_stats(reg, bins=20) -> DiscrepancyStats:
    """Mean and sample standard deviation (ddof = 1) of the radial discrepancies.

    ``reg`` may be a :class:`GridRegistration` or an array of D_r values.
    A single site has std 0.
    """
    dr = reg.radial if isinstance(reg, GridRegistration) else as_1d_float(reg, "radial discrepancies")
    if dr.size < 1:
        raise InvalidInputError("need at least one site")
    std = float(np.std(dr, ddof=1)) if dr.size > 1 else 0.0
    counts, edges = np.histogram(dr, bins=bins)
    return DiscrepancyStats(float(np.mean(dr)), std, counts, edges)


# --------------------------------------------------------------------------
# activation spread
# --------------------------------------------------------------------------

def activation_spread(maps: Sequence[PLMap], center_hint, half_window: Optional[int] = None) -> np.ndarray:
    """(average FWHM µm, peak height counts) per map; rows of NaN mark failed fits.

    ``center_hint`` is a stage position (µm).  With ``half_window=None``
    the whole map is fitted.
    """
    if len(maps) < 1:
        raise InvalidInputError("need at least one map")
    out = np.full((len(maps), 2), np.nan)
    for k, m in enumerate(maps):
        ci, cj = m.to_pixel(*center_hint)
        try:
            f = fit_gaussian2d(m, (ci, cj), half_window)
        except FitFailure as exc:
            log.info("map %d: %s", k, exc)
            continue
        out[k] = f.fwhm, f.amplitude
    return out


def logistic(t, base, amplitude, t0, width):
    return base + amplitude / (1.0 + np.exp(-(np.asarray(t, dtype=float) - t0) / width))


@dataclass(frozen=True)
class SaturationFit:
    """Logistic growth ``base + amplitude / (1 + exp(-(t - t0)/width))``.

    The knee is where the curve reaches 95 % of its rise, ``t0 + width·ln 19``.
    """

    base: float
    amplitude: float
    t0: float
    width: float
    knee: float
    plateau: bool

    def evaluate(self, t):
        return logistic(t, self.base, self.amplitude, self.t0, self.width)


def fit_saturation(t, values) -> SaturationFit:
    """Fit a saturating logistic; ``plateau`` is True when data extend past the knee.

    NaN entries (failed map fits) are ignored.
    """
    t = as_1d_float(t, "t")
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    t, v = t[ok], v[ok]
    if t.size < 4:
        raise FitFailure("need at least 4 finite points for a saturation fit")
    span = np.ptp(t) or 1.0
    mid = 0.5 * (v.min() + v.max())
    t0 = float(t[np.argmin(np.abs(v - mid))])
    p0 = [v.min(), np.ptp(v) or 1.0, t0, span / 10]
    lo = [-np.inf, 0.0, t.min() - span, span * 1e-4]
    hi = [np.inf, np.inf, t.max() + span, 10 * span]
    scale = max(np.ptp(v), 1e-300)
    res = _lsq.fit(lambda p: (logistic(t, *p) - v) / scale, p0, bounds=(lo, hi))
    base, amp, t0, width = (float(x) for x in res.params)
    knee = t0 + width * np.log(19.0)
    return SaturationFit(base, amp, t0, width, float(knee), bool(t.max() > knee))


# --------------------------------------------------------------------------
# synthetic data and file formats
# --------------------------------------------------------------------------

def grid_positions(n: int, spacing: float, dx: float = 0.0, dy: float = 0.0, theta: float = 0.0) -> np.ndarray:
    """Nodes of an ``n x n`` lattice, rotated by ``theta`` (rad) about node (0, 0)."""
    jj, ii = np.meshgrid(np.arange(n), np.arange(n))
    nodes = np.column_stack([jj.ravel(), ii.ravel()]) * spacing
    return nodes @ _rot(theta).T + np.array([dx, dy])


def render_map(emitters: Sequence[Gaussian2DFit], shape, scale: float, origin=(0.0, 0.0),
               background: float = 0.0, rng=None) -> PLMap:
    """Raster of Gaussian spots; Poisson noise when ``rng`` is given."""
    ii, jj = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    x, y = origin[0] + jj * scale, origin[1] + ii * scale
    img = np.full(shape, float(background))
    for e in emitters:
        img += gaussian2d(x, y, e.x0, e.y0, e.sigma_x, e.sigma_y, e.amplitude)
    if rng is not None:
        img = np.random.default_rng(rng).poisson(img).astype(float)
    return PLMap(img, scale, origin)


def write_map(m: PLMap, path) -> None:
    """CSV matrix plus a ``.json`` sidecar with scale and origin."""
    path = Path(path)
    np.savetxt(path, m.pixels, delimiter=",", fmt="%.17g")
    path.with_suffix(".json").write_text(json.dumps({"scale_um_per_px": m.scale, "origin_um": list(m.origin)},
                                                    sort_keys=True, indent=2) + "\n")


def read_map(path, scale: Optional[float] = None, origin=None) -> PLMap:
    path = Path(path)
    try:
        px = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: not a numeric CSV matrix ({exc})") from exc
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    scale = scale if scale is not None else meta.get("scale_um_per_px")
    if scale is None:
        raise InvalidInputError(f"{path}: no scale given and no sidecar {side.name}")
    origin = origin if origin is not None else meta.get("origin_um", (0.0, 0.0))
    return PLMap(px, scale, tuple(origin))


class GridRegistrar(BaseEstimator):
    """Estimator wrapping :func:`register_grid`.

    ``fit(X)`` takes an ``(n, 2)`` array of centers; ``transform`` returns
    the radial discrepancy of each row of ``X`` under the fitted lattice.
    """

    def __init__(self, spacing=0.78, theta_range_deg=5.0, theta_step_deg=0.05, weighting="uniform"):
        self.spacing = spacing
        self.theta_range_deg = theta_range_deg
        self.theta_step_deg = theta_step_deg
        self.weighting = weighting

    def fit(self, X, y=None, sample_weight=None):
        if self.weighting not in ("uniform", "amplitude"):
            raise InvalidInputError("weighting must be 'uniform' or 'amplitude'")
        w = sample_weight if self.weighting == "amplitude" else None
        self.registration_ = register_grid(X, self.spacing, w, self.theta_range_deg, self.theta_step_deg,
                                           weighting=self.weighting)
        self.dx_, self.dy_, self.theta_ = (self.registration_.dx, self.registration_.dy,
                                           self.registration_.theta)
        return self

    def transform(self, X):
        check_is_fitted(self, "registration_")
        p = as_2d_float(X, "X")
        return _assign(p, self.spacing, np.array([self.dx_, self.dy_]), self.theta_)[1]
