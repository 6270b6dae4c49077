"""Damped least-squares driver shared by the curve fitters.

Thin layer over :func:`scipy.optimize.least_squares` that fixes the
convergence policy (relative step < ``xtol``, bounded iteration count),
turns non-convergence into :class:`FitFailure` and derives a parameter
covariance from the final Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .exceptions import FitFailure

XTOL = 1e-8
MAX_ITER = 200


@dataclass(frozen=True)
class LsqResult:
    params: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    cost: float
    iterations: int


def fit(residual_fn, x0, bounds=(-np.inf, np.inf), xtol=XTOL, max_iter=MAX_ITER,
        x_scale="jac", absolute_sigma=False, jac="2-point"):
    """Minimise ``sum(residual_fn(p)**2)`` starting from ``x0``.

    Parameters
    ----------
    residual_fn : callable
        Returns the (weighted) residual vector.
    x0 : array-like
        Initial parameters.
    absolute_sigma : bool
        If True the residuals are already normalised by their standard
        deviation and the covariance is not rescaled by the reduced chi².

    Raises
    ------
    FitFailure
        When the iteration budget is exhausted or the residuals are not finite.
    """
    x0 = np.asarray(x0, dtype=float)
    lo, hi = bounds
    x0 = np.clip(x0, np.broadcast_to(lo, x0.shape) + 0.0, np.broadcast_to(hi, x0.shape) + 0.0)
    try:
        res = least_squares(residual_fn, x0, jac=jac, bounds=bounds, method="trf",
                            xtol=xtol, ftol=1e-15, gtol=1e-15, x_scale=x_scale,
                            max_nfev=max_iter)
    except ValueError as exc:  # non-finite residuals at x0
        raise FitFailure(f"least squares aborted: {exc}", last_iterate=x0) from exc
    if res.status == 0:
        raise FitFailure("no convergence within the iteration budget", last_iterate=res.x)
    if not np.all(np.isfinite(res.fun)):
        raise FitFailure("non-finite residuals at solution", last_iterate=res.x)
    cov = covariance_from_jacobian(res.jac, res.fun, absolute_sigma=absolute_sigma)
    return LsqResult(res.x, cov, res.fun, float(res.cost), int(res.nfev))


def covariance_from_jacobian(jac, residuals, absolute_sigma=False):
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    m, n = jac.shape
    _, s, vt = np.linalg.svd(jac, full_matrices=False)
    threshold = np.finfo(float).eps * max(jac.shape) * (s[0] if s.size else 0.0)
    s = s[s > threshold]
    vt = vt[: s.size]
    cov = (vt.T / s**2) @ vt
    if cov.shape != (n, n):
        cov = np.full((n, n), np.inf)
    if not absolute_sigma:
        dof = max(m - n, 1)
        cov = cov * (2.0 * 0.5 * float(np.dot(residuals, residuals)) / dof)
    return cov
