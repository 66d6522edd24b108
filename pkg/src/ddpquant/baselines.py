"""Frequentist comparators: linear and kernel-weighted spatial-median fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geoquant import SolverSettings, weighted_geometric_quantile

__all__ = [
    "LinearMedianFit",
    "linear_spatial_median_fit",
    "kernel_spatial_median",
    "cv_bandwidth",
]

_IRLS_DAMP = 1e-8
_IRLS_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class LinearMedianFit:
    """Coefficients of the fit minimizing sum_i ||Y_i - alpha - beta x_i||_2."""

    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    objective: float
    iterations: int

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        return self.alpha_hat[None, :] + np.outer(x, self.beta_hat)


def _linear_objective(xs, ys, a, b):
    return float(np.linalg.norm(ys - a - np.outer(xs, b), axis=1).sum())


def linear_spatial_median_fit(xs, ys, settings: SolverSettings | None = None
                              ) -> LinearMedianFit:
    """Linear multivariate median regression by damped IRLS.

    Minimizes sum_i ||Y_i - alpha - beta x_i||_2 over k-vectors alpha, beta.
    Each pass solves the weighted least-squares normal equations on the
    design (1, x) with weights 1/max(||r_i||, 1e-8), coordinate by
    coordinate (the weights couple coordinates, the solves do not).  Starts
    from the least-squares fit; stops when the objective decrease falls
    below 1e-10 * (1 + objective).
    """
    if settings is None:
        settings = SolverSettings()
    xs = np.asarray(xs, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.size != ys.shape[0] or xs.size < 2:
        raise ValueError("need n >= 2 observations with matching lengths")
    if np.ptp(xs) == 0:
        raise ValueError("all covariate values identical: slope unidentifiable")
    X = np.column_stack((np.ones_like(xs), xs))
    coef, *_ = np.linalg.lstsq(X, ys, rcond=None)
    obj = _linear_objective(xs, ys, coef[0], coef[1])
    iters = 0
    for iters in range(1, settings.max_iter + 1):
        r = np.linalg.norm(ys - X @ coef, axis=1)
        w = 1.0 / np.maximum(r, _IRLS_DAMP)
        Xw = X * w[:, None]
        coef = np.linalg.solve(X.T @ Xw, Xw.T @ ys)
        new_obj = _linear_objective(xs, ys, coef[0], coef[1])
        if __debug__:
            assert new_obj <= obj + 1e-12 * (1.0 + abs(obj)), \
                "IRLS objective increased"
        done = obj - new_obj < _IRLS_RTOL * (1.0 + new_obj)
        obj = new_obj
        if done:
            break
    return LinearMedianFit(alpha_hat=coef[0].copy(), beta_hat=coef[1].copy(),
                           objective=obj, iterations=iters)


def kernel_spatial_median(xs, ys, x: float, h: float, u=None,
                          settings: SolverSettings | None = None) -> np.ndarray:
    """Locally weighted spatial median at x.

    Weights p_j(x) = K((x - X_j)/h) / sum_i K((x - X_i)/h) with the standard
    normal kernel; solves argmin_theta sum_j p_j(x) ||y_j - theta||_2 (or the
    u-offset objective for a nonzero direction) by weighted Weiszfeld.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    xs = np.asarray(xs, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if u is None:
        u = np.zeros(ys.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        z = (x - xs) / h
        logw = -0.5 * z * z
        w = np.exp(logw - logw.max())
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("all kernel weights underflowed at this x and h")
    return weighted_geometric_quantile(ys, w, u, settings=settings)


def cv_bandwidth(xs, ys, h_grid, settings: SolverSettings | None = None) -> float:
    """Bandwidth minimizing the leave-one-out risk
    sum_i ||y_i - xi_hat_{-i}(x_i)||_2^2 over the given grid."""
    h_grid = np.asarray(h_grid, dtype=float)
    if h_grid.size == 0 or np.any(h_grid <= 0):
        raise ValueError("h_grid must be nonempty and positive")
    xs = np.asarray(xs, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = xs.size
    risks = np.empty(h_grid.size)
    for gi, h in enumerate(h_grid):
        total = 0.0
        for i in range(n):
            mask = np.arange(n) != i
            est = kernel_spatial_median(xs[mask], ys[mask], xs[i], h,
                                        settings=settings)
            total += float(((ys[i] - est) ** 2).sum())
        risks[gi] = total
    return float(h_grid[int(np.argmin(risks))])
