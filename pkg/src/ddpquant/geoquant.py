"""Geometric quantiles of point clouds and Gaussian mixtures.

The u-th geometric quantile of a distribution P on R^k, for a direction u in
the open unit ball, is the minimizer over theta of

    E_P[ phi(u, Y - theta) ],      phi(u, t) = ||t||_2 + <u, t>.

At u = 0 this is the spatial median.  This module provides

* the objective ``phi`` itself,
* Weiszfeld-type solvers for empirical (weighted) point clouds,
* two evaluators of the geometric quantile of a Gaussian location-scale
  mixture with spherical components: a Monte Carlo route (any k) and a
  polar-coordinate quadrature route (k = 2) built on the modified Bessel
  function I0.  The two are independent implementations and are used to
  cross-validate each other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolverSettings",
    "MixtureSpec",
    "NonConvergenceWarning",
    "phi",
    "validate_direction",
    "empirical_geometric_quantile",
    "weighted_geometric_quantile",
    "bessel_i0",
    "bessel_i0e",
    "sample_mixture",
    "mixture_quantile_mc",
    "mixture_quantile_polar",
]


class NonConvergenceWarning(UserWarning):
    """Weiszfeld iteration reached max_iter before the movement tolerance."""


@dataclass(frozen=True)
class SolverSettings:
    """Tunables shared by the quantile solvers.

    tol               convergence threshold on iterate movement (l2)
    max_iter          Weiszfeld iteration cap
    mc_samples        Monte Carlo sample size R for mixture quantiles
    quadrature_rmax   upper limit of the radial quadrature; None picks the
                      smallest value whose neglected tail is < 1e-10
    quadrature_points Gauss-Legendre node count on [0, quadrature_rmax]
    grid_bounds       ((lo1, hi1), ..., (lok, hik)) search box for grid
                      modes; None derives a box from the mixture
    grid_step         final resolution of the theta grid
    """

    tol: float = 1e-9
    max_iter: int = 2000
    mc_samples: int = 200_000
    quadrature_rmax: float | None = None
    quadrature_points: int = 400
    grid_bounds: tuple[tuple[float, float], ...] | None = None
    grid_step: float = 0.005

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.grid_step <= 0:
            raise ValueError("grid_step must be positive")
        if self.quadrature_rmax is not None and self.quadrature_rmax <= 0:
            raise ValueError("quadrature_rmax must be positive")
        if self.quadrature_points < 2:
            raise ValueError("quadrature_points must be >= 2")


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Finite mixture sum_j weights[j] * N_k(means[j], variances[j] * I_k)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        if np.any(v <= 0):
            raise ValueError("mixture variances must be strictly positive")
        if not (w.shape[0] == m.shape[0] == v.shape[0]):
            raise ValueError("weights, means, variances must share length J")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def k(self) -> int:
        return self.means.shape[1]

    @property
    def ncomp(self) -> int:
        return self.weights.shape[0]


def validate_direction(u, k: int | None = None) -> np.ndarray:
    """Check that u lies in the open unit l2 ball and return it as an array."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise ValueError("direction must be a 1-d vector")
    if k is not None and u.shape[0] != k:
        raise ValueError(f"direction has dimension {u.shape[0]}, expected {k}")
    if np.linalg.norm(u) >= 1.0:
        raise ValueError("direction must satisfy ||u||_2 < 1")
    return u


def phi(u, t):
    """Quantile loss phi(u, t) = ||t||_2 + <u, t>.

    ``t`` may be a single k-vector or an (n, k) stack; ``u`` is a k-vector.
    By Cauchy-Schwarz, phi(u, t) >= (1 - ||u||) * ||t|| >= 0 for ||u|| < 1.
    """
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.shape[-1] != u.shape[0]:
        raise ValueError("u and t must have the same dimension k")
    return np.linalg.norm(t, axis=-1) + t @ u


def _cloud_objective(points, weights, u, theta):
    # sum_i weights_i * phi(u, y_i - theta), weights already normalized
    return float(weights @ phi(u, points - theta))


def _certify_data_point(points, weights, u, j, snap):
    """Subgradient optimality test at points[j]: the point minimizes the
    weighted objective iff the pull of the off-point mass is no larger than
    the weight sitting on the point."""
    dd = points - points[j]
    ddn = np.sqrt((dd * dd).sum(axis=1))
    coincident = ddn < snap
    mass = weights[coincident].sum()
    r = (weights[~coincident] / ddn[~coincident]) @ dd[~coincident] + u
    return np.linalg.norm(r) <= mass * (1.0 + 1e-9) + 1e-12


# Clouds up to this size get the full kink probe (all data points scored);
# larger clouds only probe the point nearest the iterate.
_FULL_PROBE_LIMIT = 1500


def weighted_geometric_quantile(points, weights, u, settings=None, start=None,
                                return_info=False):
    """Geometric quantile of a weighted point cloud by offset Weiszfeld.

    Minimizes sum_i w_i * phi(u, y_i - theta) over theta (w normalized to 1).
    The fixed-point step

        theta <- (sum_i w_i y_i / d_i + u) / (sum_i w_i / d_i),  d_i = ||y_i - theta||

    is the stationarity condition of the objective and, being a
    majorize-minimize step, never increases it.  Iteration stops when the
    iterate moves less than ``tol``, or when the (monotone) objective stops
    decreasing at relative 1e-14 for two consecutive steps, which covers the
    near-coincidence regime where movement shrinks faster than the distance
    to the optimum.  If an iterate lands exactly on a data point the
    subgradient optimality condition is tested there; when it fails a
    Vardi-Zhang step escapes the point and iteration resumes.

    Returns the minimizer; with ``return_info=True`` also a dict with keys
    ``converged``, ``iterations``, ``objective``.
    """
    if settings is None:
        settings = SolverSettings()
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("point cloud must be nonempty")
    weights = np.asarray(weights, dtype=float)
    if weights.shape[0] != points.shape[0]:
        raise ValueError("weights must match the number of points")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    weights = weights / weights.sum()
    u = validate_direction(u, points.shape[1])

    wmean = weights @ points
    theta = wmean.copy() if start is None else np.asarray(start, dtype=float).copy()
    scale = 1.0 + float(np.max(np.abs(points - theta), initial=0.0))
    snap = 1e-9 * scale
    obj = np.inf  # objective at the previous iterate, filled lazily
    converged = False
    skip_descent_check = False
    plateau = 0
    next_probe = 30
    n_iter = 0
    for n_iter in range(1, settings.max_iter + 1):
        diff = points - theta
        d = np.sqrt((diff * diff).sum(axis=1))
        # objective at the current iterate, from the distances just computed
        cur_obj = float(weights @ d + u @ (wmean - theta))
        if __debug__ and not skip_descent_check:
            assert cur_obj <= obj + 1e-12 * (1.0 + abs(obj)), \
                "Weiszfeld objective increased"
        plateau = plateau + 1 if obj - cur_obj < 1e-14 * (1.0 + abs(cur_obj)) \
            else 0
        obj = cur_obj
        skip_descent_check = False
        if plateau >= 2:
            converged = True
            break
        at_point = d < snap
        if np.any(at_point):
            # Subgradient test at the coincident point: optimal iff
            # ||sum_{i off point} w_i (y_i-theta)/d_i + u|| <= mass on the point.
            off = ~at_point
            mass = weights[at_point].sum()
            if not np.any(off):
                converged = True
                break
            r = (weights[off] / d[off]) @ diff[off] + u
            rnorm = np.linalg.norm(r)
            if rnorm <= mass + 1e-12:
                converged = True
                break
            # Vardi-Zhang escape step: move along the residual pull, scaled
            # down by the mass sitting on the point.
            T = (weights[off] / d[off]).sum()
            theta = theta + (1.0 - mass / rnorm) / T * r
            skip_descent_check = True
            continue
        w = weights / d
        new_theta = (w @ points + u) / w.sum()
        move = np.linalg.norm(new_theta - theta)
        theta = new_theta
        if move < settings.tol:
            converged = True
            break
        # Kink probe: the iteration is slow exactly when the optimum sits on
        # a data point (collinear or near-coincident clouds).  Certify such
        # a point by the subgradient condition and snap to it.
        if n_iter >= next_probe:
            next_probe = n_iter + 200
            jmin = int(np.argmin(d))
            candidates = []
            if d[jmin] < 1e-3 * scale and move < 0.05 * d[jmin]:
                candidates.append(jmin)
            elif points.shape[0] <= _FULL_PROBE_LIMIT:
                # score every data point and test the best one
                dmat = np.linalg.norm(points[None, :, :] - points[:, None, :],
                                      axis=2)
                fvals = dmat @ weights - points @ u
                candidates.append(int(np.argmin(fvals)))
            for j in candidates:
                if _certify_data_point(points, weights, u, j, snap):
                    theta = points[j].copy()
                    converged = True
                    break
            if converged:
                break
    if not converged:
        warnings.warn("Weiszfeld did not converge within max_iter; returning "
                      "the last iterate", NonConvergenceWarning)
    if return_info:
        return theta, {"converged": converged, "iterations": n_iter,
                       "objective": _cloud_objective(points, weights, u, theta)}
    return theta


def empirical_geometric_quantile(points, u, settings=None, start=None,
                                 return_info=False):
    """Geometric quantile of an unweighted point cloud.

    Minimizes (1/n) sum_i phi(u, y_i - theta); see
    :func:`weighted_geometric_quantile` for the iteration.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("point cloud must be nonempty")
    weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return weighted_geometric_quantile(points, weights, u, settings=settings,
                                       start=start, return_info=return_info)


# ---------------------------------------------------------------------------
# Modified Bessel function of the first kind, order zero.
#
# Split point: power series for x <= 18, asymptotic expansion above.
# The series  I0(x) = sum_m (x^2/4)^m / (m!)^2  is summed until terms fall
# below 1e-18 of the running sum (about 45 terms at x = 18).  For x > 18 the
# large-argument expansion I0(x) = e^x / sqrt(2 pi x) * sum_k a_k, with
# a_0 = 1 and a_k = a_{k-1} (2k-1)^2 / (8 k x), has its smallest term below
# 1e-13 relative, comfortably inside the 1e-10 accuracy target.
# ---------------------------------------------------------------------------

_I0_SPLIT = 18.0


def _i0_series(x):
    x = np.asarray(x, dtype=float)
    q = 0.25 * x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    for m in range(1, 60):
        term = term * q / (m * m)
        total = total + term
        if np.all(term <= 1e-18 * total):
            break
    return total


def _i0_asymptotic_scaled(x):
    # e^{-x} I0(x) for large x
    x = np.asarray(x, dtype=float)
    term = np.ones_like(x)
    total = np.ones_like(x)
    for kk in range(1, 24):
        term = term * (2 * kk - 1) ** 2 / (8.0 * kk * x)
        total = total + term
        if np.all(term <= 1e-18 * total):
            break
    return total / np.sqrt(2.0 * np.pi * x)


def bessel_i0(x):
    """I0(x) for x >= 0, accurate to better than 1e-10 relative.

    Series/asymptotic split at x = 18 (see the module comment above).
    Accepts scalars or arrays; overflows to inf for x beyond ~709 as e^x does.
    """
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0):
        raise ValueError("bessel_i0 requires x >= 0")
    small = x_arr <= _I0_SPLIT
    out = np.empty_like(x_arr)
    if np.any(small):
        out[small] = _i0_series(x_arr[small])
    if np.any(~small):
        xl = x_arr[~small]
        out[~small] = np.exp(xl) * _i0_asymptotic_scaled(xl)
    return out if np.ndim(x) else float(out)


def bessel_i0e(x):
    """Exponentially scaled e^{-x} I0(x); stable for arbitrarily large x."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0):
        raise ValueError("bessel_i0e requires x >= 0")
    small = x_arr <= _I0_SPLIT
    out = np.empty_like(x_arr)
    if np.any(small):
        xs = x_arr[small]
        out[small] = _i0_series(xs) * np.exp(-xs)
    if np.any(~small):
        out[~small] = _i0_asymptotic_scaled(x_arr[~small])
    return out if np.ndim(x) else float(out)


# ---------------------------------------------------------------------------
# Mixture quantiles
# ---------------------------------------------------------------------------

def sample_mixture(mix: MixtureSpec, size: int, rng) -> np.ndarray:
    """Draw ``size`` points from the mixture; (size, k) array."""
    cum = np.cumsum(mix.weights)
    comp = np.minimum(np.searchsorted(cum, rng.random(size), side="right"),
                      mix.ncomp - 1)
    z = rng.standard_normal((size, mix.k))
    return mix.means[comp] + np.sqrt(mix.variances[comp])[:, None] * z


def _default_box(mix: MixtureSpec, u) -> tuple[tuple[float, float], ...]:
    # Search box wide enough to contain the quantile for moderate ||u||.
    sd = np.sqrt(mix.variances.max())
    pad = sd * (4.0 + 3.0 * np.linalg.norm(u) / (1.0 - np.linalg.norm(u)))
    lo = mix.means.min(axis=0) - pad
    hi = mix.means.max(axis=0) + pad
    return tuple((float(a), float(b)) for a, b in zip(lo, hi))


def _scan_grid(objective, bounds, final_step):
    """Minimize ``objective`` (vectorized over an (m, k) theta array) by a
    coarse-to-fine rectangular grid scan; returns the best theta found.

    Each stage is scanned in full and the next stage brackets the current
    argmin by +-3 steps at 8x resolution.  The objectives minimized here are
    convex, so the refinement lands in the same cell a full scan at
    ``final_step`` would, at a tiny fraction of the cost.
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    k = lo.shape[0]
    step = float(max((hi - lo).max() / 40.0, final_step))
    best = None
    while True:
        axes = [np.arange(lo[c], hi[c] + 0.5 * step, step) for c in range(k)]
        mesh = np.meshgrid(*axes, indexing="ij")
        thetas = np.stack([m.ravel() for m in mesh], axis=1)
        vals = objective(thetas)
        best = thetas[int(np.argmin(vals))]
        if step <= final_step * (1 + 1e-12):
            return best
        lo = np.maximum(best - 3.0 * step, lo)
        hi = np.minimum(best + 3.0 * step, hi)
        step = max(step / 8.0, final_step)


def _mc_objective(samples, u):
    mean_t = samples.mean(axis=0)

    def objective(thetas):
        out = np.empty(thetas.shape[0])
        chunk = max(1, int(2e7 // samples.shape[0]))
        for s in range(0, thetas.shape[0], chunk):
            block = thetas[s:s + chunk]
            d = np.linalg.norm(samples[None, :, :] - block[:, None, :], axis=2)
            out[s:s + chunk] = d.mean(axis=1)
        return out + (mean_t - thetas) @ u

    return objective


def mixture_quantile_mc(mix: MixtureSpec, u, settings=None, seed=0,
                        method="weiszfeld", start=None):
    """Geometric quantile of a Gaussian mixture by Monte Carlo.

    Draws ``settings.mc_samples`` points from the mixture and minimizes the
    empirical objective.  ``method="weiszfeld"`` (default) solves it exactly
    via :func:`empirical_geometric_quantile`; ``method="grid"`` scans the
    Monte Carlo average of phi over a rectangular theta grid and exists to
    cross-validate the solver.
    """
    if settings is None:
        settings = SolverSettings()
    u = validate_direction(u, mix.k)
    rng = np.random.default_rng(seed)
    samples = sample_mixture(mix, settings.mc_samples, rng)
    if method == "weiszfeld":
        return empirical_geometric_quantile(samples, u, settings, start=start)
    if method == "grid":
        bounds = settings.grid_bounds or _default_box(mix, u)
        if len(bounds) != mix.k:
            raise ValueError("grid_bounds dimension mismatch")
        return _scan_grid(_mc_objective(samples, u), bounds, settings.grid_step)
    raise ValueError(f"unknown method {method!r}")


def _radial_tail_bound(rmax, m):
    """Upper bound on int_rmax^inf r^2 e^{-(r-m)^2/2} i0e(rm) dr.

    Uses i0e <= 1 and the closed form of int_t^inf (s+m)^2 e^{-s^2/2} ds.
    """
    from scipy.special import erfc
    t = rmax - m
    if t <= 0:
        return np.inf
    return ((m * m + 1.0) * np.sqrt(np.pi / 2.0) * erfc(t / np.sqrt(2.0))
            + (t + 2.0 * m) * np.exp(-0.5 * t * t))


def _expected_norm_factors(m, nodes, wts):
    """E||Z + c|| for Z ~ N_2(0, I), ||c|| = m, by radial quadrature.

    Derivation (polar coordinates, angular integral giving 2*pi*I0):

        E||Z + c|| = int_0^inf r^2 e^{-(r-m)^2/2} i0e(r m) dr,

    evaluated for a vector of m values on shared Gauss-Legendre nodes.
    """
    m = np.asarray(m, dtype=float)
    rm = nodes[None, :] * m[:, None]
    integrand = (nodes[None, :] ** 2
                 * np.exp(-0.5 * (nodes[None, :] - m[:, None]) ** 2)
                 * bessel_i0e(rm))
    return integrand @ wts


def mixture_quantile_polar(mix: MixtureSpec, u, settings=None):
    """Geometric quantile of a bivariate Gaussian mixture by quadrature.

    For k = 2 the expected loss of component j reduces, via a polar
    transform whose angular integral is 2*pi*I0, to a one-dimensional radial
    integral:

        E phi(u, T - theta) = sigma_j * int_0^inf r^2 e^{-(r-m)^2/2} i0e(r m) dr
                              + <u, eta_j - theta>,
        m = ||theta - eta_j|| / sigma_j.

    The weighted sum over components is minimized over a rectangular theta
    grid (coarse-to-fine, final resolution ``grid_step``).  Agreement with
    :func:`mixture_quantile_mc` is the correctness arbiter for this route.
    """
    if settings is None:
        settings = SolverSettings()
    if mix.k != 2:
        raise ValueError("polar reduction requires k = 2")
    u = validate_direction(u, 2)
    bounds = settings.grid_bounds or _default_box(mix, u)
    if len(bounds) != 2:
        raise ValueError("grid_bounds dimension mismatch")

    sigma = np.sqrt(mix.variances)
    corners = np.array([[lo, hi] for lo, hi in bounds], dtype=float)
    corner_pts = np.stack(np.meshgrid(*corners, indexing="ij"), axis=-1).reshape(-1, 2)
    m_max = max(float(np.linalg.norm(c - mix.means[j]) / sigma[j])
                for c in corner_pts for j in range(mix.ncomp))
    if settings.quadrature_rmax is None:
        rmax = m_max + 10.0
    else:
        rmax = settings.quadrature_rmax
        if _radial_tail_bound(rmax, m_max) > 1e-10:
            raise ValueError("quadrature_rmax too small: radial tail bound "
                             "exceeds 1e-10 for this grid")
    gl_nodes, gl_wts = np.polynomial.legendre.leggauss(settings.quadrature_points)
    nodes = 0.5 * rmax * (gl_nodes + 1.0)
    wts = 0.5 * rmax * gl_wts

    mean_mix = mix.weights @ mix.means

    def objective(thetas):
        total = np.zeros(thetas.shape[0])
        for j in range(mix.ncomp):
            mj = np.linalg.norm(thetas - mix.means[j], axis=1) / sigma[j]
            total += mix.weights[j] * sigma[j] * _expected_norm_factors(mj, nodes, wts)
        return total + (mean_mix - thetas) @ u

    return _scan_grid(objective, bounds, settings.grid_step)
