"""End-to-end conditional quantiles from posterior draws.

A fitted chain yields B stored states.  For a direction u and covariate
value x, the per-draw conditional quantile is

    Q^b(u | x) = xi^b(x) + Q_eps^b(u)

where xi^b(x) is the draw's cluster location at x (stored for observed x,
GP-extended otherwise) and Q_eps^b(u) is the geometric quantile of the
draw's error mixture.  The point estimate is the arithmetic mean of the
per-draw quantiles, which by linearity equals the averaged error quantile
added to the posterior mean location; coordinate-wise credible intervals
come from the per-draw values by linear interpolation of order statistics.

Delta-smoothing replaces the conditional law at x by the conditional law of
Y given X in [x - delta, x + delta]: covariate values x~ are drawn from the
(estimated) X density truncated to the window and per-draw quantiles are
averaged over them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtr, ndtri

from .geoquant import (MixtureSpec, SolverSettings, mixture_quantile_mc,
                       mixture_quantile_polar, validate_direction)
from .model import Dataset, Hyperparams, gp_cov

__all__ = [
    "PosteriorDraws",
    "QuantileQuery",
    "QuantileEstimate",
    "CovariateDensity",
    "default_delta",
    "location_draw_at",
    "error_quantile_per_draw",
    "conditional_quantile",
    "delta_smoothed_quantile",
    "kde_fit",
]

# Monte Carlo size for per-draw error quantiles; acceptance-level cross
# validation uses larger explicit settings.
_DRAW_SETTINGS = SolverSettings(mc_samples=10_000)

_XTILDE_KEY = 2**31  # spawn-key namespace for smoothing draws


def default_delta(n: int) -> float:
    """Default smoothing radius n^(-1/3) for a sample of size n."""
    return float(n) ** (-1.0 / 3.0)


@dataclass(eq=False)
class PosteriorDraws:
    """Stored post-burn-in states, stacked along the draw axis."""

    alpha: np.ndarray   # (B, N, k)
    beta: np.ndarray    # (B, N, d, k)
    W: np.ndarray       # (B, N)
    L: np.ndarray       # (B, d)
    p: np.ndarray       # (B, J)
    eta: np.ndarray     # (B, J, k)
    sigma2: np.ndarray  # (B, J)
    M1: np.ndarray      # (B,)
    M2: np.ndarray      # (B,)
    loglik: np.ndarray  # (B,)
    data: Dataset
    hyper: Hyperparams

    def __post_init__(self):
        if self.alpha.ndim != 3 or self.alpha.shape[0] < 1:
            raise ValueError("need at least one stored draw")
        B = self.alpha.shape[0]
        for name in ("beta", "W", "L", "p", "eta", "sigma2", "M1", "M2",
                     "loglik"):
            if getattr(self, name).shape[0] != B:
                raise ValueError(f"{name} must have B = {B} leading entries")

    @property
    def B(self) -> int:
        return self.alpha.shape[0]

    def __len__(self) -> int:
        return self.B

    def draw(self, b: int) -> dict:
        """Views of one stored state."""
        if not 0 <= b < self.B:
            raise IndexError("draw index out of range")
        return {name: getattr(self, name)[b]
                for name in ("alpha", "beta", "W", "L", "p", "eta",
                             "sigma2", "M1", "M2", "loglik")}

    # -- JSON-lines interchange ------------------------------------------

    def to_jsonl(self, fp):
        """One draw per line; array fields as nested lists, full precision."""
        for b in range(self.B):
            rec = {
                "alpha": self.alpha[b].tolist(),
                "beta": self.beta[b].tolist(),
                "W": self.W[b].tolist(),
                "L": self.L[b].tolist(),
                "p": self.p[b].tolist(),
                "eta": self.eta[b].tolist(),
                "sigma2": self.sigma2[b].tolist(),
                "M1": float(self.M1[b]),
                "M2": float(self.M2[b]),
                "loglik": float(self.loglik[b]),
            }
            fp.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, fp, data: Dataset, hyper: Hyperparams) -> "PosteriorDraws":
        recs = [json.loads(line) for line in fp if line.strip()]
        if not recs:
            raise ValueError("chain file contains no draws")

        def stack(name, dtype=float):
            return np.array([r[name] for r in recs], dtype=dtype)

        return cls(alpha=stack("alpha"), beta=stack("beta"), W=stack("W"),
                   L=stack("L", dtype=int), p=stack("p"), eta=stack("eta"),
                   sigma2=stack("sigma2"), M1=stack("M1"), M2=stack("M2"),
                   loglik=stack("loglik"), data=data, hyper=hyper)


@dataclass(frozen=True)
class QuantileQuery:
    """One conditional-quantile request."""

    u: np.ndarray
    x: float
    delta: float = 0.0
    level: float = 0.95
    smoothing_samples: int = 8

    def __post_init__(self):
        object.__setattr__(self, "u", validate_direction(np.asarray(self.u, dtype=float)))
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.smoothing_samples < 1:
            raise ValueError("smoothing_samples must be >= 1")


@dataclass(frozen=True, eq=False)
class QuantileEstimate:
    """Point estimate, coordinate-wise credible bounds and per-draw values."""

    point: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    per_draw: np.ndarray

    def __post_init__(self):
        if np.any(self.ci_lower > self.ci_upper):
            raise ValueError("ci_lower must not exceed ci_upper")
        lo = self.per_draw.min(axis=0)
        hi = self.per_draw.max(axis=0)
        if np.any(self.point < lo - 1e-12) or np.any(self.point > hi + 1e-12):
            raise ValueError("point must lie within the per-draw range")


def _estimate_from_per_draw(per_draw: np.ndarray, level: float) -> QuantileEstimate:
    point = per_draw.mean(axis=0)
    qs = [100.0 * (1.0 - level) / 2.0, 100.0 * (1.0 + level) / 2.0]
    lo, hi = np.percentile(per_draw, qs, axis=0, method="linear")
    return QuantileEstimate(point=point, ci_lower=lo, ci_upper=hi,
                            per_draw=per_draw)


# ---------------------------------------------------------------------------
# Locations
# ---------------------------------------------------------------------------

def _observed_index(draws: PosteriorDraws, x: float):
    hit = np.flatnonzero(draws.data.xs == x)
    return int(hit[0]) if hit.size else None


def _kernel(draws: PosteriorDraws):
    return gp_cov(draws.data.xs, draws.hyper.gamma, draws.hyper.lambda_)


def _locations_observed(draws: PosteriorDraws, i: int) -> np.ndarray:
    """(B, k) allocated locations alpha_{L_i} + beta_{L_i}(X_i)."""
    rows = np.arange(draws.B)
    li = draws.L[:, i]
    return draws.alpha[rows, li] + draws.beta[rows, li, i]


def _locations_new(draws: PosteriorDraws, x: float, rng, kern=None) -> np.ndarray:
    """(B, k) locations at a new covariate value.

    Per draw, a cluster is re-sampled from that draw's stick weights, then
    beta_l(x) is drawn from the GP conditional given the stored knot values
    (mean linear in x, variance shared across draws).
    """
    if kern is None:
        kern = _kernel(draws)
    hyper = draws.hyper
    B = draws.B
    rows = np.arange(B)
    cum = np.cumsum(draws.W, axis=1)
    l_idx = np.minimum((rng.random(B)[:, None] > cum).sum(axis=1),
                       hyper.N - 1)
    kvec = kern.gamma * np.exp(-kern.lam * np.abs(x - kern.xs))
    w = cho_solve((kern.chol, True), kvec)
    var = float(kern.gamma - kvec @ w)
    var = min(max(var, 0.0), kern.gamma)
    prior = np.outer(kern.xs, hyper.c1)
    sel_beta = draws.beta[rows, l_idx]                    # (B, d, k)
    mean = hyper.c1 * x + np.einsum("bdk,d->bk", sel_beta - prior, w)
    noise = np.sqrt(var) * rng.standard_normal((B, hyper.k))
    return draws.alpha[rows, l_idx] + mean + noise


def location_draw_at(draws: PosteriorDraws, b: int, x: float, rng=None):
    """Location xi(x) for one stored draw.

    At an observed covariate value this is the stored allocated location;
    at a new x the cluster is sampled from the draw's stick weights and
    beta is extended by GP conditioning (``rng`` required for that path).
    """
    if not 0 <= b < draws.B:
        raise IndexError("draw index out of range")
    i = _observed_index(draws, x)
    if i is not None:
        l = draws.L[b, i]
        return draws.alpha[b, l] + draws.beta[b, l, i]
    if rng is None:
        raise ValueError("rng is required to extend the chain to a new x")
    kern = _kernel(draws)
    hyper = draws.hyper
    cum = np.cumsum(draws.W[b])
    l = int(min((rng.random() > cum).sum(), hyper.N - 1))
    kvec = kern.gamma * np.exp(-kern.lam * np.abs(x - kern.xs))
    w = cho_solve((kern.chol, True), kvec)
    var = float(kern.gamma - kvec @ w)
    var = min(max(var, 0.0), kern.gamma)
    prior = np.outer(kern.xs, hyper.c1)
    mean = hyper.c1 * x + (draws.beta[b, l] - prior).T @ w
    return draws.alpha[b, l] + mean + np.sqrt(var) * rng.standard_normal(hyper.k)


# ---------------------------------------------------------------------------
# Error quantiles
# ---------------------------------------------------------------------------

def error_quantile_per_draw(draws: PosteriorDraws, u, settings=None, seed=0,
                            method="mc") -> np.ndarray:
    """(B, k) geometric quantiles of each draw's error mixture.

    ``method="mc"`` (default) uses the Monte Carlo evaluator with a
    per-draw substream derived from (seed, b); ``method="polar"`` uses the
    quadrature route (k = 2 only).  Consecutive draws warm-start the solver
    since their mixtures differ little.
    """
    if settings is None:
        settings = _DRAW_SETTINGS
    u = validate_direction(np.asarray(u, dtype=float), draws.hyper.k)
    out = np.empty((draws.B, draws.hyper.k))
    prev = None
    for b in range(draws.B):
        mix = MixtureSpec(weights=draws.p[b], means=draws.eta[b],
                          variances=draws.sigma2[b])
        if method == "mc":
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(b,)))
            out[b] = mixture_quantile_mc(mix, u, settings, seed=rng,
                                         start=prev)
        elif method == "polar":
            out[b] = mixture_quantile_polar(mix, u, settings)
        else:
            raise ValueError(f"unknown method {method!r}")
        prev = out[b]
    return out


# ---------------------------------------------------------------------------
# Conditional quantiles
# ---------------------------------------------------------------------------

def conditional_quantile(draws: PosteriorDraws, query: QuantileQuery,
                         settings=None, seed=0, method="mc",
                         error_draws=None) -> QuantileEstimate:
    """Unsmoothed conditional quantile at query.x (delta = 0 path).

    Per draw, the quantile is the location plus the error quantile; the
    point estimate is the per-draw mean and the credible bounds are
    coordinate-wise interpolated percentiles at (1 +- level)/2.
    ``error_draws`` may carry precomputed :func:`error_quantile_per_draw`
    output to share across queries at the same u.
    """
    if query.delta != 0.0:
        raise ValueError("delta > 0: use delta_smoothed_quantile")
    if error_draws is None:
        error_draws = error_quantile_per_draw(draws, query.u, settings,
                                              seed=seed, method=method)
    i = _observed_index(draws, query.x)
    if i is not None:
        loc = _locations_observed(draws, i)
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(_XTILDE_KEY, 0)))
        loc = _locations_new(draws, query.x, rng)
    return _estimate_from_per_draw(loc + error_draws, query.level)


def delta_smoothed_quantile(draws: PosteriorDraws, query: QuantileQuery,
                            density: "CovariateDensity", seed=0,
                            settings=None, method="mc",
                            error_draws=None) -> QuantileEstimate:
    """Quantile of the delta-smoothed conditional law at query.x.

    Draws ``smoothing_samples`` covariate values from ``density`` truncated
    to [x - delta, x + delta], evaluates the per-draw location at each and
    averages within a draw before adding the error quantile.  Averaging
    quantiles over the window (rather than pooling samples) keeps the cost
    linear and collapses to the unsmoothed estimate as delta -> 0.
    """
    if query.delta <= 0.0:
        raise ValueError("delta_smoothed_quantile requires delta > 0")
    if error_draws is None:
        error_draws = error_quantile_per_draw(draws, query.u, settings,
                                              seed=seed, method=method)
    lo, hi = query.x - query.delta, query.x + query.delta
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_XTILDE_KEY,)))
    xt = density.sample_truncated(lo, hi, query.smoothing_samples, rng)
    kern = _kernel(draws)
    loc = np.zeros((draws.B, draws.hyper.k))
    for x_s in xt:
        i = _observed_index(draws, float(x_s))
        if i is not None:
            loc += _locations_observed(draws, i)
        else:
            loc += _locations_new(draws, float(x_s), rng, kern=kern)
    loc /= len(xt)
    return _estimate_from_per_draw(loc + error_draws, query.level)


# ---------------------------------------------------------------------------
# Covariate density
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovariateDensity:
    """Either a parametric normal or a Gaussian KDE over the covariate."""

    kind: str
    mean: float = 0.0
    sd: float = 1.0
    sample: np.ndarray | None = None
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("parametric-normal", "gaussian-kde"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.kind == "parametric-normal" and self.sd <= 0:
            raise ValueError("sd must be positive")
        if self.kind == "gaussian-kde":
            if self.sample is None or self.bandwidth is None:
                raise ValueError("kde needs a sample and a bandwidth")
            if self.bandwidth <= 0:
                raise ValueError("bandwidth must be positive")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "parametric-normal":
            z = (x - self.mean) / self.sd
            return np.exp(-0.5 * z * z) / (self.sd * np.sqrt(2 * np.pi))
        z = (x[..., None] - self.sample[None, :]) / self.bandwidth
        dens = np.exp(-0.5 * z * z) / (self.bandwidth * np.sqrt(2 * np.pi))
        return dens.mean(axis=-1)

    def window_mass(self, lo: float, hi: float) -> float:
        if self.kind == "parametric-normal":
            return float(ndtr((hi - self.mean) / self.sd)
                         - ndtr((lo - self.mean) / self.sd))
        z_hi = (hi - self.sample) / self.bandwidth
        z_lo = (lo - self.sample) / self.bandwidth
        return float((ndtr(z_hi) - ndtr(z_lo)).mean())

    def _sample_full(self, size: int, rng) -> np.ndarray:
        if self.kind == "parametric-normal":
            return self.mean + self.sd * rng.standard_normal(size)
        j = rng.integers(0, self.sample.size, size)
        return self.sample[j] + self.bandwidth * rng.standard_normal(size)

    def sample_truncated(self, lo: float, hi: float, size: int, rng,
                         max_rounds: int = 64) -> np.ndarray:
        """Draw from the density truncated to [lo, hi].

        Rejection sampling against the full density with a round cap; when
        the window mass is too small for rejection to finish, falls back to
        exact inverse-CDF sampling (componentwise for the KDE).
        """
        if self.window_mass(lo, hi) < 1e-12:
            raise ValueError("truncation window carries no density mass")
        got = []
        need = size
        for _ in range(max_rounds):
            cand = self._sample_full(max(4 * need, 64), rng)
            keep = cand[(cand >= lo) & (cand <= hi)]
            if keep.size:
                got.append(keep[:need])
                need -= got[-1].size
            if need == 0:
                return np.concatenate(got)
        rest = self._inverse_cdf_truncated(lo, hi, need, rng)
        got.append(rest)
        return np.concatenate(got)

    def _inverse_cdf_truncated(self, lo, hi, size, rng):
        if self.kind == "parametric-normal":
            a = ndtr((lo - self.mean) / self.sd)
            b = ndtr((hi - self.mean) / self.sd)
            uu = a + (b - a) * rng.random(size)
            return self.mean + self.sd * ndtri(uu)
        # choose kernel components by their window mass, then invert within
        mass = ndtr((hi - self.sample) / self.bandwidth) \
            - ndtr((lo - self.sample) / self.bandwidth)
        probs = mass / mass.sum()
        comp = rng.choice(self.sample.size, size=size, p=probs)
        centers = self.sample[comp]
        a = ndtr((lo - centers) / self.bandwidth)
        b = ndtr((hi - centers) / self.bandwidth)
        uu = a + (b - a) * rng.random(size)
        return centers + self.bandwidth * ndtri(uu)


def kde_fit(sample) -> CovariateDensity:
    """Gaussian KDE with the Silverman rule bandwidth 1.06 sd n^(-1/5)."""
    sample = np.asarray(sample, dtype=float)
    if sample.ndim != 1 or sample.size < 2:
        raise ValueError("kde needs at least two scalar observations")
    sd = sample.std(ddof=1)
    if sd <= 0:
        raise ValueError("kde sample is degenerate (zero variance)")
    bw = 1.06 * sd * sample.size ** (-0.2)
    return CovariateDensity(kind="gaussian-kde", sample=sample, bandwidth=bw)
