import io

import numpy as np
import pytest

from _oracles import micro_hyper
from ddpquant.geoquant import SolverSettings, mixture_quantile_mc, MixtureSpec
from ddpquant.gibbs import McmcSettings, run_chain
from ddpquant.model import Dataset, default_hyperparams, gp_conditional, gp_cov, stick_break
from ddpquant.pipeline import (CovariateDensity, PosteriorDraws,
                               QuantileEstimate, QuantileQuery,
                               conditional_quantile, default_delta,
                               delta_smoothed_quantile, error_quantile_per_draw,
                               kde_fit, location_draw_at)


def _synthetic_draws(B=4, seed=0, d=3, N=2, J=2):
    """Hand-built draws over a tiny dataset, arbitrary but valid."""
    rng = np.random.default_rng(seed)
    hyper = micro_hyper(N=N, J=J)
    xs = np.linspace(0.0, 1.0, d)
    data = Dataset(xs=xs, counts=np.ones(d, dtype=int),
                   ys=tuple(rng.standard_normal((1, 2)) for _ in range(d)))
    alpha = rng.standard_normal((B, N, 2))
    beta = rng.standard_normal((B, N, d, 2))
    W = np.tile(stick_break(np.full(N - 1, 0.5)), (B, 1))
    L = rng.integers(0, N, (B, d))
    p = np.tile(stick_break(np.full(J - 1, 0.5)), (B, 1))
    eta = rng.standard_normal((B, J, 2))
    sigma2 = rng.uniform(0.5, 2.0, (B, J))
    return PosteriorDraws(alpha=alpha, beta=beta, W=W, L=L, p=p, eta=eta,
                          sigma2=sigma2, M1=np.ones(B), M2=np.ones(B),
                          loglik=np.zeros(B), data=data, hyper=hyper)


# ---------------------------------------------------------------------------
# locations
# ---------------------------------------------------------------------------

def test_location_observed_is_stored_value():
    draws = _synthetic_draws()
    b, i = 2, 1
    x = float(draws.data.xs[i])
    got = location_draw_at(draws, b, x)
    l = draws.L[b, i]
    assert np.array_equal(got, draws.alpha[b, l] + draws.beta[b, l, i])


def test_location_new_x_path_interpolates_at_knot():
    draws = _synthetic_draws()
    # point-mass stick weights pin the sampled cluster to l = 0
    draws.W[:] = np.concatenate(([1.0], np.zeros(draws.hyper.N - 1)))
    b, i = 1, 2
    # shift by an ulp-free epsilon of zero: force the new-x code path by a
    # value not present among the knots, infinitesimally close to one
    x = float(draws.data.xs[i]) + 1e-13
    rng = np.random.default_rng(5)
    got = location_draw_at(draws, b, x, rng=rng)
    expect = draws.alpha[b, 0] + draws.beta[b, 0, i]
    assert np.linalg.norm(got - expect) < 1e-5


def test_location_new_x_conditional_moment_oracle():
    draws = _synthetic_draws(B=1)
    draws.W[:] = np.concatenate(([1.0], np.zeros(draws.hyper.N - 1)))
    x = 0.37
    rng = np.random.default_rng(9)
    reps = np.stack([location_draw_at(draws, 0, x, rng=rng)
                     for _ in range(10_000)])
    kern = gp_cov(draws.data.xs, draws.hyper.gamma, draws.hyper.lambda_)
    mean_ref, var = gp_conditional(kern, draws.beta[0, 0], draws.hyper.c1, x)
    expect = draws.alpha[0, 0] + mean_ref
    se = np.sqrt(var / 10_000)
    assert np.all(np.abs(reps.mean(axis=0) - expect) < 3 * se + 1e-9)


def test_location_requires_rng_for_new_x():
    draws = _synthetic_draws()
    with pytest.raises(ValueError):
        location_draw_at(draws, 0, 123.456)


def test_location_rejects_bad_index():
    draws = _synthetic_draws()
    with pytest.raises(IndexError):
        location_draw_at(draws, 99, 0.0)


# ---------------------------------------------------------------------------
# error quantiles
# ---------------------------------------------------------------------------

def test_error_quantile_single_component_draws():
    draws = _synthetic_draws(B=3)
    draws.p[:] = np.array([1.0, 0.0])
    draws.eta[:, 0] = np.array([1.5, -2.0])
    draws.sigma2[:] = 1.0
    got = error_quantile_per_draw(draws, np.zeros(2),
                                  SolverSettings(mc_samples=200_000), seed=1)
    assert np.all(np.linalg.norm(got - [1.5, -2.0], axis=1) < 0.02)


def test_error_quantile_symmetric_mixture_draws():
    draws = _synthetic_draws(B=3)
    m = np.array([0.7, 0.3])
    draws.p[:] = np.array([0.5, 0.5])
    draws.eta[:, 0] = m + np.array([1.0, 0.0])
    draws.eta[:, 1] = m - np.array([1.0, 0.0])
    draws.sigma2[:] = 0.8
    got = error_quantile_per_draw(draws, np.zeros(2),
                                  SolverSettings(mc_samples=200_000), seed=2)
    assert np.all(np.linalg.norm(got - m, axis=1) < 0.02)


def test_error_quantile_matches_grid_oracle_per_draw():
    draws = _synthetic_draws(B=3, seed=4)
    u = np.array([0.25, -0.1])
    s = SolverSettings(mc_samples=100_000, grid_step=0.01)
    got = error_quantile_per_draw(draws, u, s, seed=3)
    for b in range(3):
        mix = MixtureSpec(weights=draws.p[b], means=draws.eta[b],
                          variances=draws.sigma2[b])
        ref = mixture_quantile_mc(mix, u, s, seed=1234 + b, method="grid")
        assert np.linalg.norm(got[b] - ref) < 0.05


def test_error_quantile_polar_route():
    draws = _synthetic_draws(B=2, seed=6)
    u = np.zeros(2)
    mc = error_quantile_per_draw(draws, u,
                                 SolverSettings(mc_samples=200_000), seed=5)
    pol = error_quantile_per_draw(draws, u, method="polar")
    assert np.all(np.linalg.norm(mc - pol, axis=1) < 0.05)


# ---------------------------------------------------------------------------
# conditional quantiles
# ---------------------------------------------------------------------------

def test_conditional_quantile_degenerate_chain():
    draws = _synthetic_draws(B=5, seed=7)
    draws.alpha[:] = draws.alpha[0]
    draws.beta[:] = draws.beta[0]
    draws.L[:] = draws.L[0]
    x = float(draws.data.xs[0])
    est = conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=x),
                               error_draws=np.zeros((5, 2)))
    l = draws.L[0, 0]
    assert np.allclose(est.point, draws.alpha[0, l] + draws.beta[0, l, 0])
    assert np.allclose(est.ci_upper - est.ci_lower, 0.0)


def test_conditional_quantile_order_statistic_oracle():
    # per-draw values (1,0), (2,0), ..., (100,0): interpolated percentiles
    # at 2.5/97.5 are 3.475 and 97.525
    B = 100
    draws = _synthetic_draws(B=B, seed=8, N=2)
    draws.L[:] = 0
    draws.beta[:, 0, 0] = 0.0
    draws.alpha[:, 0] = np.stack([np.arange(1.0, B + 1),
                                  np.zeros(B)], axis=1)
    x = float(draws.data.xs[0])
    est = conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=x),
                               error_draws=np.zeros((B, 2)))
    assert est.point[0] == np.arange(1.0, B + 1).mean()
    assert abs(est.ci_lower[0] - 3.475) < 1e-12
    assert abs(est.ci_upper[0] - 97.525) < 1e-12
    assert est.per_draw.shape == (B, 2)


def test_conditional_quantile_rejects_delta():
    draws = _synthetic_draws()
    with pytest.raises(ValueError):
        conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=0.0,
                                                  delta=0.1))


def test_query_validation():
    with pytest.raises(ValueError):
        QuantileQuery(u=np.array([0.8, 0.7]), x=0.0)
    with pytest.raises(ValueError):
        QuantileQuery(u=np.zeros(2), x=0.0, delta=-1.0)
    with pytest.raises(ValueError):
        QuantileQuery(u=np.zeros(2), x=0.0, level=1.0)
    with pytest.raises(ValueError):
        QuantileQuery(u=np.zeros(2), x=0.0, smoothing_samples=0)


def test_quantile_estimate_invariants():
    with pytest.raises(ValueError):
        QuantileEstimate(point=np.zeros(2), ci_lower=np.ones(2),
                         ci_upper=np.zeros(2), per_draw=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        QuantileEstimate(point=np.full(2, 9.0), ci_lower=np.zeros(2),
                         ci_upper=np.ones(2), per_draw=np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# delta smoothing
# ---------------------------------------------------------------------------

def test_delta_collapse_to_conditional():
    draws = _synthetic_draws(B=400, seed=10)
    draws.W[:] = np.concatenate(([1.0], np.zeros(draws.hyper.N - 1)))
    x = 0.41  # new covariate value
    err = np.zeros((400, 2))
    base = conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=x),
                                error_draws=err, seed=1)
    density = CovariateDensity(kind="parametric-normal", mean=0.0, sd=1.0)
    sm = delta_smoothed_quantile(
        draws, QuantileQuery(u=np.zeros(2), x=x, delta=1e-9,
                             smoothing_samples=4),
        density, seed=2, error_draws=err)
    assert np.linalg.norm(sm.point - base.point) < 0.2


def test_delta_requires_positive_delta():
    draws = _synthetic_draws()
    density = CovariateDensity(kind="parametric-normal")
    with pytest.raises(ValueError):
        delta_smoothed_quantile(draws, QuantileQuery(u=np.zeros(2), x=0.0),
                                density, seed=0)


def test_default_delta_value():
    assert abs(default_delta(100) - 0.2154434690031884) < 1e-12


def test_truncated_sampling_stays_in_window():
    rng = np.random.default_rng(3)
    norm = CovariateDensity(kind="parametric-normal", mean=2.0, sd=1.5)
    xs = norm.sample_truncated(1.0, 2.5, 500, rng)
    assert xs.size == 500
    assert np.all((xs >= 1.0) & (xs <= 2.5))
    kde = kde_fit(np.random.default_rng(4).standard_normal(50))
    xk = kde.sample_truncated(-0.5, 0.5, 300, rng)
    assert np.all((xk >= -0.5) & (xk <= 0.5))


def test_truncated_sampling_inverse_cdf_fallback():
    rng = np.random.default_rng(5)
    norm = CovariateDensity(kind="parametric-normal", mean=0.0, sd=1.0)
    # window so narrow rejection cannot fill it; exact fallback must kick in
    xs = norm.sample_truncated(1.0, 1.0 + 1e-7, 50, rng)
    assert np.all((xs >= 1.0) & (xs <= 1.0 + 1e-7))
    kde = kde_fit(np.random.default_rng(6).standard_normal(30))
    xk = kde.sample_truncated(0.5, 0.5 + 1e-7, 20, rng)
    assert np.all((xk >= 0.5) & (xk <= 0.5 + 1e-7))


def test_truncated_sampling_empty_window():
    norm = CovariateDensity(kind="parametric-normal", mean=0.0, sd=1.0)
    with pytest.raises(ValueError):
        norm.sample_truncated(40.0, 40.1, 10, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# KDE
# ---------------------------------------------------------------------------

def test_kde_two_point_bandwidth_and_symmetry():
    kde = kde_fit([0.0, 1.0])
    sd = np.std([0.0, 1.0], ddof=1)
    assert abs(kde.bandwidth - 1.06 * sd * 2 ** (-0.2)) < 1e-12
    xs = np.linspace(-2, 3, 101)
    dens = kde.pdf(xs)
    assert np.allclose(dens, dens[::-1], atol=1e-12)  # symmetric about 0.5


def test_kde_integrates_to_one():
    kde = kde_fit(np.random.default_rng(7).standard_normal(40))
    xs = np.linspace(-12, 12, 4001)
    total = np.trapezoid(kde.pdf(xs), xs)
    assert abs(total - 1.0) < 1e-3


def test_kde_matches_direct_kernel_sum():
    sample = np.random.default_rng(8).standard_normal(40)
    kde = kde_fit(sample)
    for x in (-0.7, 0.1, 1.3):
        direct = np.mean(np.exp(-0.5 * ((x - sample) / kde.bandwidth) ** 2)
                         / (kde.bandwidth * np.sqrt(2 * np.pi)))
        assert abs(kde.pdf(np.array(x)) - direct) < 1e-12


def test_kde_degenerate_sample_rejected():
    with pytest.raises(ValueError):
        kde_fit([1.0])
    with pytest.raises(ValueError):
        kde_fit([2.0, 2.0, 2.0])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_posterior_jsonl_round_trip():
    draws = _synthetic_draws(B=6, seed=11)
    buf = io.StringIO()
    draws.to_jsonl(buf)
    buf.seek(0)
    back = PosteriorDraws.from_jsonl(buf, draws.data, draws.hyper)
    assert back.B == 6
    for name in ("alpha", "beta", "W", "L", "p", "eta", "sigma2", "M1", "M2",
                 "loglik"):
        assert np.array_equal(getattr(back, name), getattr(draws, name)), name


def test_posterior_jsonl_empty_rejected():
    with pytest.raises(ValueError):
        PosteriorDraws.from_jsonl(io.StringIO(""), None, None)


# ---------------------------------------------------------------------------
# end-to-end statistical properties
# ---------------------------------------------------------------------------

def _linear_fit(seed, shift=0.0, n=20, n_draws=250, burn_in=120):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = np.stack([1 + 2 * x, x], axis=1) + 0.15 * rng.standard_normal((n, 2))
    y = y + shift
    hyper = default_hyperparams(2, c0=np.array([1.0 + shift, 1.0 + shift]))
    data = Dataset.from_pairs(x, y)
    draws = run_chain(data, hyper, McmcSettings(n_draws=n_draws,
                                                burn_in=burn_in, seed=seed))
    return data, draws


@pytest.mark.properties
def test_translation_consistency():
    shift = 7.5
    data, base = _linear_fit(31)
    _, moved = _linear_fit(31, shift=shift)
    x = float(data.xs[len(data.xs) // 2])
    err = error_quantile_per_draw(base, np.zeros(2),
                                  SolverSettings(mc_samples=5000), seed=3)
    err2 = error_quantile_per_draw(moved, np.zeros(2),
                                   SolverSettings(mc_samples=5000), seed=3)
    q = QuantileQuery(u=np.zeros(2), x=x)
    a = conditional_quantile(base, q, error_draws=err)
    b = conditional_quantile(moved, q, error_draws=err2)
    width = np.maximum(a.ci_upper - a.ci_lower, 0.05)
    assert np.all(np.abs(b.point - (a.point + shift)) < width)


@pytest.mark.properties
def test_ci_coverage_at_knot():
    hits = 0
    n_seeds = 20
    for seed in range(n_seeds):
        data, draws = _linear_fit(100 + seed, n=24, n_draws=220, burn_in=120)
        x = float(data.xs[len(data.xs) // 2])
        truth = np.array([1 + 2 * x, x])
        err = error_quantile_per_draw(draws, np.zeros(2),
                                      SolverSettings(mc_samples=4000), seed=9)
        est = conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=x),
                                   error_draws=err)
        if np.all((truth >= est.ci_lower) & (truth <= est.ci_upper)):
            hits += 1
    assert hits >= 0.8 * n_seeds


def test_per_draw_mean_is_point_exactly():
    draws = _synthetic_draws(B=7, seed=12)
    x = float(draws.data.xs[0])
    err = np.random.default_rng(1).standard_normal((7, 2))
    est = conditional_quantile(draws, QuantileQuery(u=np.zeros(2), x=x),
                               error_draws=err)
    assert est.per_draw.shape[0] == draws.B
    assert np.array_equal(est.point, est.per_draw.mean(axis=0))
