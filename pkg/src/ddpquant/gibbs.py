"""Block Gibbs sampler for the truncated stick-breaking hierarchy.

One sweep updates, in order: cluster offsets alpha, GP blocks beta, location
stick weights W, cluster allocations L, error means eta, error variances
sigma2, error allocations Z, error stick weights p, and the two
concentrations M1, M2.  All conditionals are conjugate (Gaussian,
inverse-gamma, generalized Dirichlet via latent Betas, Gamma); allocation
draws are taken in log space with max subtraction.

Randomness uses one named substream per update type, derived from the chain
seed via ``SeedSequence(entropy=seed, spawn_key=(index,))``, so adding or
reordering diagnostics cannot perturb the draws of other updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .model import (ChainState, Dataset, GPKernelMatrix, Hyperparams,
                    _chol_with_jitter, gp_condition_on, gp_cov, gp_prior_draw,
                    stick_break)
from .pipeline import PosteriorDraws

__all__ = [
    "McmcSettings",
    "ChainRngs",
    "init_state",
    "update_locations_alpha",
    "update_gp_blocks_beta",
    "update_stick_weights",
    "update_allocations_L",
    "update_error_means_eta",
    "update_error_vars_sigma2",
    "update_error_allocations_Z",
    "update_concentration",
    "gibbs_sweep",
    "log_likelihood",
    "run_chain",
]

_WEIGHT_FLOOR = 1e-300  # clamp for W_N / p_J before the concentration update


@dataclass(frozen=True)
class McmcSettings:
    """Chain length controls: stored draws, burn-in sweeps, thinning, seed."""

    n_draws: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


_STREAMS = ("init", "alpha", "beta", "sticks_w", "alloc_l", "eta",
            "sigma2", "alloc_z", "sticks_p", "conc_m1", "conc_m2")


class ChainRngs:
    """Named per-update random substreams for one chain."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        for idx, name in enumerate(_STREAMS):
            gen = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(idx,)))
            setattr(self, name, gen)


def _draw_mvn_from_precision(prec_chol, h, rng, k):
    """Draw N(P^{-1} h, P^{-1}) given the lower Cholesky factor of P."""
    mean = cho_solve((prec_chol, True), h)
    z = rng.standard_normal(k)
    return mean + solve_triangular(prec_chol, z, trans="T", lower=True)


def update_locations_alpha(state: ChainState, data: Dataset,
                           hyper: Hyperparams, rng) -> ChainState:
    """Gaussian conjugate update of the cluster offsets alpha_l.

    Unused clusters are refreshed from the N_k(c0, Sigma0) prior.  A used
    cluster sees every residual Y_ir - beta_l(X_i) - eta_{Z_ir} of its
    allocated sites as a Gaussian observation of alpha_l with variance
    sigma2_{Z_ir}; completing the square gives precision
    Sigma0^{-1} + (sum 1/sigma2) I and the matching mean.
    """
    k = hyper.k
    Sigma0_chol = cholesky(hyper.Sigma0, lower=True)
    Sigma0_inv = cho_solve((Sigma0_chol, True), np.eye(k))
    h0 = Sigma0_inv @ hyper.c0
    for l in range(hyper.N):
        sites = np.flatnonzero(state.L == l)
        if sites.size == 0:
            state.alpha[l] = hyper.c0 + Sigma0_chol @ rng.standard_normal(k)
            continue
        tau = 0.0
        h = h0.copy()
        for i in sites:
            inv_s = 1.0 / state.sigma2[state.Z[i]]
            resid = data.ys[i] - state.beta[l, i] - state.eta[state.Z[i]]
            tau += inv_s.sum()
            h += inv_s @ resid
        prec_chol = cholesky(Sigma0_inv + tau * np.eye(k), lower=True)
        state.alpha[l] = _draw_mvn_from_precision(prec_chol, h, rng, k)
    return state


def update_gp_blocks_beta(state: ChainState, data: Dataset,
                          hyper: Hyperparams, rng,
                          kern: GPKernelMatrix | None = None) -> ChainState:
    """Update each cluster's GP block beta_l over the observed covariates.

    Unused clusters get a fresh draw of the whole curve from the GP prior.
    For a used cluster, beta_l at its allocated sites is drawn from the
    product of the GP conditional prior (given the unallocated sites) and
    the Gaussian likelihood of the allocated residuals; beta_l at the
    unallocated sites is then drawn from the GP conditional given the new
    allocated values.  Coordinates are handled independently (scalar kernel).
    """
    if kern is None:
        kern = gp_cov(data.xs, hyper.gamma, hyper.lambda_)
    k = hyper.k
    d = data.d
    prior_mean = np.outer(kern.xs, hyper.c1)
    for l in range(hyper.N):
        alloc = np.flatnonzero(state.L == l)
        if alloc.size == 0:
            state.beta[l] = gp_prior_draw(kern, hyper.c1, k, rng)
            continue
        other = np.flatnonzero(state.L != l)
        A, cov = gp_condition_on(kern, other, alloc)
        m_cond = prior_mean[alloc] + A @ (state.beta[l, other] - prior_mean[other])
        cov_chol = _chol_with_jitter(cov, kern.gamma)
        cov_inv = cho_solve((cov_chol, True), np.eye(alloc.size))
        # per-site likelihood summaries
        tau = np.zeros(alloc.size)
        bsum = np.zeros((alloc.size, k))
        for pos, i in enumerate(alloc):
            inv_s = 1.0 / state.sigma2[state.Z[i]]
            resid = data.ys[i] - state.alpha[l] - state.eta[state.Z[i]]
            tau[pos] = inv_s.sum()
            bsum[pos] = inv_s @ resid
        prec_chol = cholesky(cov_inv + np.diag(tau), lower=True)
        new_alloc = np.empty((alloc.size, k))
        for c in range(k):
            h = cov_inv @ m_cond[:, c] + bsum[:, c]
            new_alloc[:, c] = _draw_mvn_from_precision(prec_chol, h, rng,
                                                       alloc.size)
        state.beta[l, alloc] = new_alloc
        if other.size:
            A2, cov2 = gp_condition_on(kern, alloc, other)
            mean2 = prior_mean[other] + A2 @ (new_alloc - prior_mean[alloc])
            chol2 = _chol_with_jitter(cov2, kern.gamma)
            state.beta[l, other] = mean2 + chol2 @ rng.standard_normal((other.size, k))
    return state


def update_stick_weights(counts, M: float, rng):
    """Sample truncated stick weights from their generalized Dirichlet
    conditional via latent Betas V_l ~ Be(1 + U_l, M + sum_{r>l} U_r).

    ``counts`` are the m allocation counts; returns (V (m-1,), W (m,)).
    Shared by the W update (counts from L, concentration M1) and the p
    update (counts from Z, concentration M2).
    """
    counts = np.asarray(counts, dtype=float)
    m = counts.size
    tail = np.concatenate((np.cumsum(counts[::-1])[::-1][1:], [0.0]))
    v = np.empty(m - 1)
    for l in range(m - 1):
        v[l] = rng.beta(1.0 + counts[l], M + tail[l])
    return v, stick_break(v)


def _normalize_logprobs(logp: np.ndarray) -> np.ndarray:
    """Rows of probabilities from rows of log weights, max-subtracted.

    Invariant under adding a constant to a whole row.  Raises if a row fails
    to produce any positive mass (all -inf or non-finite input).
    """
    logp = np.atleast_2d(logp)
    mx = logp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise FloatingPointError("allocation log-weights degenerate: no "
                                 "component has positive probability")
    p = np.exp(logp - mx)
    tot = p.sum(axis=1, keepdims=True)
    if np.any(tot <= 0.0) or not np.all(np.isfinite(tot)):
        raise FloatingPointError("allocation probabilities underflowed")
    return p / tot


def _categorical_rows(probs: np.ndarray, rng) -> np.ndarray:
    """One index per row by inverse CDF; deterministic in rng order."""
    c = np.cumsum(probs, axis=1)
    unif = rng.random(probs.shape[0])
    idx = (unif[:, None] > c).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def update_allocations_L(state: ChainState, data: Dataset,
                         hyper: Hyperparams, rng) -> ChainState:
    """Draw each site's cluster allocation L_i from {1..N} with probability
    proportional to W_l times the site's full Gaussian likelihood under
    cluster l, computed in log space."""
    k = hyper.k
    with np.errstate(divide="ignore"):
        logW = np.log(state.W)
    logp = np.empty((data.d, hyper.N))
    for i in range(data.d):
        sig = state.sigma2[state.Z[i]]                      # (n_i,)
        centers = (state.alpha[:, None, :] + state.beta[:, i, None, :]
                   + state.eta[state.Z[i]][None, :, :])      # (N, n_i, k)
        sq = ((data.ys[i][None, :, :] - centers) ** 2).sum(axis=2)
        ll = -0.5 * sq / sig[None, :] - 0.5 * k * np.log(2.0 * np.pi * sig)[None, :]
        logp[i] = logW + ll.sum(axis=1)
    state.L[:] = _categorical_rows(_normalize_logprobs(logp), rng)
    return state


def _location_residuals(state: ChainState, data: Dataset) -> np.ndarray:
    """Stacked residuals Y_ir - alpha_{L_i} - beta_{L_i}(X_i), shape (n, k)."""
    parts = []
    for i in range(data.d):
        l = state.L[i]
        parts.append(data.ys[i] - state.alpha[l] - state.beta[l, i])
    return np.concatenate(parts, axis=0)


def _flat_Z(state: ChainState) -> np.ndarray:
    return np.concatenate(state.Z)


def update_error_means_eta(state: ChainState, data: Dataset,
                           hyper: Hyperparams, rng) -> ChainState:
    """Gaussian conjugate update of the error-component means eta_j.

    A used component has precision (1/s_eta2 + m_j/sigma2_j) per coordinate,
    with m_j its allocation count; unused components are refreshed from the
    N_k(c_eta, s_eta2 I) prior.
    """
    k = hyper.k
    resid = _location_residuals(state, data)
    zf = _flat_Z(state)
    s_eta = np.sqrt(hyper.s_eta2)
    for j in range(hyper.J):
        mask = zf == j
        mj = int(mask.sum())
        if mj == 0:
            state.eta[j] = hyper.c_eta + s_eta * rng.standard_normal(k)
            continue
        prec = 1.0 / hyper.s_eta2 + mj / state.sigma2[j]
        mean = (hyper.c_eta / hyper.s_eta2
                + resid[mask].sum(axis=0) / state.sigma2[j]) / prec
        state.eta[j] = mean + rng.standard_normal(k) / np.sqrt(prec)
    return state


def update_error_vars_sigma2(state: ChainState, data: Dataset,
                             hyper: Hyperparams, rng) -> ChainState:
    """Inverse-gamma conjugate update of the component variances:
    IG(a + k m_j / 2, b + sum ||residual||^2 / 2) for used components,
    the IG(a, b) prior otherwise."""
    k = hyper.k
    resid = _location_residuals(state, data)
    zf = _flat_Z(state)
    for j in range(hyper.J):
        mask = zf == j
        mj = int(mask.sum())
        if mj == 0:
            shape, rate = hyper.a, hyper.b
        else:
            shape = hyper.a + 0.5 * k * mj
            rate = hyper.b + 0.5 * ((resid[mask] - state.eta[j]) ** 2).sum()
        state.sigma2[j] = rate / rng.gamma(shape)
    return state


def update_error_allocations_Z(state: ChainState, data: Dataset,
                               hyper: Hyperparams, rng) -> ChainState:
    """Draw each observation's error component from {1..J} with probability
    proportional to p_j times that observation's normal density (the
    normalizing constant matters here since sigma2 varies with j)."""
    k = hyper.k
    resid = _location_residuals(state, data)
    with np.errstate(divide="ignore"):
        logp_w = np.log(state.p)
    sq = ((resid[:, None, :] - state.eta[None, :, :]) ** 2).sum(axis=2)
    logp = (logp_w[None, :] - 0.5 * sq / state.sigma2[None, :]
            - 0.5 * k * np.log(2.0 * np.pi * state.sigma2)[None, :])
    zf = _categorical_rows(_normalize_logprobs(logp), rng)
    offsets = np.concatenate(([0], np.cumsum(data.counts)))
    state.Z = tuple(zf[offsets[i]:offsets[i + 1]].copy() for i in range(data.d))
    return state


def update_concentration(a0: float, b0: float, last_weight: float,
                         m: int, rng) -> float:
    """Concentration draw Ga(a0 + m, b0 - log(last_weight)); used for both
    M1 (m = N, last stick weight W_N) and M2 (m = J, last weight p_J)."""
    if last_weight <= 0.0:
        raise ValueError("last stick weight must be positive")
    shape = a0 + m
    rate = b0 - np.log(last_weight)
    return float(rng.gamma(shape) / rate)


def gibbs_sweep(state: ChainState, data: Dataset, hyper: Hyperparams,
                rngs: ChainRngs, kern: GPKernelMatrix | None = None) -> ChainState:
    """One full sweep over all blocks, in the fixed update order."""
    update_locations_alpha(state, data, hyper, rngs.alpha)
    update_gp_blocks_beta(state, data, hyper, rngs.beta, kern=kern)
    countsL = np.bincount(state.L, minlength=hyper.N)
    state.V, state.W = update_stick_weights(countsL, state.M1, rngs.sticks_w)
    update_allocations_L(state, data, hyper, rngs.alloc_l)
    update_error_means_eta(state, data, hyper, rngs.eta)
    update_error_vars_sigma2(state, data, hyper, rngs.sigma2)
    update_error_allocations_Z(state, data, hyper, rngs.alloc_z)
    countsZ = np.bincount(_flat_Z(state), minlength=hyper.J)
    state.q, state.p = update_stick_weights(countsZ, state.M2, rngs.sticks_p)
    state.M1 = update_concentration(hyper.a_M1, hyper.b_M1,
                                    max(state.W[-1], _WEIGHT_FLOOR),
                                    hyper.N, rngs.conc_m1)
    state.M2 = update_concentration(hyper.a_M2, hyper.b_M2,
                                    max(state.p[-1], _WEIGHT_FLOOR),
                                    hyper.J, rngs.conc_m2)
    if __debug__:
        state.validate(data)
    return state


def log_likelihood(state: ChainState, data: Dataset, hyper: Hyperparams) -> float:
    """Data log likelihood given the state's locations and allocations,
    with the error component marginalized over p (diagnostic trace)."""
    k = hyper.k
    resid = _location_residuals(state, data)
    with np.errstate(divide="ignore"):
        logp_w = np.log(state.p)
    sq = ((resid[:, None, :] - state.eta[None, :, :]) ** 2).sum(axis=2)
    logp = (logp_w[None, :] - 0.5 * sq / state.sigma2[None, :]
            - 0.5 * k * np.log(2.0 * np.pi * state.sigma2)[None, :])
    mx = logp.max(axis=1)
    return float((mx + np.log(np.exp(logp - mx[:, None]).sum(axis=1))).sum())


def init_state(data: Dataset, hyper: Hyperparams, rng) -> ChainState:
    """Deterministic-given-seed, overdispersed initial configuration.

    Allocations are spread round-robin, alpha/eta/beta come from their
    priors, sticks start at 1/2 and the concentrations at their prior means.
    """
    N, J, k = hyper.N, hyper.J, hyper.k
    kern = gp_cov(data.xs, hyper.gamma, hyper.lambda_)
    Sigma0_chol = cholesky(hyper.Sigma0, lower=True)
    alpha = hyper.c0 + rng.standard_normal((N, k)) @ Sigma0_chol.T
    beta = np.stack([gp_prior_draw(kern, hyper.c1, k, rng) for _ in range(N)])
    eta = hyper.c_eta + np.sqrt(hyper.s_eta2) * rng.standard_normal((J, k))
    sigma2 = np.ones(J)
    V = np.full(N - 1, 0.5)
    q = np.full(J - 1, 0.5)
    L = np.arange(data.d) % N
    flat_idx = np.arange(data.n)
    offsets = np.concatenate(([0], np.cumsum(data.counts)))
    Z = tuple((flat_idx[offsets[i]:offsets[i + 1]] % J) for i in range(data.d))
    return ChainState(alpha=alpha, beta=beta, V=V, W=stick_break(V),
                      q=q, p=stick_break(q), eta=eta, sigma2=sigma2,
                      L=L, Z=Z, M1=hyper.a_M1 / hyper.b_M1,
                      M2=hyper.a_M2 / hyper.b_M2)


def run_chain(data: Dataset, hyper: Hyperparams,
              mcmc: McmcSettings) -> PosteriorDraws:
    """Run burn_in + n_draws * thin sweeps and store every thin-th
    post-burn-in state (alpha, beta, W, L, p, eta, sigma2, M1, M2), with a
    per-draw log-likelihood trace."""
    rngs = ChainRngs(mcmc.seed)
    kern = gp_cov(data.xs, hyper.gamma, hyper.lambda_)
    state = init_state(data, hyper, rngs.init)
    for _ in range(mcmc.burn_in):
        gibbs_sweep(state, data, hyper, rngs, kern=kern)
    B = mcmc.n_draws
    alpha = np.empty((B, hyper.N, hyper.k))
    beta = np.empty((B, hyper.N, data.d, hyper.k))
    W = np.empty((B, hyper.N))
    L = np.empty((B, data.d), dtype=int)
    p = np.empty((B, hyper.J))
    eta = np.empty((B, hyper.J, hyper.k))
    sigma2 = np.empty((B, hyper.J))
    M1 = np.empty(B)
    M2 = np.empty(B)
    loglik = np.empty(B)
    for b in range(B):
        for _ in range(mcmc.thin):
            gibbs_sweep(state, data, hyper, rngs, kern=kern)
        alpha[b] = state.alpha
        beta[b] = state.beta
        W[b] = state.W
        L[b] = state.L
        p[b] = state.p
        eta[b] = state.eta
        sigma2[b] = state.sigma2
        M1[b] = state.M1
        M2[b] = state.M2
        loglik[b] = log_likelihood(state, data, hyper)
    return PosteriorDraws(alpha=alpha, beta=beta, W=W, L=L, p=p, eta=eta,
                          sigma2=sigma2, M1=M1, M2=M2, loglik=loglik,
                          data=data, hyper=hyper)
