"""Model types and Gaussian-process covariance machinery.

The hierarchy fitted by this package models replicated k-variate responses
observed at d distinct covariate values.  Cluster locations are
xi_l(x) = alpha_l + beta_l(x) with alpha_l ~ N_k(c0, Sigma0) and each
coordinate of beta_l an independent Gaussian process with linear mean
c1[c] * x and exponential covariance gamma * exp(-lambda |x - x'|).  Errors
follow a truncated stick-breaking mixture of spherical normals.  Because the
GP kernel is a scalar kernel times the identity, the coordinates of beta_l
are a-priori independent GPs sharing (gamma, lambda); everything here works
with d x d matrices per coordinate rather than kd x kd ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky

__all__ = [
    "Hyperparams",
    "Dataset",
    "ChainState",
    "GPKernelMatrix",
    "default_hyperparams",
    "stick_break",
    "gp_cov",
    "gp_conditional",
    "gp_prior_draw",
    "gp_condition_on",
]


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """Fixed prior constants and truncation levels.

    N and J are the truncation levels of the location and error sticks;
    (c0, Sigma0) parametrize the cluster-offset prior, (c1, gamma, lambda_)
    the GP location prior, (c_eta, s_eta2) the error-mean prior, (a, b) the
    inverse-gamma error-variance prior and (a_M1, b_M1, a_M2, b_M2) the
    Gamma hyperpriors on the two concentrations.
    """

    k: int
    N: int
    J: int
    c0: np.ndarray
    Sigma0: np.ndarray
    c1: np.ndarray
    gamma: float
    lambda_: float
    c_eta: np.ndarray
    s_eta2: float
    a: float
    b: float
    a_M1: float
    b_M1: float
    a_M2: float
    b_M2: float

    def __post_init__(self):
        object.__setattr__(self, "c0", np.asarray(self.c0, dtype=float))
        object.__setattr__(self, "c1", np.asarray(self.c1, dtype=float))
        object.__setattr__(self, "c_eta", np.asarray(self.c_eta, dtype=float))
        object.__setattr__(self, "Sigma0", np.asarray(self.Sigma0, dtype=float))
        if self.N < 2 or self.J < 2:
            raise ValueError("truncation levels N and J must be >= 2")
        if self.c0.shape != (self.k,) or self.c1.shape != (self.k,) \
                or self.c_eta.shape != (self.k,):
            raise ValueError("c0, c1, c_eta must be k-vectors")
        if self.Sigma0.shape != (self.k, self.k):
            raise ValueError("Sigma0 must be k x k")
        if not np.allclose(self.Sigma0, self.Sigma0.T):
            raise ValueError("Sigma0 must be symmetric")
        try:
            np.linalg.cholesky(self.Sigma0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Sigma0 must be positive definite") from exc
        for name in ("gamma", "lambda_", "s_eta2", "a", "b",
                     "a_M1", "b_M1", "a_M2", "b_M2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json_dict(self) -> dict:
        """JSON-ready dict; the decay rate is keyed 'lambda' on the wire."""
        return {
            "k": self.k, "N": self.N, "J": self.J,
            "c0": self.c0.tolist(), "Sigma0": self.Sigma0.tolist(),
            "c1": self.c1.tolist(), "gamma": self.gamma,
            "lambda": self.lambda_,
            "c_eta": self.c_eta.tolist(), "s_eta2": self.s_eta2,
            "a": self.a, "b": self.b,
            "a_M1": self.a_M1, "b_M1": self.b_M1,
            "a_M2": self.a_M2, "b_M2": self.b_M2,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Hyperparams":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "Hyperparams":
        return cls.from_json_dict(json.loads(s))


def default_hyperparams(k: int = 2, *, c0=None, c1=None) -> Hyperparams:
    """Standard prior block used by the CLI and the benchmark harness.

    N = J = 20, c0 = (1, ..., 1), c1 = (2, 1/2, ...), Sigma0 = 10 I,
    gamma = 10, lambda = 1/2, eta ~ N(0, 10 I), sigma^2 ~ IG(1, 1) and
    Ga(1, 1) hyperpriors on both concentrations.
    """
    if c0 is None:
        c0 = np.ones(k)
    if c1 is None:
        c1 = np.array([2.0, 0.5] + [0.0] * (k - 2))[:k]
    return Hyperparams(
        k=k, N=20, J=20,
        c0=np.asarray(c0, dtype=float),
        Sigma0=10.0 * np.eye(k),
        c1=np.asarray(c1, dtype=float),
        gamma=10.0, lambda_=0.5,
        c_eta=np.zeros(k), s_eta2=10.0,
        a=1.0, b=1.0,
        a_M1=1.0, b_M1=1.0, a_M2=1.0, b_M2=1.0,
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Replicated responses at d distinct, strictly increasing covariates.

    ys[i] is an (n_i, k) array of responses observed at xs[i].
    """

    xs: np.ndarray
    counts: np.ndarray
    ys: tuple

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        counts = np.asarray(self.counts, dtype=int)
        ys = tuple(np.atleast_2d(np.asarray(y, dtype=float)) for y in self.ys)
        if xs.ndim != 1 or xs.size < 1:
            raise ValueError("xs must be a nonempty 1-d array")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("covariate values must be strictly increasing")
        if counts.shape != xs.shape or np.any(counts < 1):
            raise ValueError("counts must match xs with every n_i >= 1")
        if len(ys) != xs.size:
            raise ValueError("ys must have one block per covariate value")
        k = ys[0].shape[1]
        for i, y in enumerate(ys):
            if y.shape != (counts[i], k):
                raise ValueError(f"ys[{i}] must have shape (n_{i}, k)")
        if not np.all(np.isfinite(xs)) or any(not np.all(np.isfinite(y)) for y in ys):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "ys", ys)

    @property
    def d(self) -> int:
        return self.xs.size

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.ys[0].shape[1]

    @classmethod
    def from_pairs(cls, x, y) -> "Dataset":
        """Build from flat (x_i, y_i) observation pairs, grouping ties."""
        x = np.asarray(x, dtype=float)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[0] != x.shape[0]:
            raise ValueError("x and y must have matching lengths")
        order = np.argsort(x, kind="stable")
        x, y = x[order], y[order]
        uxs, start = np.unique(x, return_index=True)
        blocks = np.split(y, start[1:])
        counts = np.array([b.shape[0] for b in blocks])
        return cls(xs=uxs, counts=counts, ys=tuple(blocks))

    def to_pairs(self):
        """Flatten back to (x (n,), y (n, k)) in site order."""
        x = np.repeat(self.xs, self.counts)
        y = np.concatenate(self.ys, axis=0)
        return x, y


@dataclass(eq=False)
class ChainState:
    """One full configuration of the sampler's latent variables.

    V and q hold the N-1 / J-1 free stick fractions; W and p are the implied
    weight vectors with the truncation closure in the last slot.  L and Z are
    0-based cluster and error-component allocations.
    """

    alpha: np.ndarray   # (N, k)
    beta: np.ndarray    # (N, d, k)
    V: np.ndarray       # (N-1,)
    W: np.ndarray       # (N,)
    q: np.ndarray       # (J-1,)
    p: np.ndarray       # (J,)
    eta: np.ndarray     # (J, k)
    sigma2: np.ndarray  # (J,)
    L: np.ndarray       # (d,) ints in [0, N)
    Z: tuple            # per site, (n_i,) ints in [0, J)
    M1: float
    M2: float

    def validate(self, data: Dataset | None = None):
        N, k = self.alpha.shape
        J = self.eta.shape[0]
        for name, vec in (("W", self.W), ("p", self.p)):
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} is not a probability vector")
        if not np.allclose(self.W, stick_break(self.V), atol=1e-12):
            raise ValueError("W does not match stick_break(V)")
        if not np.allclose(self.p, stick_break(self.q), atol=1e-12):
            raise ValueError("p does not match stick_break(q)")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 entries must be strictly positive")
        if np.any((self.L < 0) | (self.L >= N)):
            raise ValueError("L entries out of range")
        for z in self.Z:
            if np.any((z < 0) | (z >= J)):
                raise ValueError("Z entries out of range")
        if self.M1 <= 0 or self.M2 <= 0:
            raise ValueError("concentrations must be positive")
        if data is not None:
            if self.beta.shape != (N, data.d, k):
                raise ValueError("beta shape mismatch")
            if self.L.shape != (data.d,):
                raise ValueError("L shape mismatch")
            for i, z in enumerate(self.Z):
                if z.shape != (data.counts[i],):
                    raise ValueError("Z shape mismatch")


def stick_break(v) -> np.ndarray:
    """Weights from stick fractions: given the m-1 fractions v, returns the
    m weights W_1 = v_1, W_l = v_l prod_{r<l} (1 - v_r), W_m = 1 - sum."""
    v = np.asarray(v, dtype=float)
    if np.any((v < 0) | (v > 1)):
        raise ValueError("stick fractions must lie in [0, 1]")
    m = v.size + 1
    w = np.empty(m)
    if m > 1:
        w[:-1] = v * np.concatenate(([1.0], np.cumprod(1.0 - v[:-1])))
    tail = 1.0 - w[:-1].sum()
    if tail < -1e-12:
        raise ValueError("stick fractions produce negative closure weight")
    w[-1] = max(tail, 0.0)
    return w


@dataclass(frozen=True, eq=False)
class GPKernelMatrix:
    """Exponential-kernel Gram matrix over the observed covariates, with its
    Cholesky factor; shareable read-only."""

    xs: np.ndarray
    gamma: float
    lam: float
    K: np.ndarray
    chol: np.ndarray  # lower triangular


def _chol_with_jitter(M: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky factor, retrying with escalating diagonal jitter.

    Exponential-kernel matrices are near-singular when covariate values are
    close; jitter starts at 1e-8 * scale and doubles at most 3 times.
    """
    jitters = [0.0, 1e-8 * scale, 2e-8 * scale, 4e-8 * scale, 8e-8 * scale]
    last_exc = None
    for jit in jitters:
        try:
            return cholesky(M + jit * np.eye(M.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            last_exc = exc
    raise np.linalg.LinAlgError(
        "Cholesky failed after jitter escalation") from last_exc


def gp_cov(xs, gamma: float, lam: float) -> GPKernelMatrix:
    """Gram matrix K[i, j] = gamma * exp(-lam |x_i - x_j|) and its factor."""
    if gamma <= 0 or lam <= 0:
        raise ValueError("gamma and lambda must be positive")
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    K = gamma * np.exp(-lam * np.abs(xs[:, None] - xs[None, :]))
    K = 0.5 * (K + K.T)  # exact symmetry
    assert np.array_equal(K, K.T)
    chol = _chol_with_jitter(K, gamma)
    return GPKernelMatrix(xs=xs, gamma=gamma, lam=lam, K=K, chol=chol)


def _clamp_variance(var: float, gamma: float) -> float:
    if var < -1e-8:
        raise ValueError(f"conditional variance {var} below tolerance")
    return float(min(max(var, 0.0), gamma))


def gp_conditional(kern: GPKernelMatrix, observed, c1, x_new: float):
    """Gaussian conditioning of the GP at a new covariate value.

    ``observed`` is the (d, k) matrix of function values at kern.xs.  Returns
    (mean k-vector, scalar variance); the variance is shared by all
    coordinates because the kernel is scalar times identity.
    """
    if not np.isfinite(x_new):
        raise ValueError("x_new must be finite")
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    c1 = np.asarray(c1, dtype=float)
    kvec = kern.gamma * np.exp(-kern.lam * np.abs(x_new - kern.xs))
    w = cho_solve((kern.chol, True), kvec)
    var = _clamp_variance(kern.gamma - float(kvec @ w), kern.gamma)
    prior = np.outer(kern.xs, c1)
    mean = c1 * x_new + (observed - prior).T @ w
    return mean, var


def gp_prior_draw(kern: GPKernelMatrix, c1, k: int, rng) -> np.ndarray:
    """Draw a (d, k) matrix of GP values at kern.xs, coordinates independent."""
    c1 = np.asarray(c1, dtype=float)
    z = rng.standard_normal((kern.xs.size, k))
    return np.outer(kern.xs, c1) + kern.chol @ z


def gp_condition_on(kern: GPKernelMatrix, given_idx, target_idx):
    """Conditioning pieces of the GP restricted to index subsets.

    Returns (A, cov) such that, per coordinate,

        mean_target = prior_target + A @ (given_values - prior_given)

    and ``cov`` is the conditional covariance of the target block.  With an
    empty ``given_idx`` this degenerates to (empty A, prior covariance).
    """
    given_idx = np.asarray(given_idx, dtype=int)
    target_idx = np.asarray(target_idx, dtype=int)
    K = kern.K
    if given_idx.size == 0:
        A = np.zeros((target_idx.size, 0))
        cov = K[np.ix_(target_idx, target_idx)].copy()
        return A, cov
    Kgg = K[np.ix_(given_idx, given_idx)]
    Ktg = K[np.ix_(target_idx, given_idx)]
    cg = _chol_with_jitter(Kgg, kern.gamma)
    A = cho_solve((cg, True), Ktg.T).T
    cov = K[np.ix_(target_idx, target_idx)] - A @ Ktg.T
    cov = 0.5 * (cov + cov.T)
    return A, cov
