"""Per-facet Mixture-of-Gaussians priors.

A :class:`FacetPrior` owns the optimizable arrays of one facet's mixture:
unconstrained mixing-weight logits, component means, and either per-component
log-variances (diag mode) or unconstrained Cholesky factors (full mode, made
valid through softplus-plus-floor on the diagonal).  Numpy methods serve
evaluation, EM, and sampling; ``tape_view`` exposes the same densities as
differentiable tape graphs for training.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad
from .distributions import (
    LOG_2PI,
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    DiagGaussianParams,
    FullGaussianParams,
)

CHOL_DIAG_FLOOR = 1e-4


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _inv_softplus(y):
    # inverse of softplus for y > 0
    return y + np.log1p(-np.exp(-y))


def _chol_from_raw_np(raw):
    d = _softplus(np.diagonal(raw)) + CHOL_DIAG_FLOOR
    return np.tril(raw, k=-1) + np.diag(d)


def _raw_from_chol_np(L):
    d = np.diagonal(L) - CHOL_DIAG_FLOOR
    if np.any(d <= 0.0):
        raise ValueError(f"Cholesky diagonal must exceed the {CHOL_DIAG_FLOOR} floor")
    return np.tril(L, k=-1) + np.diag(_inv_softplus(d))


class FacetPrior:
    """One facet's MoG: K components of dimension D, diag or full covariance."""

    def __init__(self, K, D, mode="diag", pi_trainable=True, rng=None):
        if K < 1 or D < 1:
            raise ValueError("K and D must be >= 1")
        if mode not in ("diag", "full"):
            raise ValueError(f"unknown covariance mode {mode!r}")
        self.K = K
        self.D = D
        self.mode = mode
        self.pi_trainable = pi_trainable

        rng = rng or np.random.default_rng(0)
        self.pi_logits = np.zeros(K)
        self._log_pi_fixed = np.full(K, -np.log(K))
        self.means = rng.normal(size=(K, D))
        if mode == "diag":
            self.log_vars = np.zeros((K, D))
            self.chol_raw = None
        else:
            self.log_vars = None
            self.chol_raw = np.tile(_raw_from_chol_np(np.eye(D)), (K, 1, 1))

    # -- constructors ---------------------------------------------------------

    @classmethod
    def from_components(cls, pi, means, covs, mode="diag", pi_trainable=True):
        """Build from explicit weights, means, and variances (diag: (K, D)
        variance rows; full: (K, D, D) covariance matrices)."""
        pi = np.asarray(pi, dtype=np.float64)
        means = np.asarray(means, dtype=np.float64)
        covs = np.asarray(covs, dtype=np.float64)
        K, D = means.shape
        prior = cls(K, D, mode=mode, pi_trainable=pi_trainable)
        prior.means = means.copy()
        prior.pi_logits = np.log(pi)
        prior._log_pi_fixed = np.log(pi) - np_logsumexp(np.log(pi))
        if mode == "diag":
            prior.log_vars = np.log(covs)
        else:
            prior.chol_raw = np.stack([_raw_from_chol_np(np.linalg.cholesky(c))
                                       for c in covs])
        return prior

    # -- derived parameters -----------------------------------------------------

    @property
    def log_pi(self):
        if self.pi_trainable:
            return self.pi_logits - np_logsumexp(self.pi_logits)
        return self._log_pi_fixed

    def chol_factors(self):
        return np.stack([_chol_from_raw_np(r) for r in self.chol_raw])

    def component(self, k):
        if self.mode == "diag":
            return DiagGaussianParams(self.means[k], self.log_vars[k])
        return FullGaussianParams(self.means[k], _chol_from_raw_np(self.chol_raw[k]))

    def set_isotropic_covariance(self, variance):
        """Overwrite every component's covariance with variance * I."""
        if self.mode == "diag":
            self.log_vars[:] = np.log(variance)
        else:
            raw = _raw_from_chol_np(np.sqrt(variance) * np.eye(self.D))
            self.chol_raw[:] = raw

    def set_uniform_pi(self):
        self.pi_logits[:] = 0.0
        self._log_pi_fixed[:] = -np.log(self.K)

    def parameters(self):
        """Optimizable arrays, keyed for the trainer/checkpoint registry."""
        out = {"means": self.means}
        if self.mode == "diag":
            out["log_vars"] = self.log_vars
        else:
            out["chol_raw"] = self.chol_raw
        if self.pi_trainable:
            out["pi_logits"] = self.pi_logits
        return out

    # -- numpy densities ----------------------------------------------------------

    def log_component_densities(self, z):
        """(B, K) log N(z_b; mu_k, Sigma_k) for z of shape (B, D) or (D,)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.D:
            raise ValueError(f"z dimension {z.shape[1]} != prior dimension {self.D}")
        if self.mode == "diag":
            lv = np.clip(self.log_vars, LOG_VAR_MIN, LOG_VAR_MAX)
            diff = z[:, None, :] - self.means[None, :, :]
            quad = diff * diff / np.exp(lv)[None]
            return -0.5 * (quad + lv[None]).sum(axis=-1) - 0.5 * LOG_2PI * self.D
        cols = []
        for k in range(self.K):
            L = _chol_from_raw_np(self.chol_raw[k])
            y = solve_triangular(L, (z - self.means[k]).T, lower=True).T
            cols.append(-0.5 * self.D * LOG_2PI
                        - np.sum(np.log(np.diagonal(L)))
                        - 0.5 * (y * y).sum(axis=-1))
        return np.stack(cols, axis=-1)

    def tape_view(self, tape, tensors=None):
        if tensors is None:
            tensors = {k: tape.parameter(v) for k, v in self.parameters().items()}
        return _FacetPriorView(self, tape, tensors)

    def sample(self, temperature, rng, fixed_c=None):
        return sample(self, temperature, rng, fixed_c)


class _FacetPriorView:
    """Differentiable densities of a FacetPrior on a tape."""

    def __init__(self, prior, tape, tensors):
        self.prior = prior
        self.tape = tape
        self.tensors = tensors

    def log_pi_t(self):
        if self.prior.pi_trainable:
            return ad.log_softmax(self.tensors["pi_logits"], axis=-1)
        return self.tape.constant(self.prior._log_pi_fixed)

    def log_component_densities_t(self, z_t):
        """(B, D) tensor -> (B, K) tensor of per-component log-densities."""
        B = z_t.shape[0]
        K, D = self.prior.K, self.prior.D
        means_t = self.tensors["means"]
        zb = ad.broadcast(ad.reshape(z_t, (B, 1, D)), (B, K, D))
        diff = zb - means_t
        if self.prior.mode == "diag":
            lv = ad.clamp(self.tensors["log_vars"], LOG_VAR_MIN, LOG_VAR_MAX)
            quad = diff * diff / ad.exp(lv)
            inner = ad.sum_(quad + lv, axis=-1)          # (B, K)
            return inner * (-0.5) - 0.5 * LOG_2PI * D
        eye = self.tape.constant(np.eye(D))
        cols = []
        for k in range(K):
            raw_k = ad.reshape(ad.slice_(ad.reshape(self.tensors["chol_raw"], (K, D * D)),
                                         k, k + 1, axis=0), (D, D))
            L = ad.chol_from_raw(raw_k, diag_floor=CHOL_DIAG_FLOOR)
            diff_k = ad.reshape(ad.slice_(diff, k, k + 1, axis=1), (B, D))
            y = ad.trisolve_lower(L, diff_k)
            log_det = ad.sum_(ad.log(ad.sum_(L * eye, axis=-1)))
            col = (ad.sum_(y * y, axis=-1) * (-0.5) - log_det - 0.5 * D * LOG_2PI)
            cols.append(ad.reshape(col, (B, 1)))
        return ad.concat(cols, axis=-1)

    def log_weighted_densities_t(self, z_t):
        """log pi_k + log N(z; mu_k, Sigma_k) as a (B, K) tensor."""
        return self.log_component_densities_t(z_t) + self.log_pi_t()

    def log_responsibilities_t(self, z_t):
        lw = self.log_weighted_densities_t(z_t)
        B, K = lw.shape
        norm = ad.broadcast(ad.reshape(ad.logsumexp(lw, axis=-1), (B, 1)), (B, K))
        return lw - norm

    def log_marginal_t(self, z_t):
        return ad.logsumexp(self.log_weighted_densities_t(z_t), axis=-1)


class MultiFacetPrior:
    """J mutually independent facet priors."""

    def __init__(self, facets):
        if len(facets) < 1:
            raise ValueError("need at least one facet")
        self.facets = list(facets)

    @property
    def J(self):
        return len(self.facets)

    def parameters(self):
        out = {}
        for j, facet in enumerate(self.facets):
            for key, arr in facet.parameters().items():
                out[f"prior.{j}.{key}"] = arr
        return out


# -- spec-surface operations ------------------------------------------------------

def log_responsibilities(prior: FacetPrior, z):
    """log p(c | z): Bayesian posterior over components, logsumexp-normalized."""
    lw = prior.log_component_densities(z)[0] + prior.log_pi
    return lw - np_logsumexp(lw)


def log_marginal(prior: FacetPrior, z) -> float:
    """log p(z) = logsumexp_c [log pi_c + log N(z; mu_c, Sigma_c)]."""
    lw = prior.log_component_densities(z)[0] + prior.log_pi
    return float(np_logsumexp(lw))


def joint_log_marginal(multi: MultiFacetPrior, z_all) -> float:
    """Sum of per-facet marginals (facets are independent)."""
    if len(z_all) != multi.J:
        raise ValueError(f"got {len(z_all)} z vectors for {multi.J} facets")
    return float(sum(log_marginal(f, z) for f, z in zip(multi.facets, z_all)))


def sample(prior: FacetPrior, temperature, rng, fixed_c=None):
    """Draw (c, z) with component covariance scaled by the temperature."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if fixed_c is None:
        c = int(rng.choice(prior.K, p=np.exp(prior.log_pi)))
    else:
        if not 0 <= fixed_c < prior.K:
            raise ValueError(f"fixed_c {fixed_c} out of range [0, {prior.K})")
        c = int(fixed_c)
    eps = rng.standard_normal(prior.D)
    if prior.mode == "diag":
        std = np.exp(0.5 * prior.log_vars[c])
        z = prior.means[c] + np.sqrt(temperature) * std * eps
    else:
        L = _chol_from_raw_np(prior.chol_raw[c])
        z = prior.means[c] + np.sqrt(temperature) * (L @ eps)
    return c, z


# -- EM fitting ---------------------------------------------------------------------

def _kmeanspp_seed(points, K, rng):
    N = points.shape[0]
    centers = [points[rng.integers(N)]]
    for _ in range(1, K):
        d2 = np.min([np.sum((points - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            centers.append(points[rng.integers(N)])
            continue
        centers.append(points[rng.choice(N, p=d2 / total)])
    return np.stack(centers)


def em_fit(points, K, iters=100, rng=None, tol=1e-7, return_history=False):
    """Fit a diagonal-covariance MoG by EM with k-means++-style seeding.

    Runs up to ``iters`` iterations, stopping early once the mean
    log-likelihood improves by less than ``tol``.  Components that lose all
    responsibility are reseeded at the worst-explained data point.
    """
    points = np.asarray(points, dtype=np.float64)
    N, D = points.shape
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng or np.random.default_rng(0)

    var_floor = 1e-6
    means = _kmeanspp_seed(points, K, rng)
    variances = np.tile(points.var(axis=0) + var_floor, (K, 1))
    log_pi = np.full(K, -np.log(K))

    history = []
    prev_ll = -np.inf
    for _ in range(iters):
        lv = np.log(variances)
        diff = points[:, None, :] - means[None]
        log_comp = -0.5 * ((diff * diff / variances[None] + lv[None]).sum(axis=-1)
                           + D * LOG_2PI)
        lw = log_comp + log_pi
        norm = np_logsumexp(lw, axis=-1)
        ll = float(norm.mean())
        history.append(ll)

        resp = np.exp(lw - norm[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if np.any(empty):
            worst = int(np.argmin(norm))
            for k in np.flatnonzero(empty):
                means[k] = points[worst]
                variances[k] = points.var(axis=0) + var_floor
                nk[k] = 1.0
                resp[worst, k] = 1.0
        log_pi = np.log(nk / nk.sum())
        means = (resp.T @ points) / nk[:, None]
        sq = (resp.T @ (points * points)) / nk[:, None]
        variances = np.maximum(sq - means ** 2, var_floor)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    prior = FacetPrior.from_components(np.exp(log_pi), means, variances,
                                       mode="diag", pi_trainable=True)
    if return_history:
        return prior, history
    return prior
