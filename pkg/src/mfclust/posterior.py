"""Analytic optimal categorical posteriors over mixture components.

Given Monte Carlo samples of the continuous latents, the ELBO-optimal
categorical posterior has a closed form: exponentiate the sample-averaged
log-responsibilities and normalize.  The normalizer also yields the minimal
attainable value of the categorical KL term.  A quadrature-based gap
evaluator shows that averaging responsibilities directly (instead of their
logs) is not optimal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from .distributions import DiagGaussianParams
from .mog import FacetPrior, MultiFacetPrior, log_responsibilities

# Test hook: added to the first component's log-probability of every optimal
# posterior.  Nonzero values break optimality on purpose (used to prove the
# verification suite is mutation-sensitive).  Leave at 0.0.
_DEBUG_LOG_PROB_OFFSET = 0.0


@dataclass
class CategoricalPosterior:
    """Normalized log-probabilities plus the log-normalizer of the optimum."""

    log_probs: np.ndarray
    log_Z: float

    @property
    def probs(self):
        return np.exp(self.log_probs)


@dataclass
class JointCategorical:
    """Joint categorical over all cluster tuples, shaped (K_1, ..., K_J)."""

    log_probs: np.ndarray
    log_Z: float

    def marginal(self, j):
        axes = tuple(a for a in range(self.log_probs.ndim) if a != j)
        return np_logsumexp(self.log_probs, axis=axes)


def _as_sample_block(z_samples, D):
    z = np.asarray(z_samples, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != D:
        raise ValueError(f"z_samples shape {z.shape} invalid for dimension {D}")
    return z


def optimal_q_single(prior: FacetPrior, z_samples) -> CategoricalPosterior:
    """Optimal q(c|x) from L samples of q(z|x).

    log q*(c) = (1/L) sum_l log p(c | z^(l)) - log Z.  For L=1 the average
    is already normalized, so renormalizing would only inject rounding
    noise; the single-sample result equals log_responsibilities bitwise.
    """
    z = _as_sample_block(z_samples, prior.D)
    rows = np.stack([log_responsibilities(prior, z_l) for z_l in z])
    avg = rows.mean(axis=0)
    log_z = float(np_logsumexp(avg))
    log_probs = avg if z.shape[0] == 1 else avg - log_z
    if _DEBUG_LOG_PROB_OFFSET != 0.0:
        log_probs = log_probs.copy()
        log_probs[0] += _DEBUG_LOG_PROB_OFFSET
    return CategoricalPosterior(log_probs, log_z)


def optimal_q_multi(priors: MultiFacetPrior, z_samples_per_facet):
    """Per-facet optimal posteriors; the joint optimum is their product and
    attains KL value -sum_j log Z_j."""
    if len(z_samples_per_facet) != priors.J:
        raise ValueError(
            f"got {len(z_samples_per_facet)} sample blocks for {priors.J} facets")
    return [optimal_q_single(f, z) for f, z in zip(priors.facets, z_samples_per_facet)]


def min_joint_kl(posteriors) -> float:
    """Minimal attainable expected KL over the categorical posterior."""
    return -float(sum(p.log_Z for p in posteriors))


GENERAL_SPACE_GUARD = 10 ** 6


def optimal_q_general(priors: MultiFacetPrior, z_samples_per_facet) -> JointCategorical:
    """Optimal joint categorical by explicit enumeration of cluster tuples.

    Sample block l across the facets constitutes the l-th joint sample.
    Enumerates the full product space, so it is guarded to 10^6 tuples.
    """
    if len(z_samples_per_facet) != priors.J:
        raise ValueError(
            f"got {len(z_samples_per_facet)} sample blocks for {priors.J} facets")
    shape = tuple(f.K for f in priors.facets)
    if int(np.prod(shape)) > GENERAL_SPACE_GUARD:
        raise ValueError(f"joint space {shape} exceeds the {GENERAL_SPACE_GUARD} guard")

    blocks = [_as_sample_block(z, f.D) for f, z in zip(priors.facets, z_samples_per_facet)]
    L = blocks[0].shape[0]
    if any(b.shape[0] != L for b in blocks):
        raise ValueError("all facets must provide the same number of joint samples")

    score = np.zeros(shape)
    for l in range(L):
        for j, (facet, block) in enumerate(zip(priors.facets, blocks)):
            row = log_responsibilities(facet, block[l])
            expand = [1] * priors.J
            expand[j] = facet.K
            score = score + row.reshape(expand)
    score /= L
    log_z = float(np_logsumexp(score.ravel()))
    return JointCategorical(score - log_z, log_z)


def misapprehension_gap(prior: FacetPrior, q_z: DiagGaussianParams, n_quad=128):
    """Expected categorical KL for two choices of q(c|x), by quadrature.

    Returns (gap_vade_paper, gap_optimal): the gap when q(c|x) is the
    average responsibility E_{q(z')} p(c|z') (claimed to be zero by the
    original single-mixture derivation), and the true minimum -log Z from
    the optimal posterior.  1-D only; Gauss-Hermite with n_quad >= 64 nodes,
    refined once to check convergence.
    """
    if prior.D != 1 or q_z.mean.shape != (1,):
        raise ValueError("misapprehension_gap is quadrature-based and 1-D only")
    if n_quad < 64:
        raise ValueError("n_quad must be >= 64")

    def gaps_at(n):
        t, w = np.polynomial.hermite.hermgauss(n)
        zs = q_z.mean[0] + np.sqrt(2.0 * np.exp(q_z.log_var[0])) * t
        wt = w / np.sqrt(np.pi)
        rows = np.stack([log_responsibilities(prior, [z]) for z in zs])  # (n, K)
        avg_log = wt @ rows                       # E_q log p(c|z)
        q_vade = wt @ np.exp(rows)                # E_q p(c|z)
        q_vade = q_vade / q_vade.sum()
        gap_vade = float(np.sum(q_vade * (np.log(q_vade) - avg_log)))
        gap_opt = -float(np_logsumexp(avg_log))
        return gap_vade, gap_opt

    coarse = gaps_at(n_quad)
    fine = gaps_at(2 * n_quad)
    if max(abs(coarse[0] - fine[0]), abs(coarse[1] - fine[1])) > 1e-6:
        raise ArithmeticError(
            f"quadrature did not converge: {coarse} vs {fine} at n={n_quad}")
    return fine
