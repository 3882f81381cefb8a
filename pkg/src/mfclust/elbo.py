"""Single-sample Monte Carlo estimators of the training objective.

Two algebraically equal forms are implemented: the primary 5-term loss
(reconstruction, cluster-conditional prior, cluster prior, latent entropy,
cluster entropy) used for training, and the compact 3-term form built on the
mixture marginals, kept as a cross-checking oracle.  Their values agree to
rounding on identical samples while their gradients differ.  A multi-sample
estimator generalizes the 3-term form and collapses to it at L=1.

All per-facet terms are weighted by the fade-in coefficients; facets at
exactly zero are skipped, which leaves their parameters without gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .distributions import diag_log_prob_t, log_likelihood_t


@dataclass
class LossBreakdown:
    """Batch means of the estimator terms.

    The terms are contributions to the per-example objective estimate:
    estimate = recon + z_prior + c_prior - z_entropy - c_entropy, and
    total = -estimate (the quantity minimized).  The 3-term form reports
    its marginal term as z_prior and zeros for the categorical terms.
    """

    recon: float
    z_prior: float
    c_prior: float
    z_entropy: float
    c_entropy: float
    total: float


def _check_alphas(alphas, J):
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (J,):
        raise ValueError(f"alphas shape {alphas.shape} != ({J},)")
    if np.any(alphas < 0.0) or np.any(alphas > 1.0):
        raise ValueError("alphas must lie in [0, 1]")
    return alphas


def _finite_or_raise(name, value):
    if not np.isfinite(value):
        raise FloatingPointError(f"loss term {name} is not finite: {value}")
    return value


def loss_primary(x_t, bundle, likelihood, x_hat_t, alphas, q_c_override=None):
    """5-term estimator with the analytic optimal q(c|x) substituted in.

    ``q_c_override`` replaces the optimal categorical posterior with an
    explicit (B, K) probability tensor per facet (test hook for showing the
    optimum is a minimizer).  Returns (LossBreakdown, total tensor).
    """
    alphas = _check_alphas(alphas, len(bundle.facets))
    recon_vec = log_likelihood_t(likelihood, x_t, x_hat_t)

    z_prior_vec = c_prior_vec = z_ent_vec = c_ent_vec = None
    for j, facet in enumerate(bundle.facets):
        a = float(alphas[j])
        if a == 0.0:
            continue
        if q_c_override is None:
            log_q_c = facet.log_q_c_t
            q_c = ad.exp(log_q_c)
        else:
            q_c = q_c_override[j]
            log_q_c = ad.log(q_c)
        zp = ad.sum_(q_c * facet.comp_t, axis=-1) * a
        cp = ad.sum_(q_c * facet.log_pi_t, axis=-1) * a
        ze = diag_log_prob_t(facet.mean_t, facet.log_var_t, facet.z_t) * a
        ce = ad.sum_(q_c * log_q_c, axis=-1) * a
        z_prior_vec = zp if z_prior_vec is None else z_prior_vec + zp
        c_prior_vec = cp if c_prior_vec is None else c_prior_vec + cp
        z_ent_vec = ze if z_ent_vec is None else z_ent_vec + ze
        c_ent_vec = ce if c_ent_vec is None else c_ent_vec + ce

    tape = x_t.tape
    zero = tape.constant(np.zeros(x_t.shape[0]))
    z_prior_vec = zero if z_prior_vec is None else z_prior_vec
    c_prior_vec = zero if c_prior_vec is None else c_prior_vec
    z_ent_vec = zero if z_ent_vec is None else z_ent_vec
    c_ent_vec = zero if c_ent_vec is None else c_ent_vec

    estimate = recon_vec + z_prior_vec + c_prior_vec - z_ent_vec - c_ent_vec
    total_t = ad.mean(estimate) * (-1.0)
    breakdown = LossBreakdown(
        recon=_finite_or_raise("recon", float(recon_vec.data.mean())),
        z_prior=_finite_or_raise("z_prior", float(z_prior_vec.data.mean())),
        c_prior=_finite_or_raise("c_prior", float(c_prior_vec.data.mean())),
        z_entropy=_finite_or_raise("z_entropy", float(z_ent_vec.data.mean())),
        c_entropy=_finite_or_raise("c_entropy", float(c_ent_vec.data.mean())),
        total=_finite_or_raise("total", float(total_t.data)),
    )
    return breakdown, total_t


def loss_alternate(x_t, bundle, likelihood, x_hat_t, alphas):
    """3-term estimator: reconstruction, latent entropy, mixture marginal."""
    alphas = _check_alphas(alphas, len(bundle.facets))
    recon_vec = log_likelihood_t(likelihood, x_t, x_hat_t)

    marg_vec = z_ent_vec = None
    for j, facet in enumerate(bundle.facets):
        a = float(alphas[j])
        if a == 0.0:
            continue
        lm = ad.logsumexp(facet.comp_t + facet.log_pi_t, axis=-1) * a
        ze = diag_log_prob_t(facet.mean_t, facet.log_var_t, facet.z_t) * a
        marg_vec = lm if marg_vec is None else marg_vec + lm
        z_ent_vec = ze if z_ent_vec is None else z_ent_vec + ze

    tape = x_t.tape
    zero = tape.constant(np.zeros(x_t.shape[0]))
    marg_vec = zero if marg_vec is None else marg_vec
    z_ent_vec = zero if z_ent_vec is None else z_ent_vec

    estimate = recon_vec + marg_vec - z_ent_vec
    total_t = ad.mean(estimate) * (-1.0)
    breakdown = LossBreakdown(
        recon=_finite_or_raise("recon", float(recon_vec.data.mean())),
        z_prior=_finite_or_raise("z_prior", float(marg_vec.data.mean())),
        c_prior=0.0,
        z_entropy=_finite_or_raise("z_entropy", float(z_ent_vec.data.mean())),
        c_entropy=0.0,
        total=_finite_or_raise("total", float(total_t.data)),
    )
    return breakdown, total_t


def elbo_iwae_check(model, x, L, rng):
    """Multi-sample estimator of the objective, in the loss convention.

    Averages the reconstruction and entropy terms over L posterior samples
    and pushes the sample average of the weighted component log-densities
    through a log-sum-exp per facet.  At L=1 this equals the 3-term loss on
    the same sample.  Returns the batch-mean loss value (negated estimate).
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    cfg = model.cfg
    ones = np.ones(cfg.J)

    recon_plus_ent = None
    lw_acc = [None] * cfg.J
    tape = None
    for _ in range(L):
        bundle, tape, tensors = model.encode(x, rng=rng, tape=tape,
                                             tensors=None if tape is None else tensors,
                                             sample=True)
        x_t = tape.constant(x)
        x_hat_t = model.decode(bundle.z_tensors, ones, tape, tensors)
        term = log_likelihood_t(cfg.likelihood, x_t, x_hat_t)
        for facet in bundle.facets:
            term = term - diag_log_prob_t(facet.mean_t, facet.log_var_t, facet.z_t)
        recon_plus_ent = term if recon_plus_ent is None else recon_plus_ent + term
        for j, facet in enumerate(bundle.facets):
            lw = facet.comp_t + facet.log_pi_t
            lw_acc[j] = lw if lw_acc[j] is None else lw_acc[j] + lw

    estimate = recon_plus_ent * (1.0 / L)
    for j in range(cfg.J):
        estimate = estimate + ad.logsumexp(lw_acc[j] * (1.0 / L), axis=-1)
    return float(-estimate.data.mean())
