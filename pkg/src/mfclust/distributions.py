"""Gaussian log-densities, reparameterized sampling, and pixel likelihoods.

Scalar-level functions (``log_prob_diag`` etc.) operate on plain numpy
vectors and are used by oracles, evaluation, and EM.  The ``*_t`` helpers
are the batched tape equivalents used inside training graphs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad

logger = logging.getLogger("mfclust")

LOG_2PI = float(np.log(2.0 * np.pi))

# numerical guards
LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 30.0
BERNOULLI_EPS = 1e-7


@dataclass
class DiagGaussianParams:
    """Mean and natural-log variance of a diagonal Gaussian."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_var))):
            raise ValueError("DiagGaussianParams entries must be finite")


@dataclass
class FullGaussianParams:
    """Mean and lower-triangular Cholesky factor L with Sigma = L L^T."""

    mean: np.ndarray
    chol_factor: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.chol_factor = np.asarray(self.chol_factor, dtype=np.float64)
        D = self.mean.shape[0]
        if self.chol_factor.shape != (D, D):
            raise ValueError(
                f"chol_factor shape {self.chol_factor.shape} does not match dim {D}")
        if np.any(np.triu(self.chol_factor, k=1) != 0.0):
            raise ValueError("chol_factor must be lower-triangular")
        if np.any(np.diagonal(self.chol_factor) <= 0.0):
            raise ValueError("chol_factor diagonal must be strictly positive")


@dataclass
class LikelihoodModel:
    """Observation model of the decoder output."""

    kind: str
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gaussian_fixed_sigma"):
            raise ValueError(f"unknown likelihood kind {self.kind!r}")
        if self.kind == "gaussian_fixed_sigma" and self.sigma <= 0.0:
            raise ValueError("sigma must be positive for gaussian_fixed_sigma")


# -- scalar log-densities ------------------------------------------------------

def log_prob_diag(params: DiagGaussianParams, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != params.mean.shape:
        raise ValueError(f"z shape {z.shape} != mean shape {params.mean.shape}")
    var = np.exp(params.log_var)
    return float(np.sum(
        -0.5 * LOG_2PI - 0.5 * params.log_var - (z - params.mean) ** 2 / (2.0 * var)))


def log_prob_full(params: FullGaussianParams, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != params.mean.shape:
        raise ValueError(f"z shape {z.shape} != mean shape {params.mean.shape}")
    L = params.chol_factor
    y = solve_triangular(L, z - params.mean, lower=True)
    D = params.mean.shape[0]
    return float(-0.5 * D * LOG_2PI - np.sum(np.log(np.diagonal(L)))
                 - 0.5 * np.sum(y * y))


def log_likelihood(model: LikelihoodModel, x, x_hat) -> float:
    """Log-density of pixels ``x`` under the decoder output ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"x shape {x.shape} != x_hat shape {x_hat.shape}")
    if model.kind == "bernoulli":
        if np.any(x_hat <= 0.0) or np.any(x_hat >= 1.0):
            logger.warning("bernoulli x_hat outside (0,1); clamping to [%.0e, 1-%.0e]",
                           BERNOULLI_EPS, BERNOULLI_EPS)
        x_hat = np.clip(x_hat, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        return float(np.sum(x * np.log(x_hat) + (1.0 - x) * np.log(1.0 - x_hat)))
    var = model.sigma ** 2
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * var)
                        - (x - x_hat) ** 2 / (2.0 * var)))


# -- reparameterized sampling --------------------------------------------------

def reparam_sample(mean_t, log_var_t, rng):
    """z = mean + exp(log_var / 2) * eps with eps ~ N(0, I) held constant.

    Gradients flow to the mean and log-variance tensors only.  The
    log-variance is clamped to [-30, 30] before exponentiation.
    """
    tape = mean_t.tape
    eps = tape.constant(rng.standard_normal(mean_t.shape))
    lv = ad.clamp(log_var_t, LOG_VAR_MIN, LOG_VAR_MAX)
    return mean_t + ad.exp(lv * 0.5) * eps


def sample_reparam(params: DiagGaussianParams, rng, tape):
    """Spec surface over :func:`reparam_sample` for plain parameter vectors."""
    mean_t = tape.parameter(params.mean)
    log_var_t = tape.parameter(params.log_var)
    return reparam_sample(mean_t, log_var_t, rng)


# -- batched tape densities ------------------------------------------------------

def diag_log_prob_t(mean_t, log_var_t, z_t):
    """Row-wise diagonal-Gaussian log-density; shapes (B, D) -> (B,)."""
    lv = ad.clamp(log_var_t, LOG_VAR_MIN, LOG_VAR_MAX)
    diff = z_t - mean_t
    quad = diff * diff / ad.exp(lv)
    return ad.sum_(quad + lv, axis=-1) * (-0.5) - 0.5 * LOG_2PI * mean_t.shape[-1]


def log_likelihood_t(model: LikelihoodModel, x_t, x_hat_t):
    """Row-wise log-likelihood of a batch; shapes (B, D) -> (B,)."""
    if model.kind == "bernoulli":
        if np.any(x_hat_t.data <= 0.0) or np.any(x_hat_t.data >= 1.0):
            logger.warning("bernoulli x_hat outside (0,1); clamping to [%.0e, 1-%.0e]",
                           BERNOULLI_EPS, BERNOULLI_EPS)
        xh = ad.clamp(x_hat_t, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        per_pixel = x_t * ad.log(xh) + (1.0 - x_t) * ad.log(1.0 - xh)
        return ad.sum_(per_pixel, axis=-1)
    var = model.sigma ** 2
    diff = x_t - x_hat_t
    return (ad.sum_(diff * diff, axis=-1) * (-0.5 / var)
            - 0.5 * np.log(2.0 * np.pi * var) * x_t.shape[-1])
