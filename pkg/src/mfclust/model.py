"""Fully-connected ladder (VLAE-style) and shared encoder/decoder models.

The ladder variant has a single deterministic backbone; each facet's rung
branches out at its own depth, so facets capture different abstraction
levels.  The shared variant (used as a stability baseline) gives every facet
equal depth.  Both expose the same operations.

Progressive training multiplies the decoder rungs and the per-facet KL terms
by fade-in coefficients; a zero coefficient makes the output invariant to
that facet and zeroes all of its gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .distributions import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    LikelihoodModel,
    reparam_sample,
)
from .mog import FacetPrior, MultiFacetPrior


@dataclass
class ModelConfig:
    J: int
    input_dim: int
    z_dims: tuple
    K: tuple
    backbone_widths: tuple
    architecture: str = "ladder"
    likelihood: LikelihoodModel = field(default_factory=lambda: LikelihoodModel("bernoulli"))
    cov_mode: str = "diag"
    pi_trainable: bool = True
    fade_in_batches: int = 15000
    activation: str = "relu"

    def __post_init__(self):
        self.z_dims = tuple(int(d) for d in self.z_dims)
        self.K = tuple(int(k) for k in self.K)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if not (len(self.z_dims) == len(self.K) == len(self.backbone_widths) == self.J):
            raise ValueError("z_dims, K, and backbone_widths must each have J entries")
        if self.input_dim < 1 or min(self.z_dims) < 1 or min(self.K) < 1 \
                or min(self.backbone_widths) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.architecture not in ("ladder", "shared"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.cov_mode not in ("diag", "full"):
            raise ValueError(f"unknown covariance mode {self.cov_mode!r}")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class FacetPosterior:
    """One facet's amortised posterior terms on a tape."""

    mean_t: object
    log_var_t: object
    z_t: object
    log_q_c_t: object       # (B, K), the analytic optimal posterior at L=1
    comp_t: object          # (B, K) per-component log-densities of z_t
    log_pi_t: object        # (K,)
    prior_view: object


@dataclass
class PosteriorBundle:
    facets: list

    @property
    def z_tensors(self):
        return [f.z_t for f in self.facets]


def fade_in_coefficient(fade_in_batches, J, progressive_step, batch_in_step):
    """Fade-in coefficients for one training batch.

    During step s, facets deeper than the newcomer are fully active, the
    facet joining at this step ramps linearly over ``fade_in_batches``
    batches, and not-yet-joined facets stay at zero.  The first step has no
    ramp: the deepest facet starts fully active.
    """
    if not 1 <= progressive_step <= J:
        raise ValueError(f"progressive_step {progressive_step} outside [1, {J}]")
    if batch_in_step < 0:
        raise ValueError("batch_in_step must be >= 0")
    alphas = np.zeros(J)
    joining = J - progressive_step          # 0-based index of the newest facet
    alphas[joining + 1:] = 1.0
    if progressive_step == 1:
        alphas[joining] = 1.0
    else:
        alphas[joining] = min(max(batch_in_step / fade_in_batches, 0.0), 1.0)
    return alphas


def _activation(name):
    return ad.relu if name == "relu" else ad.elu


class MultiFacetVAE:
    """Encoder/decoder networks plus one MoG prior per facet."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.priors = MultiFacetPrior([
            FacetPrior(cfg.K[j], cfg.z_dims[j], mode=cfg.cov_mode,
                       pi_trainable=cfg.pi_trainable,
                       rng=np.random.default_rng(j))
            for j in range(cfg.J)
        ])
        self.weights = {}
        for name, shape in self._weight_shapes().items():
            self.weights[name] = np.zeros(shape)

    # -- parameter registry ----------------------------------------------------

    def _weight_shapes(self):
        cfg = self.cfg
        J, w = cfg.J, cfg.backbone_widths
        shapes = {}
        if cfg.architecture == "ladder":
            prev = cfg.input_dim
            for j in range(J):
                shapes[f"enc.b{j}.W"] = (prev, w[j])
                shapes[f"enc.b{j}.b"] = (w[j],)
                shapes[f"enc.r{j}.W"] = (w[j], 2 * cfg.z_dims[j])
                shapes[f"enc.r{j}.b"] = (2 * cfg.z_dims[j],)
                prev = w[j]
            for j in range(J):
                shapes[f"dec.r{j}.W"] = (cfg.z_dims[j], w[j])
                shapes[f"dec.r{j}.b"] = (w[j],)
                in_dim = w[j] if j == J - 1 else 2 * w[j]
                out_dim = cfg.input_dim if j == 0 else w[j - 1]
                shapes[f"dec.b{j}.W"] = (in_dim, out_dim)
                shapes[f"dec.b{j}.b"] = (out_dim,)
        else:
            prev = cfg.input_dim
            for i in range(J):
                shapes[f"enc.s{i}.W"] = (prev, w[i])
                shapes[f"enc.s{i}.b"] = (w[i],)
                prev = w[i]
            for j in range(J):
                shapes[f"enc.t{j}.W"] = (w[-1], 2 * cfg.z_dims[j])
                shapes[f"enc.t{j}.b"] = (2 * cfg.z_dims[j],)
            shapes["dec.t.W"] = (sum(cfg.z_dims), w[-1])
            shapes["dec.t.b"] = (w[-1],)
            for i in range(J - 1, 0, -1):
                shapes[f"dec.s{i}.W"] = (w[i], w[i - 1])
                shapes[f"dec.s{i}.b"] = (w[i - 1],)
            shapes["dec.out.W"] = (w[0], cfg.input_dim)
            shapes["dec.out.b"] = (cfg.input_dim,)
        return shapes

    def parameters(self):
        """All optimizable arrays (network weights and prior parameters)."""
        out = dict(self.weights)
        out.update(self.priors.parameters())
        return out

    def new_tape(self, trainable=True):
        tape = Tape()
        reg = tape.parameter if trainable else tape.constant
        tensors = {name: reg(arr) for name, arr in self.parameters().items()}
        return tape, tensors

    def _prior_view(self, j, tape, tensors):
        prefix = f"prior.{j}."
        sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        return self.priors.facets[j].tape_view(tape, sub)

    # -- forward passes -----------------------------------------------------------

    def _linear(self, tensors, name, x_t):
        return ad.matmul(x_t, tensors[f"{name}.W"]) + tensors[f"{name}.b"]

    def encode(self, x, rng=None, tape=None, tensors=None, sample=True):
        """Amortised posteriors, one reparameterized sample per facet, and
        the analytic q(c|x) of each facet.  With sample=False the posterior
        mean stands in for the sample (deterministic evaluation mode)."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ValueError(f"x shape {x.shape} invalid; need (batch, {cfg.input_dim})")
        if sample and rng is None:
            raise ValueError("sampling encode requires an rng")
        if tape is None:
            tape, tensors = self.new_tape(trainable=False)
        act = _activation(cfg.activation)
        x_t = tape.constant(x)

        heads = []
        if cfg.architecture == "ladder":
            h = x_t
            for j in range(cfg.J):
                h = act(self._linear(tensors, f"enc.b{j}", h))
                heads.append(self._linear(tensors, f"enc.r{j}", h))
        else:
            h = x_t
            for i in range(cfg.J):
                h = act(self._linear(tensors, f"enc.s{i}", h))
            for j in range(cfg.J):
                heads.append(self._linear(tensors, f"enc.t{j}", h))

        facets = []
        for j, head in enumerate(heads):
            D = cfg.z_dims[j]
            mean_t = ad.slice_(head, 0, D, axis=-1)
            log_var_t = ad.clamp(ad.slice_(head, D, 2 * D, axis=-1),
                                 LOG_VAR_MIN, LOG_VAR_MAX)
            z_t = reparam_sample(mean_t, log_var_t, rng) if sample else mean_t
            view = self._prior_view(j, tape, tensors)
            comp_t = view.log_component_densities_t(z_t)
            log_pi_t = view.log_pi_t()
            lw = comp_t + log_pi_t
            B, K = lw.shape
            norm = ad.broadcast(ad.reshape(ad.logsumexp(lw, axis=-1), (B, 1)), (B, K))
            facets.append(FacetPosterior(mean_t, log_var_t, z_t, lw - norm,
                                         comp_t, log_pi_t, view))
        return PosteriorBundle(facets), tape, tensors

    def decode(self, z_ts, alphas, tape, tensors):
        """Likelihood parameters from per-facet latents; decoder rungs are
        multiplied by their fade-in coefficients."""
        cfg = self.cfg
        if len(z_ts) != cfg.J:
            raise ValueError(f"got {len(z_ts)} latents for {cfg.J} facets")
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.shape != (cfg.J,) or np.any(alphas < 0) or np.any(alphas > 1):
            raise ValueError("alphas must be J values in [0, 1]")
        act = _activation(cfg.activation)

        if cfg.architecture == "ladder":
            rung = act(self._linear(tensors, f"dec.r{cfg.J - 1}", z_ts[-1]))
            h = rung * float(alphas[-1])
            for j in range(cfg.J - 1, -1, -1):
                if j < cfg.J - 1:
                    rung = act(self._linear(tensors, f"dec.r{j}", z_ts[j]))
                    h = ad.concat([h, rung * float(alphas[j])], axis=-1)
                pre = self._linear(tensors, f"dec.b{j}", h)
                if j == 0:
                    h = pre
                else:
                    h = act(pre)
        else:
            faded = [z * float(a) for z, a in zip(z_ts, alphas)]
            zcat = faded[0] if cfg.J == 1 else ad.concat(faded, axis=-1)
            h = act(ad.matmul(zcat, tensors["dec.t.W"]) + tensors["dec.t.b"])
            for i in range(cfg.J - 1, 0, -1):
                h = act(self._linear(tensors, f"dec.s{i}", h))
            h = self._linear(tensors, "dec.out", h)

        if cfg.likelihood.kind == "bernoulli":
            return ad.sigmoid(h)
        return h

    # -- deterministic evaluation helpers ---------------------------------------

    def posterior_means(self, x, chunk=2048):
        """Per-facet posterior means as numpy arrays (no sampling)."""
        outs = [[] for _ in range(self.cfg.J)]
        for lo in range(0, len(x), chunk):
            bundle, _, _ = self.encode(x[lo:lo + chunk], sample=False)
            for j, f in enumerate(bundle.facets):
                outs[j].append(f.mean_t.data)
        return [np.concatenate(rows) for rows in outs]

    def posterior_samples(self, x, rng, chunk=2048):
        """Per-facet reparameterized samples of q(z|x) as numpy arrays."""
        outs = [[] for _ in range(self.cfg.J)]
        for lo in range(0, len(x), chunk):
            bundle, _, _ = self.encode(x[lo:lo + chunk], rng=rng, sample=True)
            for j, f in enumerate(bundle.facets):
                outs[j].append(f.z_t.data)
        return [np.concatenate(rows) for rows in outs]

    def cluster_assign(self, x, chunk=2048):
        """Argmax of q(c|x) per facet, computed at the posterior mean so the
        assignment is deterministic.  Ties break to the lowest index."""
        cols = [[] for _ in range(self.cfg.J)]
        for lo in range(0, len(x), chunk):
            bundle, _, _ = self.encode(x[lo:lo + chunk], sample=False)
            for j, f in enumerate(bundle.facets):
                cols[j].append(np.argmax(f.log_q_c_t.data, axis=-1))
        return np.stack([np.concatenate(c) for c in cols], axis=-1)

    def reconstruct(self, x, alphas=None):
        """Decode the posterior means; returns likelihood parameters."""
        cfg = self.cfg
        alphas = np.ones(cfg.J) if alphas is None else alphas
        bundle, tape, tensors = self.encode(np.atleast_2d(x), sample=False)
        return self.decode([f.mean_t for f in bundle.facets], alphas, tape, tensors).data

    def swap_reconstruct(self, x1, x2, swap_facet):
        """Exchange facet ``swap_facet``'s posterior-mean representation
        between two inputs and decode both."""
        cfg = self.cfg
        if not 0 <= swap_facet < cfg.J:
            raise ValueError(f"swap_facet {swap_facet} outside [0, {cfg.J})")
        x = np.vstack([np.atleast_2d(x1), np.atleast_2d(x2)])
        bundle, tape, tensors = self.encode(x, sample=False)
        ones = np.ones(cfg.J)

        def pick(owner_row, donor_row):
            zs = []
            for j, f in enumerate(bundle.facets):
                row = donor_row if j == swap_facet else owner_row
                zs.append(ad.slice_(f.mean_t, row, row + 1, axis=0))
            return zs

        out1 = self.decode(pick(0, 1), ones, tape, tensors).data[0]
        out2 = self.decode(pick(1, 0), ones, tape, tensors).data[0]
        return out1, out2

    def generate(self, rng, n, facet=None, cluster=None, temperature=1.0):
        """Ancestral sampling: fix (facet, cluster) if given, sample the other
        facets from their marginals, decode the batch, return likelihood
        parameters (the decoder modes)."""
        cfg = self.cfg
        zs = []
        for j, facet_prior in enumerate(self.priors.facets):
            fixed = cluster if (facet is not None and j == facet) else None
            rows = [facet_prior.sample(temperature, rng, fixed_c=fixed)[1]
                    for _ in range(n)]
            zs.append(np.stack(rows))
        tape, tensors = self.new_tape(trainable=False)
        z_ts = [tape.constant(z) for z in zs]
        return self.decode(z_ts, np.ones(cfg.J), tape, tensors).data
