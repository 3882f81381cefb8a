"""End-to-end training: Glorot init, EM prior init, Adam on the primary
loss under the progressive fade-in schedule, metric logging, checkpoints.

All randomness descends from one seed through separate SeedSequence
children (weight init, prior init, the shuffling/sampling stream), so a
repeated run is bit-identical including its metrics CSV.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .elbo import loss_primary
from .evaluate import facet_label_accuracies
from .mog import _kmeanspp_seed, em_fit
from .model import MultiFacetVAE, fade_in_coefficient

logger = logging.getLogger("mfclust")

PRIOR_INIT_VARIANCE = 0.01

LOSS_COLUMNS = ("recon", "z_prior", "c_prior", "z_entropy", "c_entropy", "total")


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops training."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int = 0
    epochs_per_progressive_step: int = 0   # 0 = equal split across facets
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 0                     # extra loss rows every N batches
    checkpoint_every: int = 0              # epochs; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    metrics: list
    alpha_history: list                    # (global_batch, alphas) per batch
    checkpoint_paths: list = field(default_factory=list)


class Adam:
    """Standard Adam over a dict of named parameter arrays (updated in place).

    Missing gradients count as zero, so parameters without any gradient path
    stay bit-identical (their moments remain zero and the update is 0/eps).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, arr in self.params.items():
            g = grads.get(name)
            if g is None:
                g = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def init_parameters(model: MultiFacetVAE, rng):
    """Glorot-normal weights (std sqrt(2/(fan_in+fan_out))), zero biases."""
    for name, arr in model.weights.items():
        if name.endswith(".W"):
            fan_in, fan_out = arr.shape
            arr[...] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)),
                                  size=arr.shape)
        else:
            arr[...] = 0.0


def init_prior(model: MultiFacetVAE, images, rng):
    """EM-based prior means from encoder latents; fixed isotropic covariance.

    Encodes the whole training set, fits a diagonal MoG per facet, copies the
    means, then overwrites every covariance with 0.01*I and resets the mixing
    weights to uniform.  If EM fails, falls back to k-means++ seeding.
    """
    latents = model.posterior_samples(np.asarray(images, dtype=np.float64), rng)
    for j, facet in enumerate(model.priors.facets):
        points = latents[j]
        try:
            fitted = em_fit(points, facet.K, rng=rng)
            facet.means[...] = fitted.means
        except Exception as exc:
            logger.warning("facet %d EM failed (%s); falling back to k-means++ "
                           "seeding", j, exc)
            facet.means[...] = _kmeanspp_seed(points, facet.K, rng)
        facet.set_isotropic_covariance(PRIOR_INIT_VARIANCE)
        facet.set_uniform_pi()


def _format_row(row, acc_columns):
    cells = [str(row["epoch"]), str(row["batch"])]
    cells += [repr(row[c]) for c in LOSS_COLUMNS]
    for col in acc_columns:
        value = row.get(col)
        cells.append("" if value is None else repr(value))
    return ",".join(cells)


def write_metrics_csv(path, metrics, J):
    acc_columns = [f"acc_facet_{j}" for j in range(J)]
    with open(path, "w", newline="\n") as fh:
        fh.write("epoch,batch," + ",".join(LOSS_COLUMNS) + ","
                 + ",".join(acc_columns) + "\n")
        for row in metrics:
            fh.write(_format_row(row, acc_columns) + "\n")


def train(model: MultiFacetVAE, train_data, cfg: TrainConfig, eval_data=None,
          out_dir=None, initialize=True) -> TrainResult:
    """Run the full training loop.

    Appends one metrics row per epoch (plus optional every-N-batches loss
    rows); per-facet accuracies are computed on ``eval_data`` when it has
    labels, else on the training labels.  Checkpoints and the metrics CSV go
    to ``out_dir`` when given.
    """
    from .checkpoint import save_checkpoint

    mcfg = model.cfg
    J = mcfg.J
    images = np.asarray(train_data.images, dtype=np.float64)
    n = len(images)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_prior, ss_train = root.spawn(3)
    if initialize:
        init_parameters(model, np.random.default_rng(ss_init))
        init_prior(model, images, np.random.default_rng(ss_prior))
    rng = np.random.default_rng(ss_train)

    adam = Adam(model.parameters(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    acc_data = eval_data if (eval_data is not None and eval_data.labels) else train_data
    have_labels = bool(acc_data.labels)

    epochs_per_step = cfg.epochs_per_progressive_step
    if epochs_per_step <= 0:
        epochs_per_step = max(1, int(np.ceil(cfg.epochs / J)))

    metrics = []
    alpha_history = []
    checkpoints = []
    global_batch = 0
    step = 1
    step_start_batch = 0

    def accuracy_cells():
        if not have_labels:
            return {f"acc_facet_{j}": None for j in range(J)}
        accs = facet_label_accuracies(model.cluster_assign(acc_data.images),
                                      acc_data.labels)
        return {f"acc_facet_{j}": float(accs[j]) for j in range(J)}

    for epoch in range(cfg.epochs):
        new_step = min(J, epoch // epochs_per_step + 1)
        if new_step != step:
            step = new_step
            step_start_batch = global_batch
        perm = rng.permutation(n)
        epoch_sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        epoch_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            alphas = fade_in_coefficient(mcfg.fade_in_batches, J, step,
                                         global_batch - step_start_batch)
            alpha_history.append((global_batch, alphas))

            tape, tensors = model.new_tape(trainable=True)
            bundle, tape, tensors = model.encode(images[idx], rng=rng,
                                                 tape=tape, tensors=tensors)
            x_t = tape.constant(images[idx])
            x_hat = model.decode(bundle.z_tensors, alphas, tape, tensors)
            try:
                breakdown, total_t = loss_primary(x_t, bundle, mcfg.likelihood,
                                                  x_hat, alphas)
            except FloatingPointError as exc:
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} batch {global_batch}: "
                    f"{exc}") from exc
            grads = ad.backward(total_t)
            adam.step({name: grads.get(t.node_id) for name, t in tensors.items()})
            global_batch += 1
            epoch_batches += 1
            for c in LOSS_COLUMNS:
                epoch_sums[c] += getattr(breakdown, c)

            if cfg.log_every and global_batch % cfg.log_every == 0:
                row = {"epoch": epoch, "batch": global_batch}
                row.update({c: getattr(breakdown, c) for c in LOSS_COLUMNS})
                row.update({f"acc_facet_{j}": None for j in range(J)})
                metrics.append(row)

        # epoch rows carry the epoch-mean loss terms
        row = {"epoch": epoch, "batch": global_batch}
        row.update({c: epoch_sums[c] / epoch_batches for c in LOSS_COLUMNS})
        row.update(accuracy_cells())
        metrics.append(row)

        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_epoch{epoch:04d}.mfcv")
            save_checkpoint(path, model)
            checkpoints.append(path)

    if out_dir:
        final = os.path.join(out_dir, "final.mfcv")
        save_checkpoint(final, model)
        checkpoints.append(final)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics, J)
    return TrainResult(metrics, alpha_history, checkpoints)
