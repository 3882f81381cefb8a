"""Clustering accuracy metrics, the linear-probe disentanglement check, and
seed-sweep stability statistics."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tape

PERMUTATION_LIMIT = 8


def contingency_table(pred, truth):
    """Counts matrix indexed by (cluster id, class id) over their sorted
    distinct values."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be equal-length 1-D label arrays")
    clusters = np.unique(pred)
    classes = np.unique(truth)
    table = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    for i, c in enumerate(clusters):
        mask = pred == c
        for j, t in enumerate(classes):
            table[i, j] = np.count_nonzero(truth[mask] == t)
    return table


def hungarian_accuracy(pred, truth) -> float:
    """Accuracy under the best 1-to-1 cluster/class mapping.

    Requires equal numbers of distinct cluster ids and classes; enumerates
    permutations up to 8x8 and solves the assignment problem above that.
    """
    table = contingency_table(pred, truth)
    k, c = table.shape
    if k != c:
        raise ValueError(
            f"{k} clusters vs {c} classes; a 1-to-1 mapping needs equal "
            f"cardinalities - use majority_accuracy instead")
    n = table.sum()
    if k <= PERMUTATION_LIMIT:
        best = max(sum(table[i, perm[i]] for i in range(k))
                   for perm in itertools.permutations(range(k)))
    else:
        rows, cols = linear_sum_assignment(-table)
        best = table[rows, cols].sum()
    return float(best / n)


def majority_accuracy(pred, truth) -> float:
    """Accuracy when each cluster maps to its most frequent class."""
    table = contingency_table(pred, truth)
    return float(table.max(axis=1).sum() / table.sum())


def facet_label_accuracies(assignments, labels):
    """Best majority accuracy per facet over the available label columns.

    assignments: (N, J) cluster ids; labels: dict name -> (N,) classes.
    """
    J = assignments.shape[1]
    out = np.zeros(J)
    for j in range(J):
        out[j] = max(majority_accuracy(assignments[:, j], col)
                     for col in labels.values())
    return out


def factor_accuracies(assignments, labels):
    """Best majority accuracy per ground-truth factor over the facets."""
    J = assignments.shape[1]
    return {name: max(majority_accuracy(assignments[:, j], col)
                      for j in range(J))
            for name, col in labels.items()}


# -- probe classifier ------------------------------------------------------------


def probe_accuracy(train_x, train_y, test_x, test_y, rng=None, hidden=100,
                   epochs=50, lr=1e-3, batch_size=200):
    """Test accuracy of a one-hidden-layer ReLU softmax probe.

    Trained with Adam on cross-entropy for a fixed epoch budget; mirrors the
    common default MLP-classifier setup.
    """
    from .train import Adam  # local import to avoid a cycle

    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(np.concatenate([train_y, test_y]))
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    remap = {c: i for i, c in enumerate(classes)}
    y_tr = np.array([remap[c] for c in train_y])
    y_te = np.array([remap[c] for c in test_y])
    n_cls = len(classes)
    d = train_x.shape[1]

    rng = rng or np.random.default_rng(0)
    params = {
        "W1": rng.normal(0.0, np.sqrt(2.0 / (d + hidden)), size=(d, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, np.sqrt(2.0 / (hidden + n_cls)), size=(hidden, n_cls)),
        "b2": np.zeros(n_cls),
    }
    adam = Adam(params, lr=lr)

    def logits_of(tape, tensors, x):
        h = ad.relu(ad.matmul(tape.constant(x), tensors["W1"]) + tensors["b1"])
        return ad.matmul(h, tensors["W2"]) + tensors["b2"]

    n = len(train_x)
    bs = min(batch_size, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            tape = Tape()
            tensors = {k: tape.parameter(v) for k, v in params.items()}
            logits = logits_of(tape, tensors, train_x[idx])
            onehot = np.zeros((len(idx), n_cls))
            onehot[np.arange(len(idx)), y_tr[idx]] = 1.0
            picked = ad.sum_(logits * tape.constant(onehot), axis=-1)
            loss = ad.mean(ad.logsumexp(logits, axis=-1) - picked)
            grads = ad.backward(loss)
            adam.step({k: grads.get(t.node_id) for k, t in tensors.items()})

    tape = Tape()
    tensors = {k: tape.constant(v) for k, v in params.items()}
    pred = np.argmax(logits_of(tape, tensors, test_x).data, axis=-1)
    return float(np.mean(pred == y_te))


def probe_disentanglement(model, train_data, test_data, label_name, rng=None):
    """Probe accuracies from each facet's embedding and their concatenation.

    Embeddings are posterior samples (one per example).  Returns a list of
    J+1 accuracies: one per facet, then the concatenated embedding.
    """
    rng = rng or np.random.default_rng(0)
    z_tr = model.posterior_samples(train_data.images, rng)
    z_te = model.posterior_samples(test_data.images, rng)
    y_tr = train_data.labels[label_name]
    y_te = test_data.labels[label_name]
    accs = []
    for j in range(model.cfg.J):
        accs.append(probe_accuracy(z_tr[j], y_tr, z_te[j], y_te, rng=rng))
    accs.append(probe_accuracy(np.concatenate(z_tr, axis=-1), y_tr,
                               np.concatenate(z_te, axis=-1), y_te, rng=rng))
    return accs


# -- seed sweeps ---------------------------------------------------------------------


def stability_sweep(model_cfg, train_cfg, train_data, eval_data, seeds,
                    curve_path=None, summary_path=None):
    """Train one model per seed and aggregate the accuracy curves.

    Returns (curves, aggregates): curves is a list of (seed, curve) pairs
    where each curve is an (epochs, J) accuracy array (None for runs that
    aborted); aggregates holds per-epoch mean/std over the completed runs.
    Optionally writes the per-seed curve CSV and the mean/std summary CSV.
    """
    from dataclasses import replace

    from .model import MultiFacetVAE
    from .train import train

    if len(seeds) < 2:
        raise ValueError("stability sweeps need at least 2 seeds")
    curves = []                                      # (seed, curve-or-None) rows
    for seed in seeds:
        cfg = replace(train_cfg, seed=int(seed))
        model = MultiFacetVAE(model_cfg)
        try:
            result = train(model, train_data, cfg, eval_data=eval_data)
            rows = [r for r in result.metrics if r.get("acc_facet_0") is not None]
            curve = np.array(
                [[r[f"acc_facet_{j}"] for j in range(model_cfg.J)] for r in rows])
            curves.append((seed, curve))
        except Exception:
            curves.append((seed, None))

    completed = [c for _, c in curves if c is not None]
    if not completed:
        raise RuntimeError("every sweep run aborted")
    stack = np.stack(completed)                      # (S, epochs, J)
    aggregates = {"mean": stack.mean(axis=0), "std": stack.std(axis=0, ddof=1)}

    J = model_cfg.J
    if curve_path is not None:
        with open(curve_path, "w", newline="\n") as fh:
            fh.write("seed,epoch," + ",".join(f"acc_facet_{j}" for j in range(J)) + "\n")
            for seed, curve in curves:
                if curve is None:
                    continue
                for epoch, row in enumerate(curve):
                    cells = ",".join(repr(float(v)) for v in row)
                    fh.write(f"{seed},{epoch},{cells}\n")
    if summary_path is not None:
        with open(summary_path, "w", newline="\n") as fh:
            head = [f"mean_facet_{j}" for j in range(J)] + [f"std_facet_{j}" for j in range(J)]
            fh.write("epoch," + ",".join(head) + "\n")
            for epoch in range(stack.shape[1]):
                cells = [repr(float(v)) for v in aggregates["mean"][epoch]]
                cells += [repr(float(v)) for v in aggregates["std"][epoch]]
                fh.write(f"{epoch}," + ",".join(cells) + "\n")
    return curves, aggregates
