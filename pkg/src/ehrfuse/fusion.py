"""Late fusion: concatenate the text and temporal embeddings, run the MLP head,
and turn logits into per-disease probabilities and thresholded predictions."""

from __future__ import annotations

import csv

import numpy as np

from .params import ParameterStore, uniform_fan_in
from .records import ValidationError

PREDICTION_THRESHOLD = 0.5  # bits are 1 where probability >= threshold


class NumericalError(RuntimeError):
    """A forward/backward pass produced non-finite values."""


def init_fusion_params(
    store: ParameterStore,
    d_model: int,
    n_labels: int,
    depth: int,
    rng: np.random.Generator,
) -> None:
    if depth < 1:
        raise ValidationError(f"fusion depth must be >= 1, got {depth}")
    store.add("fusion.w1", uniform_fan_in(rng, (d_model, 2 * d_model), 2 * d_model))
    store.add("fusion.b1", np.zeros(d_model))
    for i in range(2, depth + 1):
        store.add(f"fusion.h{i}_w", uniform_fan_in(rng, (d_model, d_model), d_model))
        store.add(f"fusion.h{i}_b", np.zeros(d_model))
    store.add("fusion.out_w", uniform_fan_in(rng, (n_labels, d_model), d_model))
    store.add("fusion.out_b", np.zeros(n_labels))


def fuse(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    """Concatenate along the feature axis, text embedding first."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.ndim != z_b.ndim or z_a.shape[:-1] != z_b.shape[:-1]:
        raise ValidationError(f"cannot fuse shapes {z_a.shape} and {z_b.shape}")
    return np.concatenate([z_a, z_b], axis=-1)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in fusion {stage}")


def fusion_forward(z_in: np.ndarray, store: ParameterStore, depth: int = 1):
    """ReLU hidden stack then sigmoid outputs.

    Accepts a single fused vector or a (B, 2d) batch. Returns
    (hidden, logits, probabilities, bits, cache) with leading batch axis
    matching the input.
    """
    single = z_in.ndim == 1
    x = np.atleast_2d(np.asarray(z_in, dtype=np.float64))
    w1 = store["fusion.w1"]
    if x.shape[1] != w1.shape[1]:
        raise ValidationError(
            f"fused width {x.shape[1]} does not match fusion input width {w1.shape[1]}"
        )
    pres = []
    hiddens = []
    pre = x @ w1.T + store["fusion.b1"]
    _check_finite(pre, "hidden layer 1")
    h = np.maximum(pre, 0.0)
    pres.append(pre)
    hiddens.append(h)
    for i in range(2, depth + 1):
        pre = h @ store[f"fusion.h{i}_w"].T + store[f"fusion.h{i}_b"]
        _check_finite(pre, f"hidden layer {i}")
        h = np.maximum(pre, 0.0)
        pres.append(pre)
        hiddens.append(h)
    logits = h @ store["fusion.out_w"].T + store["fusion.out_b"]
    _check_finite(logits, "output layer")
    probs = sigmoid(logits)
    bits = (probs >= PREDICTION_THRESHOLD).astype(np.int64)
    cache = (x, pres, hiddens)
    if single:
        return h[0], logits[0], probs[0], bits[0], cache
    return h, logits, probs, bits, cache


def fusion_backward(d_logits: np.ndarray, cache, store: ParameterStore, depth: int = 1):
    """Accumulate head gradients; returns the gradient w.r.t. the fused input."""
    x, pres, hiddens = cache
    d_logits = np.atleast_2d(d_logits)
    store.grad("fusion.out_w")[...] += d_logits.T @ hiddens[-1]
    store.grad("fusion.out_b")[...] += d_logits.sum(axis=0)
    d_h = d_logits @ store["fusion.out_w"]
    for i in range(depth, 1, -1):
        d_pre = d_h * (pres[i - 1] > 0.0)
        store.grad(f"fusion.h{i}_w")[...] += d_pre.T @ hiddens[i - 2]
        store.grad(f"fusion.h{i}_b")[...] += d_pre.sum(axis=0)
        d_h = d_pre @ store[f"fusion.h{i}_w"]
    d_pre = d_h * (pres[0] > 0.0)
    store.grad("fusion.w1")[...] += d_pre.T @ x
    store.grad("fusion.b1")[...] += d_pre.sum(axis=0)
    return d_pre @ store["fusion.w1"]


def write_prediction_csv(path, rows) -> None:
    """Long-format dump: one row per (sample, label)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "visit_index", "label", "probability", "bit", "target"])
        for patient_id, visit_index, label, prob, bit, target in rows:
            writer.writerow([patient_id, visit_index, label, repr(float(prob)), bit, target])
