"""Hybrid training objective: binary cross-entropy mixed with a pairwise
multilabel hinge term, plus their gradients with respect to the scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import ValidationError

REDUCTION_SUM = "sum"
REDUCTION_MEAN = "mean"
HINGE_ON_PROBS = "probs"
HINGE_ON_LOGITS = "logits"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.95          # BCE weight; hinge gets (1 - alpha)
    bce_eps: float = 1e-7        # probability clamp before the logs
    reduction: str = REDUCTION_SUM
    hinge_scores: str = HINGE_ON_PROBS


def validate_loss_config(cfg: LossConfig) -> None:
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {cfg.alpha}")
    if not 0.0 < cfg.bce_eps < 0.5:
        raise ValidationError(f"bce_eps must be in (0, 0.5), got {cfg.bce_eps}")
    if cfg.reduction not in (REDUCTION_SUM, REDUCTION_MEAN):
        raise ValidationError(f"unknown reduction {cfg.reduction!r}")
    if cfg.hinge_scores not in (HINGE_ON_PROBS, HINGE_ON_LOGITS):
        raise ValidationError(f"unknown hinge score space {cfg.hinge_scores!r}")


def _as_batch(targets, scores):
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if t.shape != s.shape:
        raise ValidationError(f"target shape {t.shape} != score shape {s.shape}")
    return t, s


def bce_loss(targets, probs, eps: float = 1e-7, reduction: str = REDUCTION_SUM) -> float:
    """-sum[o log p + (1-o) log(1-p)] over every (sample, label) cell.

    Probabilities are clamped to [eps, 1-eps] before the logs; mean reduction
    divides the batch sum by the number of samples.
    """
    t, p = _as_batch(targets, probs)
    pc = np.clip(p, eps, 1.0 - eps)
    total = -float(np.sum(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)))
    if reduction == REDUCTION_MEAN:
        total /= t.shape[0]
    return total


def bce_grad(targets, probs, eps: float = 1e-7, reduction: str = REDUCTION_SUM) -> np.ndarray:
    """d bce / d probs; zero where the clamp is active."""
    t, p = _as_batch(targets, probs)
    pc = np.clip(p, eps, 1.0 - eps)
    g = -(t / pc - (1.0 - t) / (1.0 - pc))
    g[(p < eps) | (p > 1.0 - eps)] = 0.0
    if reduction == REDUCTION_MEAN:
        g /= t.shape[0]
    return g.reshape(np.shape(probs))


def _sample_pairs(t_row):
    pos = np.nonzero(t_row == 1.0)[0]
    neg = np.nonzero(t_row == 0.0)[0]
    return pos, neg


def hinge_loss(targets, scores) -> float:
    """Pairwise margin penalty summed over every (positive, negative) label
    pair of every sample, divided by the number of samples in the batch.
    Samples lacking positives or negatives contribute nothing."""
    t, s = _as_batch(targets, scores)
    total = 0.0
    for row in range(t.shape[0]):
        pos, neg = _sample_pairs(t[row])
        if pos.size == 0 or neg.size == 0:
            continue
        margins = 1.0 - (s[row, pos][:, None] - s[row, neg][None, :])
        total += float(np.sum(np.maximum(margins, 0.0)))
    return total / t.shape[0]


def hinge_grad(targets, scores) -> np.ndarray:
    """Subgradient of hinge_loss w.r.t. the scores (0 at the kink itself)."""
    t, s = _as_batch(targets, scores)
    g = np.zeros_like(s)
    for row in range(t.shape[0]):
        pos, neg = _sample_pairs(t[row])
        if pos.size == 0 or neg.size == 0:
            continue
        margins = 1.0 - (s[row, pos][:, None] - s[row, neg][None, :])
        active = margins > 0.0
        g[row, pos] -= active.sum(axis=1)
        g[row, neg] += active.sum(axis=0)
    g /= t.shape[0]
    return g.reshape(np.shape(scores))


def combined_loss(targets, probs, cfg: LossConfig, logits=None) -> float:
    """alpha * BCE + (1 - alpha) * hinge."""
    bce = bce_loss(targets, probs, cfg.bce_eps, cfg.reduction)
    scores = probs if cfg.hinge_scores == HINGE_ON_PROBS else _require_logits(logits)
    hinge = hinge_loss(targets, scores)
    return cfg.alpha * bce + (1.0 - cfg.alpha) * hinge


def combined_logit_grad(targets, probs, logits, cfg: LossConfig) -> np.ndarray:
    """Gradient of the combined loss w.r.t. the logits (scores before the
    sigmoid), folding both terms through d prob / d logit where needed."""
    t, p = _as_batch(targets, probs)
    dsig = p * (1.0 - p)
    d_logits = cfg.alpha * bce_grad(t, p, cfg.bce_eps, cfg.reduction) * dsig
    if cfg.alpha < 1.0:
        if cfg.hinge_scores == HINGE_ON_PROBS:
            d_logits = d_logits + (1.0 - cfg.alpha) * hinge_grad(t, p) * dsig
        else:
            d_logits = d_logits + (1.0 - cfg.alpha) * hinge_grad(t, _require_logits(logits))
    return d_logits.reshape(np.shape(logits))


def activity_signature(targets, probs, logits, cfg: LossConfig) -> bytes:
    """Fingerprint of the piecewise regions the loss currently sits in: the
    hinge active-pair pattern plus the BCE clamp pattern. Finite-difference
    checks skip coordinates whose perturbation changes this signature."""
    t, p = _as_batch(targets, probs)
    clamp = ((p < cfg.bce_eps) | (p > 1.0 - cfg.bce_eps)).tobytes()
    s = p if cfg.hinge_scores == HINGE_ON_PROBS else np.atleast_2d(np.asarray(logits))
    bits = []
    for row in range(t.shape[0]):
        pos, neg = _sample_pairs(t[row])
        if pos.size == 0 or neg.size == 0:
            continue
        margins = 1.0 - (s[row, pos][:, None] - s[row, neg][None, :])
        bits.append((margins > 0.0).tobytes())
    return clamp + b"|" + b"".join(bits)


def min_kink_distance(targets, probs, logits, cfg: LossConfig) -> float:
    """Smallest |margin| over all hinge pairs (inf when no pairs exist)."""
    t, _ = _as_batch(targets, probs)
    s = np.atleast_2d(
        np.asarray(probs if cfg.hinge_scores == HINGE_ON_PROBS else logits, dtype=np.float64)
    )
    best = np.inf
    for row in range(t.shape[0]):
        pos, neg = _sample_pairs(t[row])
        if pos.size == 0 or neg.size == 0:
            continue
        margins = 1.0 - (s[row, pos][:, None] - s[row, neg][None, :])
        best = min(best, float(np.abs(margins).min()))
    return best


def _require_logits(logits):
    if logits is None:
        raise ValidationError("hinge on logits requested but no logits were given")
    return logits
