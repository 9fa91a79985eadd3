"""Contrastive objectives: the symmetric pairwise primitive, the global
context loss over CLS features, the confidence-weighted per-proposal loss,
and their weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, l2_normalize, logsumexp, matmul

__all__ = ["LossConfig", "SlotFeatures", "BatchFeatures",
           "contras", "global_loss", "weighted_soi_loss", "total_loss"]


@dataclass
class LossConfig:
    """Desk-scale defaults; `paper_parity()` restores the published regime.

    The desk default temperature is deliberately soft: with a hard softmax
    the batch-discrimination gradient concentrates on the hardest (same
    -class) negatives, which punishes class-consistent brain features and
    stalls localization. A soft temperature spreads it, so the class-level
    alignment signal survives.
    """

    sigma: float = 2.0             # contrastive temperature, fixed (not learned)
    lambda_global: float = 1.0
    lambda_soi: float = 1.0
    normalize_features: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.lambda_global < 0 or self.lambda_soi < 0:
            raise ValueError("loss weights must be nonnegative")

    @staticmethod
    def paper_parity() -> "LossConfig":
        return LossConfig(sigma=0.07)


@dataclass
class SlotFeatures:
    """One proposal slot across the batch: confidences plus tri-modal features."""

    confidence: Tensor   # [N]
    text: Tensor         # [N, d]
    visual: Tensor       # [N, d]
    fmri: Tensor         # [N, d]


@dataclass
class BatchFeatures:
    """Per-sample CLS triples and the per-slot subject feature triples."""

    text_cls: Tensor     # [N, d]
    visual_cls: Tensor   # [N, d]
    fmri_cls: Tensor     # [N, d]
    slots: list[SlotFeatures] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.text_cls.shape[0]


def _directional(logits: Tensor, weights: Tensor | None) -> Tensor:
    """-(1/N) Σ_i w_i · log softmax_row(i)[i], the one-direction InfoNCE term."""
    n = logits.shape[0]
    idx = np.arange(n)
    log_prob = logits[idx, idx] - logsumexp(logits, axis=1)
    if weights is not None:
        log_prob = log_prob * weights
    return -log_prob.sum() / float(n)


def contras(x: Tensor, y: Tensor, sigma: float, normalize: bool = True,
            weights: Tensor | None = None) -> Tensor:
    """Symmetric InfoNCE between two feature batches with matched rows.

    Row i of x and row i of y are the positive pair; all other rows of the
    opposite batch are that row's negatives. Both softmax directions are
    averaged per-sample and summed. With `weights` given, sample i's positive
    log terms in both directions are multiplied by weights[i].
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"contras expects matching [N, d] batches, got {x.shape} and {y.shape}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if normalize:
        x = l2_normalize(x)
        y = l2_normalize(y)
    logits = matmul(x, y.transpose()) * (1.0 / sigma)
    return _directional(logits, weights) + _directional(logits.transpose(), weights)


def global_loss(batch: BatchFeatures, cfg: LossConfig) -> Tensor:
    """Sum of the three pairwise contrastive terms on the CLS features."""
    if batch.batch_size < 1:
        raise ShapeError("empty batch")
    t, p, f = batch.text_cls, batch.visual_cls, batch.fmri_cls
    norm = cfg.normalize_features
    return (contras(t, p, cfg.sigma, norm)
            + contras(t, f, cfg.sigma, norm)
            + contras(f, p, cfg.sigma, norm))


def weighted_soi_loss(batch: BatchFeatures, cfg: LossConfig) -> Tensor:
    """Confidence-weighted tri-modal contrastive loss summed over proposal slots.

    Each sample's positive-pair terms in slot j are scaled by that sample's
    own slot-j confidence; negatives are the other samples' slot-j features.
    Linear in the confidences, and exactly the unweighted per-slot sum when
    every confidence is 1.
    """
    if not batch.slots:
        raise ShapeError("batch carries no proposal slots")
    norm = cfg.normalize_features
    total = None
    for slot in batch.slots:
        if slot.text.shape != slot.visual.shape or slot.text.shape != slot.fmri.shape:
            raise ShapeError("slot feature shapes disagree")
        w = slot.confidence
        term = (contras(slot.text, slot.visual, cfg.sigma, norm, weights=w)
                + contras(slot.text, slot.fmri, cfg.sigma, norm, weights=w)
                + contras(slot.fmri, slot.visual, cfg.sigma, norm, weights=w))
        total = term if total is None else total + term
    return total


def total_loss(batch: BatchFeatures, cfg: LossConfig) -> Tensor:
    """λg · global + λm · weighted-SOI.

    A term with zero weight is skipped entirely, so its parameters stay out
    of the gradient tape (and untouched by decoupled weight decay).
    """
    parts = []
    if cfg.lambda_global > 0:
        parts.append(global_loss(batch, cfg) * cfg.lambda_global)
    if cfg.lambda_soi > 0:
        parts.append(weighted_soi_loss(batch, cfg) * cfg.lambda_soi)
    if not parts:
        return Tensor(0.0)
    out = parts[0]
    for extra in parts[1:]:
        out = out + extra
    return out
