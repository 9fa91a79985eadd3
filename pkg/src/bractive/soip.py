"""Subject-of-interest proposal: which caption positions name attended subjects.

A single learned matrix maps the text context feature to one confidence per
caption slot (sigmoid, so several subjects can score high at once); the k
most confident valid slots are proposed and their token features gathered.
Index selection is non-differentiable by construction; gradients reach the
matrix only through the confidences' multiplicative role in the weighted loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, sigmoid, topk_rows
from .encoders import EncoderConfig, trunc_normal

__all__ = ["SoipParams", "SubjectProposals", "propose"]


@dataclass
class SoipParams:
    """The proposal matrix, one row of width d per caption slot."""

    weight: Tensor  # [N_c, d], trainable

    @staticmethod
    def init(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> "SoipParams":
        rng = rng or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(4,)))
        data = trunc_normal(rng, (cfg.context_length, cfg.d), cfg.init_std)
        return SoipParams(weight=Tensor(data, requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"soip.weight": self.weight}


@dataclass
class SubjectProposals:
    """Top-k proposal confidences, caption indices and gathered token features."""

    confidences: Tensor   # [B, k], descending per row, each in (0, 1)
    indices: np.ndarray   # [B, k] caption positions, distinct, never padded
    features: Tensor      # [B, k, d] text token features at those positions


def propose(t_cls: Tensor, text_tokens: Tensor, valid_mask: np.ndarray,
            params: SoipParams, k: int) -> SubjectProposals:
    """Score every caption slot from the context feature and keep the top k.

    Padded slots are forced to confidence 0 before selection, so they can
    only be proposed when k exceeds the number of real candidates, and then
    carry zero loss weight.
    """
    squeeze = t_cls.ndim == 1
    if squeeze:
        t_cls = t_cls.reshape(1, -1)
        text_tokens = text_tokens.reshape((1,) + text_tokens.shape)
        valid_mask = np.asarray(valid_mask)[None]
    b, d = t_cls.shape
    n_ctx = params.weight.shape[0]
    if text_tokens.shape != (b, n_ctx, d):
        raise ShapeError(
            f"text tokens shape {text_tokens.shape} inconsistent with "
            f"context={n_ctx}, d={d}, batch={b}")
    valid_mask = np.asarray(valid_mask, dtype=bool)
    min_valid = int(valid_mask.sum(axis=1).min())
    if k > min_valid:
        raise ShapeError(f"k={k} exceeds the minimum valid position count {min_valid}")

    z = sigmoid(matmul(t_cls, params.weight.transpose()))   # [B, N_c]
    z = z * valid_mask.astype(np.float64)
    confidences, indices = topk_rows(z, k)
    rows = np.arange(b)[:, None]
    gathered = text_tokens[rows, indices]                   # [B, k, d]

    if squeeze:
        return SubjectProposals(confidences=confidences.reshape(k),
                                indices=indices[0],
                                features=gathered.reshape(k, d))
    return SubjectProposals(confidences=confidences, indices=indices, features=gathered)
