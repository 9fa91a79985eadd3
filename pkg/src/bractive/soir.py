"""Subject-of-interest retrieval: build a subject's feature in another modality.

Given a text subject feature as query and one modality's token sequence, the
retrieved feature is the softmax-over-cosine-similarity weighted sum of the
tokens. The same operation serves both modalities: visual tokens yield the
subject's visual feature, brain-grid tokens its fMRI feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, l2_normalize, matmul, softmax

__all__ = ["RetrievedSubjectFeature", "retrieve"]


@dataclass
class RetrievedSubjectFeature:
    feature: Tensor   # [..., d] convex combination of the tokens
    weights: Tensor   # [..., N] nonnegative, sums to 1 along the token axis


def retrieve(query: Tensor, tokens: Tensor, temperature: float = 1.0) -> RetrievedSubjectFeature:
    """Similarity-softmax aggregation of `tokens` against `query`.

    Accepts a single query [d] with tokens [N, d], or batched queries
    [B, k, d] with tokens [B, N, d]. Cosine similarity makes the result
    invariant to positive rescaling of the query; temperature 1 reproduces a
    plain softmax over similarities, smaller values sharpen the retrieval.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    single = query.ndim == 1
    if single:
        if tokens.ndim != 2:
            raise ShapeError(f"expected [N, d] tokens for a vector query, got {tokens.shape}")
        query = query.reshape(1, 1, -1)
        tokens = tokens.reshape((1,) + tokens.shape)
    if tokens.shape[1] == 0:
        raise ShapeError("cannot retrieve from an empty token sequence")
    if query.shape[-1] != tokens.shape[-1]:
        raise ShapeError(f"feature widths disagree: {query.shape} vs {tokens.shape}")

    qn = l2_normalize(query)
    tn = l2_normalize(tokens)
    sims = matmul(qn, tn.swapaxes(-1, -2))                 # [B, k, N]
    weights = softmax(sims * (1.0 / temperature), axis=-1)
    feature = matmul(weights, tokens)                      # [B, k, d]

    if single:
        n = tokens.shape[1]
        return RetrievedSubjectFeature(feature=feature.reshape(-1), weights=weights.reshape(n))
    return RetrievedSubjectFeature(feature=feature, weights=weights)
