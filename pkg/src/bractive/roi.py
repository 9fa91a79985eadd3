"""Brain region-of-interest localization and the dice evaluation metric.

A subject feature is compared (cosine) against the brain-grid patch tokens,
the per-patch similarities are reshaped to the patch grid, upsampled back to
grid resolution, mapped into voxel space through the flatten map, and
thresholded into a binary mask. The same pipeline, minus the voxel mapping,
produces image-space saliency from visual patch tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, upsample2d
from .encoders import FlattenMap

__all__ = ["AttentionMap", "RoiMask", "LocalizeConfig",
           "attention_map", "visual_attention_map", "threshold_mask", "dice",
           "export_map_csv", "export_map_pgm", "export_mask_csv"]


@dataclass
class LocalizeConfig:
    scale: int | None = None      # upsample factor; defaults to the fMRI patch size
    gamma: float = 0.5            # mask threshold over cosine values
    mode: str = "bilinear"        # or "nearest" for exact per-patch blocks

    def __post_init__(self):
        if self.scale is not None and self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not -1.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [-1, 1]")
        if self.mode not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation mode '{self.mode}'")


@dataclass
class AttentionMap:
    """Per-voxel (or per-pixel) cosine correlation with a subject feature."""

    values: np.ndarray            # [N_F] voxel space, or [h, w] image space
    provenance: str = ""


@dataclass
class RoiMask:
    bits: np.ndarray              # boolean, one per voxel
    gamma: float

    @property
    def num_set(self) -> int:
        return int(self.bits.sum())


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _similarity_grid(query, tokens, grid_rows: int, grid_cols: int) -> np.ndarray:
    """Normalized token-vs-query similarities arranged on the patch grid."""
    q = _as_array(query).reshape(-1)
    t = _as_array(tokens)
    if t.ndim != 2 or t.shape[1] != q.shape[0]:
        raise ShapeError(f"tokens {t.shape} incompatible with query width {q.shape[0]}")
    if t.shape[0] != grid_rows * grid_cols:
        raise ShapeError(f"{t.shape[0]} tokens do not tile a {grid_rows}x{grid_cols} patch grid")
    qn = q / max(np.linalg.norm(q), 1e-12)
    tn = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return (tn @ qn).reshape(grid_rows, grid_cols)


def attention_map(query, tokens, fmap: FlattenMap, cfg: LocalizeConfig,
                  patch: int | None = None, provenance: str = "fmri") -> AttentionMap:
    """Voxel-space correlation map of a subject feature over the brain grid.

    `patch` is the grid patch size used by the encoder; the upsample scale
    defaults to it so one patch similarity covers exactly its grid cells.
    """
    n_tokens = _as_array(tokens).shape[0]
    scale = cfg.scale
    if scale is None:
        if patch is None:
            raise ValueError("either cfg.scale or the encoder patch size is required")
        scale = patch
    if n_tokens * scale * scale != fmap.height * fmap.width:
        raise ShapeError(
            f"{n_tokens} tokens at scale {scale} do not cover a "
            f"{fmap.height}x{fmap.width} grid")
    rows = fmap.height // scale
    cols = fmap.width // scale
    sims = _similarity_grid(query, tokens, rows, cols)
    grid = upsample2d(sims, scale, cfg.mode).data
    return AttentionMap(values=fmap.unflatten(grid), provenance=provenance)


def visual_attention_map(query, patch_tokens, image_size: tuple[int, int],
                         patch: int, cfg: LocalizeConfig,
                         provenance: str = "visual") -> AttentionMap:
    """Image-space saliency: same pipeline with visual patch tokens, no voxel map."""
    h, w = image_size
    if h % patch or w % patch:
        raise ShapeError(f"image dims {h}x{w} not divisible by patch size {patch}")
    sims = _similarity_grid(query, patch_tokens, h // patch, w // patch)
    grid = upsample2d(sims, patch, cfg.mode).data
    if grid.shape != (h, w):
        raise ShapeError(f"saliency grid {grid.shape} does not match image {h}x{w}")
    return AttentionMap(values=grid, provenance=provenance)


def threshold_mask(att: AttentionMap, gamma: float) -> RoiMask:
    """Strict per-voxel comparison: set iff correlation > gamma."""
    if not -1.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [-1, 1]")
    return RoiMask(bits=att.values > gamma, gamma=gamma)


def dice(a: RoiMask | np.ndarray, b: RoiMask | np.ndarray) -> float:
    """Overlap score 2|a∧b| / (|a|+|b|); two empty masks count as a perfect 1."""
    abits = a.bits if isinstance(a, RoiMask) else np.asarray(a, dtype=bool)
    bbits = b.bits if isinstance(b, RoiMask) else np.asarray(b, dtype=bool)
    if abits.shape != bbits.shape:
        raise ShapeError(f"mask lengths disagree: {abits.shape} vs {bbits.shape}")
    denom = int(abits.sum()) + int(bbits.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((abits & bbits).sum()) / denom


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def export_map_csv(att: AttentionMap, path) -> None:
    """One `index,value` row per voxel (or per pixel, row-major)."""
    flat = att.values.reshape(-1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "value"])
        for i, v in enumerate(flat):
            writer.writerow([i, f"{v:.9g}"])


def export_map_pgm(values: np.ndarray, path) -> None:
    """8-bit grayscale PGM; values linearly mapped from [-1, 1] to [0, 255]."""
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError("PGM export needs a 2-D grid")
    scaled = np.clip((grid + 1.0) * 0.5, 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def export_mask_csv(mask: RoiMask, path) -> None:
    """CSV listing the set voxel indices, one per row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["voxel"])
        for i in np.flatnonzero(mask.bits):
            writer.writerow([int(i)])
