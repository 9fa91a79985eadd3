"""Modality encoders: patchified images, flattened-2D brain grids, token text.

All three share the same pre-norm transformer backbone and the same embedding
width, so their context (CLS) features and token features live in one space.
The text encoder is a frozen, seeded-random network: it never trains, serving
as a fixed discriminative token→feature anchor the other two modalities align
to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

__all__ = [
    "EncoderConfig",
    "EncodedSequence",
    "FlattenMap",
    "VisualEncoder",
    "FmriEncoder",
    "TextEncoder",
    "patchify",
    "patchify_batch",
    "flatten_fmri",
    "unflatten_fmri",
    "trunc_normal",
]


@dataclass
class EncoderConfig:
    """Shared shape/width configuration for the three encoders.

    Desk-scale defaults; `paper_parity()` returns the full-scale variant
    (d=1024, 224×224 inputs, 77-token context).
    """

    d: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    patch: int = 8                # visual patch size p
    fmri_patch: int = 8           # flattened-grid patch size p_f
    image_size: int = 32
    image_channels: int = 1
    grid_height: int = 32
    grid_width: int = 32
    context_length: int = 16      # text positions N_c
    vocab_size: int = 32
    seed: int = 0
    init_std: float = 0.02
    text_embed_scale: float = 1.0  # frozen-text embedding table scale
    text_stack_std: float = 0.15   # frozen-text transformer weight scale
    text_pos_keep: int = 10        # leading dims spared from sign flipping
    text_layer_scale: float = 0.05  # frozen-text residual branch gain
    layer_scale_init: float = 0.1  # MLP residual branch gain at init (trainable stacks)
    attn_gain_init: float = 0.01   # attention residual branch gain at init
    attn_gain_trainable: bool = False  # let the attention gain move during training
    use_patch_pos: bool = False    # additive positional embeddings in patch encoders
    center_tokens: bool = True     # subtract the per-sample mean token (patch encoders)

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.image_size % self.patch != 0:
            raise ValueError("image size must be divisible by the patch size")
        if self.grid_height % self.fmri_patch or self.grid_width % self.fmri_patch:
            raise ValueError("grid dims must be divisible by the fMRI patch size")
        if not 0 <= self.text_pos_keep <= self.d:
            raise ValueError("text_pos_keep must lie in [0, d]")
        if self.layer_scale_init <= 0:
            raise ValueError("layer_scale_init must be positive")
        if self.text_layer_scale <= 0:
            raise ValueError("text_layer_scale must be positive")
        if self.attn_gain_init <= 0:
            raise ValueError("attn_gain_init must be positive")

    @property
    def num_image_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def num_grid_patches(self) -> int:
        return (self.grid_height // self.fmri_patch) * (self.grid_width // self.fmri_patch)

    @staticmethod
    def paper_parity() -> "EncoderConfig":
        return EncoderConfig(
            d=1024, layers=2, heads=8, patch=16, fmri_patch=16,
            image_size=224, image_channels=3,
            grid_height=224, grid_width=224,
            context_length=77, vocab_size=512, seed=0,
            use_patch_pos=True,
        )


@dataclass
class EncodedSequence:
    """One modality's encoder output: context feature plus per-token features."""

    cls: Tensor                      # [B, d]
    tokens: Tensor                   # [B, N, d]
    valid_mask: np.ndarray | None = None  # [B, N] booleans (text only)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) clipped to ±2 std, the usual transformer init."""
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


# ---------------------------------------------------------------------------
# flatten map: 1-D voxel vector <-> 2-D grid
# ---------------------------------------------------------------------------

class FlattenMap:
    """Injective map from voxel index to a (row, col) grid cell.

    Stands in for a cortical-surface flattening: the algebra downstream only
    needs a bijection between the voxel vector and the covered grid cells.
    """

    def __init__(self, height: int, width: int, rows: np.ndarray, cols: np.ndarray):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.shape != cols.shape or rows.ndim != 1:
            raise ValueError("rows/cols must be equal-length 1-D index arrays")
        if rows.size and (rows.min() < 0 or rows.max() >= height
                          or cols.min() < 0 or cols.max() >= width):
            raise ValueError("cell coordinates out of grid bounds")
        flat = rows * width + cols
        if np.unique(flat).size != flat.size:
            raise ValueError("voxel_to_cell must be injective")
        self.height = height
        self.width = width
        self.rows = rows
        self.cols = cols
        self.covered = np.zeros((height, width), dtype=bool)
        self.covered[rows, cols] = True

    @property
    def num_voxels(self) -> int:
        return self.rows.size

    @staticmethod
    def identity(height: int, width: int) -> "FlattenMap":
        """Row-major full coverage: voxel i -> (i // width, i % width)."""
        idx = np.arange(height * width)
        return FlattenMap(height, width, idx // width, idx % width)

    def flatten(self, voxels: np.ndarray) -> np.ndarray:
        voxels = np.asarray(voxels, dtype=np.float64)
        if voxels.shape != (self.num_voxels,):
            raise ShapeError(f"expected {self.num_voxels} voxels, got shape {voxels.shape}")
        grid = np.zeros((self.height, self.width), dtype=np.float64)
        grid[self.rows, self.cols] = voxels
        return grid

    def unflatten(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != (self.height, self.width):
            raise ShapeError(f"expected grid {self.height}x{self.width}, got {grid.shape}")
        return grid[self.rows, self.cols]

    def save(self, path) -> None:
        payload = {
            "height": self.height,
            "width": self.width,
            "cells": [[int(r), int(c)] for r, c in zip(self.rows, self.cols)],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @staticmethod
    def load(path) -> "FlattenMap":
        payload = json.loads(Path(path).read_text())
        cells = np.asarray(payload["cells"], dtype=np.int64).reshape(-1, 2)
        return FlattenMap(payload["height"], payload["width"], cells[:, 0], cells[:, 1])


def flatten_fmri(voxels: np.ndarray, fmap: FlattenMap) -> np.ndarray:
    """Project a 1-D voxel vector onto its 2-D grid; uncovered cells are 0."""
    return fmap.flatten(voxels)


def unflatten_fmri(grid: np.ndarray, fmap: FlattenMap) -> np.ndarray:
    """Read covered grid cells back into voxel order."""
    return fmap.unflatten(grid)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split h×w(×c) pixels into non-overlapping p×p patches, row-major.

    Returns [N, p*p*c] with N = h*w/p².
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image dims {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    blocks = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch * patch * c)


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    return np.stack([patchify(img, patch) for img in images])


# ---------------------------------------------------------------------------
# transformer backbone
# ---------------------------------------------------------------------------

class TransformerStack:
    """Pre-norm multi-head self-attention blocks with GELU MLPs."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 prefix: str, trainable: bool, ls_init: float | None = None,
                 attn_ls_init: float | None = None,
                 attn_ls_trainable: bool | None = None):
        if ls_init is None:
            ls_init = cfg.layer_scale_init
        if attn_ls_init is None:
            attn_ls_init = ls_init
        if attn_ls_trainable is None:
            attn_ls_trainable = trainable
        d = cfg.d
        hidden = int(round(d * cfg.mlp_ratio))
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}

        def p(name, shape, std=None):
            data = trunc_normal(rng, shape, cfg.init_std if std is None else std)
            t = Tensor(data, requires_grad=trainable)
            self.params[f"{prefix}.{name}"] = t
            return t

        def zeros(name, shape):
            t = Tensor(np.zeros(shape), requires_grad=trainable)
            self.params[f"{prefix}.{name}"] = t
            return t

        def const(name, shape, value, grad=trainable):
            t = Tensor(np.full(shape, float(value)), requires_grad=grad)
            self.params[f"{prefix}.{name}"] = t
            return t

        def ones(name, shape):
            return const(name, shape, 1.0)

        self.blocks = []
        for i in range(cfg.layers):
            blk = {
                "ln1_g": ones(f"block{i}.ln1.gain", (d,)),
                "ln1_b": zeros(f"block{i}.ln1.bias", (d,)),
                "wq": p(f"block{i}.attn.wq", (d, d)),
                "wk": p(f"block{i}.attn.wk", (d, d)),
                "wv": p(f"block{i}.attn.wv", (d, d)),
                "wo": p(f"block{i}.attn.wo", (d, d)),
                "bo": zeros(f"block{i}.attn.bo", (d,)),
                "ln2_g": ones(f"block{i}.ln2.gain", (d,)),
                "ln2_b": zeros(f"block{i}.ln2.bias", (d,)),
                "w1": p(f"block{i}.mlp.w1", (d, hidden)),
                "b1": zeros(f"block{i}.mlp.b1", (hidden,)),
                "w2": p(f"block{i}.mlp.w2", (hidden, d)),
                "b2": zeros(f"block{i}.mlp.b2", (d,)),
                # per-channel residual branch gains: a small init keeps each
                # token dominated by its own patch embedding, so token features
                # keep spatial identity instead of smearing across the sequence.
                # The attention gain is the only cross-token mixing channel, so
                # it gets its own (optionally frozen) setting.
                "ls1": const(f"block{i}.ls1", (d,), attn_ls_init,
                             grad=trainable and attn_ls_trainable),
                "ls2": const(f"block{i}.ls2", (d,), ls_init),
            }
            self.blocks.append(blk)
        self.final_g = ones("final_ln.gain", (d,))
        self.final_b = zeros("final_ln.bias", (d,))

    def _attention(self, x: Tensor, blk) -> Tensor:
        b, n, d = x.shape
        heads = self.cfg.heads
        dh = d // heads
        x2 = x.reshape(b * n, d)

        def split(w):
            return matmul(x2, w).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split(blk["wq"]), split(blk["wk"]), split(blk["wv"])
        logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        weights = softmax(logits, axis=-1)
        mixed = matmul(weights, v)                       # [b, heads, n, dh]
        merged = mixed.transpose(0, 2, 1, 3).reshape(b * n, d)
        return (matmul(merged, blk["wo"]) + blk["bo"]).reshape(b, n, d)

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = x + blk["ls1"] * self._attention(layer_norm(x, blk["ln1_g"], blk["ln1_b"]), blk)
            b, n, d = x.shape
            h = layer_norm(x, blk["ln2_g"], blk["ln2_b"]).reshape(b * n, d)
            h = gelu(matmul(h, blk["w1"]) + blk["b1"])
            h = (matmul(h, blk["w2"]) + blk["b2"]).reshape(b, n, d)
            x = x + blk["ls2"] * h
        return layer_norm(x, self.final_g, self.final_b)


class _PatchSequenceEncoder:
    """Shared machinery for encoders whose input is a patch sequence."""

    def __init__(self, cfg: EncoderConfig, patch_width: int, num_patches: int,
                 seed_offset: int, prefix: str, trainable: bool = True):
        self.cfg = cfg
        self.num_patches = num_patches
        self.trainable = trainable
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(seed_offset,)))
        self.params: dict[str, Tensor] = {}

        def reg(name, data):
            t = Tensor(data, requires_grad=trainable)
            self.params[f"{prefix}.{name}"] = t
            return t

        self.proj_w = reg("proj.w", trunc_normal(rng, (patch_width, cfg.d), cfg.init_std))
        self.proj_b = reg("proj.b", np.zeros(cfg.d))
        self.cls = reg("cls", trunc_normal(rng, (1, cfg.d), cfg.init_std))
        pos_data = trunc_normal(rng, (num_patches + 1, cfg.d), cfg.init_std)
        if not cfg.use_patch_pos:
            # positional embeddings off: zeroed and frozen, so token features
            # carry patch content only and no position-keyed shortcut exists
            pos_data = np.zeros_like(pos_data)
        self.pos = Tensor(pos_data, requires_grad=trainable and cfg.use_patch_pos)
        self.params[f"{prefix}.pos"] = self.pos
        self.stack = TransformerStack(cfg, rng, prefix, trainable,
                                      attn_ls_init=cfg.attn_gain_init,
                                      attn_ls_trainable=cfg.attn_gain_trainable)
        self.params.update(self.stack.params)

    def encode(self, patches: np.ndarray) -> EncodedSequence:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        b, n, width = patches.shape
        if n != self.num_patches or width != self.proj_w.shape[0]:
            raise ShapeError(
                f"expected patches [{self.num_patches}, {self.proj_w.shape[0]}], "
                f"got [{n}, {width}]")
        x = matmul(Tensor(patches.reshape(b * n, width)), self.proj_w) + self.proj_b
        x = x.reshape(b, n, self.cfg.d)
        cls = self.cls.broadcast_to((b, 1, self.cfg.d))
        x = concat([cls, x], axis=1) + self.pos
        out = self.stack.forward(x)
        tokens = out[:, 1:, :]
        if self.cfg.center_tokens:
            # Remove the per-sample common mode across the sequence. Every
            # token shares a large common direction (biases, norm offsets);
            # under unit-norm cosine it swamps token-specific content, so
            # similarity ranking needs the deviations, not the shared mass.
            tokens = tokens - tokens.mean(axis=1, keepdims=True)
        return EncodedSequence(cls=out[:, 0, :], tokens=tokens)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class VisualEncoder(_PatchSequenceEncoder):
    """Image patches -> context feature + per-patch features."""

    def __init__(self, cfg: EncoderConfig):
        width = cfg.patch * cfg.patch * cfg.image_channels
        super().__init__(cfg, width, cfg.num_image_patches, seed_offset=1,
                         prefix="visual", trainable=True)

    def encode_image(self, image: np.ndarray) -> EncodedSequence:
        return self.encode(patchify(image, self.cfg.patch)[None])

    def encode_images(self, images: np.ndarray) -> EncodedSequence:
        return self.encode(patchify_batch(images, self.cfg.patch))


class FmriEncoder(_PatchSequenceEncoder):
    """Flattened 2-D brain grid -> context feature + per-patch features."""

    def __init__(self, cfg: EncoderConfig):
        width = cfg.fmri_patch * cfg.fmri_patch
        super().__init__(cfg, width, cfg.num_grid_patches, seed_offset=2,
                         prefix="fmri", trainable=True)

    def encode_grid(self, grid: np.ndarray) -> EncodedSequence:
        return self.encode_grids(np.asarray(grid)[None])

    def encode_grids(self, grids: np.ndarray) -> EncodedSequence:
        grids = np.asarray(grids, dtype=np.float64)
        patches = np.stack([patchify(g[:, :, None], self.cfg.fmri_patch) for g in grids])
        return self.encode(patches)


class TextEncoder:
    """Frozen deterministic token-sequence encoder.

    Token vectors are rows of a seeded orthogonal embedding table (distinct
    tokens never interfere with one another), modulated by multiplicative
    sign-flip positional codes, then refined by a fixed (never trained)
    transformer stack with a small residual gain. The summary feature is the
    mean over valid token features, which superposes the per-position codes
    so slot occupancy stays linearly decodable from the summary alone.
    Identical seed + identical tokens give bitwise-identical features.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.trainable = False
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
        scale = cfg.text_embed_scale * np.sqrt(cfg.d)
        raw = rng.normal(0.0, 1.0, size=(max(cfg.vocab_size, cfg.d), cfg.d))
        if cfg.vocab_size <= cfg.d:
            q, _ = np.linalg.qr(raw.T)
            table = q.T[:cfg.vocab_size] * scale
        else:  # more tokens than dims: orthogonality impossible, fall back
            table = raw[:cfg.vocab_size] / np.sqrt(cfg.d) * scale
        self.embed = Tensor(table)
        # Sign-flip positional codes, applied multiplicatively. The leading
        # text_pos_keep coordinates stay +1 so a token keeps one consistent
        # feature direction across positions (retrieval queries rely on it),
        # while the flipped remainder makes position linearly decodable from
        # the summary feature.
        pos = rng.choice([-1.0, 1.0], size=(cfg.context_length, cfg.d))
        pos[:, :cfg.text_pos_keep] = 1.0
        self.pos = Tensor(pos)
        frozen_cfg = EncoderConfig(**{**cfg.__dict__, "init_std": cfg.text_stack_std})
        self.stack = TransformerStack(frozen_cfg, rng, "text", trainable=False,
                                      ls_init=cfg.text_layer_scale)
        self.params = {"text.embed": self.embed, "text.pos": self.pos}
        self.params.update(self.stack.params)

    def encode_tokens(self, token_ids: np.ndarray,
                      valid_mask: np.ndarray | None = None) -> EncodedSequence:
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
            if valid_mask is not None:
                valid_mask = np.asarray(valid_mask)[None]
        b, n = token_ids.shape
        if n != self.cfg.context_length:
            raise ShapeError(f"expected {self.cfg.context_length} token slots, got {n}")
        if token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.cfg.vocab_size}): "
                f"{int(token_ids.max())}")
        if valid_mask is None:
            valid_mask = np.ones((b, n), dtype=bool)
        else:
            valid_mask = np.asarray(valid_mask, dtype=bool)
            if valid_mask.shape != (b, n):
                raise ShapeError("valid_mask shape must match token_ids")
        x = self.embed[token_ids] * self.pos           # [b, n, d], no grad (frozen)
        tokens = self.stack.forward(x)
        # Masked mean pool: pads contribute nothing to the summary feature.
        w = valid_mask.astype(np.float64)
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        cls = (tokens * w[:, :, None]).sum(axis=1)
        return EncodedSequence(cls=cls, tokens=tokens, valid_mask=valid_mask)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)
