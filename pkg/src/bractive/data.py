"""Synthetic tri-modal corpus with planted ground truth.

Each sample couples an image containing class-textured blobs ("subjects"),
a caption whose tokens name those subjects at randomized positions, a brain
grid whose class-specific voxel blocks activate when the class is present,
and the ground-truth voxel masks needed for dice evaluation. The corpus is
deterministic per seed, written in bit-exact file formats, and split into
five class-balanced folds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import FlattenMap
from .io import CorruptFileError, read_tensor, write_tensor

__all__ = ["GenConfig", "SubjectClass", "Sample", "DatasetManifest", "Dataset",
           "generate_dataset", "load_dataset", "kfold_split", "NUM_FOLDS", "PAD_TOKEN"]

NUM_FOLDS = 5
PAD_TOKEN = 0


@dataclass
class GenConfig:
    num_classes: int = 6
    num_samples: int = 2500
    max_subjects_per_sample: int = 2
    image_size: int = 32
    image_channels: int = 1
    grid_height: int = 32
    grid_width: int = 32
    roi_patch: int = 8             # block alignment unit on the brain grid
    roi_block_patches: int = 1     # ROI block side length, in patch units
    align_blocks: bool = True      # False offsets blocks to stress interpolation
    context_length: int = 16
    vocab_size: int = 32
    noise_std: float = 0.1
    mu_on: float = 1.0
    pattern_std: float = 0.5       # population-code amplitude within an ROI block
    blob_size: int = 12
    filler_vocab_size: int = 1     # distinct filler tokens used in captions
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 subject classes (C >= 2)")
        if not 1 <= self.max_subjects_per_sample <= self.context_length:
            raise ValueError("subjects-per-sample must be in [1, context_length]")
        if self.vocab_size < self.num_classes + 1 + self.filler_vocab_size:
            raise ValueError("vocabulary too small for pad + subject + filler tokens")
        if self.filler_vocab_size < 1:
            raise ValueError("need at least one filler token")
        if self.pattern_std < 0:
            raise ValueError("pattern_std must be nonnegative")
        if self.blob_size > self.image_size:
            raise ValueError("blob size exceeds the image")


@dataclass
class SubjectClass:
    id: int
    token_id: int
    roi_voxels: np.ndarray         # planted brain block, voxel indices
    texture_seed: int              # drives the class's visual signature


@dataclass
class Sample:
    id: int
    image: np.ndarray              # [h, w, c] in [0, 1]
    caption: np.ndarray            # [N_c] token ids, 0-padded suffix
    valid_mask: np.ndarray         # [N_c] booleans, true on a prefix
    fmri: np.ndarray               # [N_F] voxel activations
    present_classes: list[int]
    gt_masks: dict[int, np.ndarray]  # class id -> boolean voxel mask


@dataclass
class DatasetManifest:
    config: GenConfig
    classes: list[SubjectClass]
    folds: list[list[int]]
    sample_records: list[dict] = field(default_factory=list)

    @property
    def num_voxels(self) -> int:
        return self.config.grid_height * self.config.grid_width

    @property
    def subject_token_ids(self) -> dict[int, int]:
        return {c.id: c.token_id for c in self.classes}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _plant_roi_blocks(cfg: GenConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint voxel blocks, one per class, tiled over the brain grid."""
    side = cfg.roi_patch * cfg.roi_block_patches
    rows_fit = cfg.grid_height // side
    cols_fit = cfg.grid_width // side
    if rows_fit * cols_fit < cfg.num_classes:
        raise ValueError(
            f"{cfg.num_classes} ROI blocks of side {side} do not fit a "
            f"{cfg.grid_height}x{cfg.grid_width} grid")
    slots = rng.permutation(rows_fit * cols_fit)[:cfg.num_classes]
    blocks = []
    for slot in slots:
        r0 = (slot // cols_fit) * side
        c0 = (slot % cols_fit) * side
        if not cfg.align_blocks:
            # Shift off the patch lattice (clamped) to stress interpolation.
            r0 = min(r0 + cfg.roi_patch // 2, cfg.grid_height - side)
            c0 = min(c0 + cfg.roi_patch // 2, cfg.grid_width - side)
        rr, cc = np.meshgrid(np.arange(r0, r0 + side), np.arange(c0, c0 + side),
                             indexing="ij")
        blocks.append((rr * cfg.grid_width + cc).reshape(-1))
    return blocks


def _class_texture(cfg: GenConfig, texture_seed: int) -> np.ndarray:
    """A fixed oriented grating per class, values in [0.5, 1.0]."""
    trng = np.random.default_rng(texture_seed)
    fx, fy = trng.uniform(0.3, 1.2, size=2)
    phase = trng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(cfg.blob_size), np.arange(cfg.blob_size),
                         indexing="ij")
    wave = np.sin(fx * xx + fy * yy + phase)
    return 0.5 + 0.5 * np.abs(wave)


def _class_pattern(cfg: GenConfig, texture_seed: int) -> np.ndarray:
    """A fixed zero-mean population code over the class's ROI voxels.

    Each class activates its region with a distinct spatial pattern on top of
    the elevated mean, so region content (not just location) identifies the
    class. Exactly zero-mean, keeping the block's mean activation at mu_on.
    """
    side = cfg.roi_patch * cfg.roi_block_patches
    prng = np.random.default_rng(np.random.SeedSequence(texture_seed, spawn_key=(1,)))
    pattern = prng.normal(0.0, cfg.pattern_std, size=side * side)
    return pattern - pattern.mean()


def _make_sample(cfg: GenConfig, classes: list[SubjectClass], sample_id: int,
                 textures: dict[int, np.ndarray],
                 patterns: dict[int, np.ndarray]) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, sample_id)))
    n_subj = int(rng.integers(1, cfg.max_subjects_per_sample + 1))
    present = sorted(rng.choice(cfg.num_classes, size=n_subj, replace=False).tolist())

    # image: dim noisy background plus one textured blob per present class
    h = w = cfg.image_size
    image = rng.uniform(0.0, 0.25, size=(h, w, cfg.image_channels))
    for cid in present:
        r0 = int(rng.integers(0, h - cfg.blob_size + 1))
        c0 = int(rng.integers(0, w - cfg.blob_size + 1))
        image[r0:r0 + cfg.blob_size, c0:c0 + cfg.blob_size, :] = \
            textures[cid][:, :, None]
    image = np.clip(image, 0.0, 1.0)

    # caption: full context, subject tokens at random positions, filler elsewhere
    n_ctx = cfg.context_length
    caption = np.zeros(n_ctx, dtype=np.int32)
    valid = np.ones(n_ctx, dtype=bool)
    filler_lo = cfg.num_classes + 1
    filler_hi = filler_lo + cfg.filler_vocab_size
    caption[:] = rng.integers(filler_lo, filler_hi, size=n_ctx)
    positions = rng.choice(n_ctx, size=n_subj, replace=False)
    for cid, pos in zip(present, positions):
        caption[pos] = classes[cid].token_id

    # brain grid: zero-mean noise plus elevated activation on present blocks
    n_f = cfg.grid_height * cfg.grid_width
    fmri = rng.normal(0.0, cfg.noise_std, size=n_f)
    gt_masks = {}
    for cid in present:
        fmri[classes[cid].roi_voxels] += cfg.mu_on + patterns[cid]
        mask = np.zeros(n_f, dtype=bool)
        mask[classes[cid].roi_voxels] = True
        gt_masks[cid] = mask

    return Sample(id=sample_id, image=image, caption=caption, valid_mask=valid,
                  fmri=fmri, present_classes=present, gt_masks=gt_masks)


def _assign_folds(records: list[dict], seed: int) -> None:
    """Stratified round-robin: samples grouped by class signature, shuffled,
    dealt across folds, keeping per-fold class counts within one sample."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    groups: dict[tuple, list[int]] = {}
    for rec in records:
        groups.setdefault(tuple(rec["classes"]), []).append(rec["id"])
    cursor = 0
    for key in sorted(groups):
        ids = groups[key]
        rng.shuffle(ids)
        for sid in ids:
            records[sid]["fold"] = cursor % NUM_FOLDS
            cursor += 1


def generate_dataset(cfg: GenConfig, out_dir) -> DatasetManifest:
    """Write a complete corpus to disk; deterministic (byte-identical) per seed."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    root_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))

    blocks = _plant_roi_blocks(cfg, root_rng)
    classes = [SubjectClass(id=c, token_id=c + 1, roi_voxels=blocks[c],
                            texture_seed=cfg.seed * 1000 + c)
               for c in range(cfg.num_classes)]
    textures = {c.id: _class_texture(cfg, c.texture_seed) for c in classes}
    patterns = {c.id: _class_pattern(cfg, c.texture_seed) for c in classes}

    fmap = FlattenMap.identity(cfg.grid_height, cfg.grid_width)
    fmap.save(out / "flatten_map.json")

    records = []
    for sid in range(cfg.num_samples):
        sample = _make_sample(cfg, classes, sid, textures, patterns)
        stem = out / "samples" / f"{sid:05d}"
        write_tensor(f"{stem}.image.bt", sample.image.astype(np.float32))
        write_tensor(f"{stem}.fmri.bt", sample.fmri.astype(np.float32))
        write_tensor(f"{stem}.caption.bt", sample.caption.astype(np.int32))
        for cid, mask in sample.gt_masks.items():
            idx = np.flatnonzero(mask)
            np.savetxt(f"{stem}.mask.{cid}.csv", idx[:, None], fmt="%d",
                       header="voxel", comments="")
        records.append({"id": sid, "classes": sample.present_classes,
                        "caption_length": int(sample.valid_mask.sum())})
    _assign_folds(records, cfg.seed)
    folds = [[r["id"] for r in records if r["fold"] == f] for f in range(NUM_FOLDS)]

    manifest = DatasetManifest(config=cfg, classes=classes, folds=folds,
                               sample_records=records)
    payload = {
        "version": 1,
        "config": cfg.__dict__,
        "classes": [{"id": c.id, "token_id": c.token_id,
                     "roi_voxels": c.roi_voxels.tolist(),
                     "texture_seed": c.texture_seed} for c in classes],
        "folds": folds,
        "samples": records,
    }
    (out / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

class Dataset:
    """Lazily readable corpus: manifest up front, tensors on demand."""

    def __init__(self, root: Path, manifest: DatasetManifest, fmap: FlattenMap):
        self.root = root
        self.manifest = manifest
        self.flatten_map = fmap

    @property
    def config(self) -> GenConfig:
        return self.manifest.config

    def __len__(self) -> int:
        return self.config.num_samples

    def load_sample(self, sample_id: int) -> Sample:
        stem = self.root / "samples" / f"{sample_id:05d}"
        try:
            image = read_tensor(f"{stem}.image.bt").astype(np.float64)
            fmri = read_tensor(f"{stem}.fmri.bt").astype(np.float64)
            caption = read_tensor(f"{stem}.caption.bt")
        except (CorruptFileError, FileNotFoundError) as exc:
            raise CorruptFileError(f"sample {sample_id}: {exc}") from exc
        record = self.manifest.sample_records[sample_id]
        valid = np.zeros(self.config.context_length, dtype=bool)
        valid[:record["caption_length"]] = True
        present = list(record["classes"])
        gt = {}
        n_f = self.manifest.num_voxels
        for cid in present:
            idx = np.loadtxt(f"{stem}.mask.{cid}.csv", dtype=np.int64,
                             skiprows=1, ndmin=1)
            mask = np.zeros(n_f, dtype=bool)
            mask[idx] = True
            gt[cid] = mask
        return Sample(id=sample_id, image=image, caption=caption, valid_mask=valid,
                      fmri=fmri, present_classes=present, gt_masks=gt)

    def load_batch(self, sample_ids) -> list[Sample]:
        return [self.load_sample(i) for i in sample_ids]

    def subject_positions(self, sample: Sample) -> dict[int, int]:
        """Caption position of each present class's token."""
        out = {}
        for cid in sample.present_classes:
            token = self.manifest.subject_token_ids[cid]
            hits = np.flatnonzero(sample.caption == token)
            out[cid] = int(hits[0])
        return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    payload = json.loads(manifest_path.read_text())
    cfg = GenConfig(**payload["config"])
    classes = [SubjectClass(id=c["id"], token_id=c["token_id"],
                            roi_voxels=np.asarray(c["roi_voxels"], dtype=np.int64),
                            texture_seed=c["texture_seed"])
               for c in payload["classes"]]
    manifest = DatasetManifest(config=cfg, classes=classes, folds=payload["folds"],
                               sample_records=payload["samples"])
    fmap = FlattenMap.load(root / "flatten_map.json")
    return Dataset(root, manifest, fmap)


def kfold_split(manifest: DatasetManifest, fold: int) -> tuple[list[int], list[int]]:
    """Validation = the chosen fold, training = the other four; disjoint, exhaustive."""
    if not 0 <= fold < NUM_FOLDS:
        raise ValueError(f"fold must be 0..{NUM_FOLDS - 1}, got {fold}")
    val = list(manifest.folds[fold])
    train = [sid for f, ids in enumerate(manifest.folds) if f != fold for sid in ids]
    return sorted(train), sorted(val)
