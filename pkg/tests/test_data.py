import json
from pathlib import Path

import numpy as np
import pytest

from bractive.data import (
    GenConfig,
    generate_dataset,
    kfold_split,
    load_dataset,
    NUM_FOLDS,
)
from bractive.io import CorruptFileError


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = GenConfig(num_samples=40, seed=7)
    manifest = generate_dataset(cfg, root)
    return root, cfg, manifest


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_deterministic(tmp_path, small_corpus):
    root, cfg, _ = small_corpus
    again = tmp_path / "again"
    generate_dataset(GenConfig(num_samples=40, seed=7), again)
    assert _tree_bytes(root) == _tree_bytes(again)


def test_different_seed_changes_output(tmp_path, small_corpus):
    root, _, _ = small_corpus
    other = tmp_path / "other"
    generate_dataset(GenConfig(num_samples=40, seed=8), other)
    assert _tree_bytes(root) != _tree_bytes(other)


def test_sample_invariants(small_corpus):
    root, cfg, manifest = small_corpus
    ds = load_dataset(root)
    token_ids = manifest.subject_token_ids
    for sid in range(len(ds)):
        s = ds.load_sample(sid)
        assert 1 <= len(s.present_classes) <= cfg.max_subjects_per_sample
        for cid in s.present_classes:
            # subject token present in the caption
            assert token_ids[cid] in s.caption
            # elevated mean activation on the planted block
            assert s.fmri[s.gt_masks[cid]].mean() >= cfg.mu_on - 0.05
            assert s.gt_masks[cid].sum() > 0
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.caption.shape == (cfg.context_length,)
        assert s.valid_mask.all()


def test_subject_tokens_map_one_to_one(small_corpus):
    root, cfg, manifest = small_corpus
    ds = load_dataset(root)
    token_ids = manifest.subject_token_ids
    subject_set = set(token_ids.values())
    for sid in range(len(ds)):
        s = ds.load_sample(sid)
        in_caption = {int(t) for t in s.caption if int(t) in subject_set}
        assert in_caption == {token_ids[c] for c in s.present_classes}


def test_roi_blocks_are_disjoint(small_corpus):
    _, _, manifest = small_corpus
    seen = set()
    for cls in manifest.classes:
        block = set(int(v) for v in cls.roi_voxels)
        assert not (block & seen)
        seen |= block


def test_off_block_activation_is_noise(small_corpus):
    root, cfg, _ = small_corpus
    ds = load_dataset(root)
    s = ds.load_sample(0)
    on = np.zeros(len(s.fmri), dtype=bool)
    for m in s.gt_masks.values():
        on |= m
    off = s.fmri[~on]
    assert abs(off.mean()) < 5 * cfg.noise_std
    assert off.std() < 2 * cfg.noise_std


def test_fold_partition(small_corpus):
    _, _, manifest = small_corpus
    all_ids = sorted(i for fold in manifest.folds for i in fold)
    assert all_ids == list(range(40))
    sizes = [len(f) for f in manifest.folds]
    assert max(sizes) - min(sizes) <= NUM_FOLDS


def test_kfold_split_shapes(small_corpus):
    _, _, manifest = small_corpus
    for fold in range(NUM_FOLDS):
        train, val = kfold_split(manifest, fold)
        assert sorted(train + val) == list(range(40))
        assert set(val) == set(manifest.folds[fold])
    with pytest.raises(ValueError):
        kfold_split(manifest, NUM_FOLDS)


def test_single_class_per_sample_config(tmp_path):
    cfg = GenConfig(num_samples=10, max_subjects_per_sample=1, seed=3)
    generate_dataset(cfg, tmp_path / "uni")
    ds = load_dataset(tmp_path / "uni")
    for sid in range(10):
        s = ds.load_sample(sid)
        assert len(s.present_classes) == 1


def test_corrupt_sample_file_reports_path(tmp_path):
    cfg = GenConfig(num_samples=4, seed=1)
    generate_dataset(cfg, tmp_path / "c")
    ds = load_dataset(tmp_path / "c")
    victim = tmp_path / "c" / "samples" / "00002.fmri.bt"
    victim.write_bytes(victim.read_bytes()[:10])
    with pytest.raises(CorruptFileError) as exc:
        ds.load_sample(2)
    assert "00002" in str(exc.value)
    ds.load_sample(1)  # others unaffected


def test_manifest_is_plain_json(small_corpus):
    root, _, _ = small_corpus
    data = json.loads((root / "manifest.json").read_text())
    assert data["config"]["num_samples"] == 40
    assert len(data["classes"]) == data["config"]["num_classes"]


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(num_classes=1)
    with pytest.raises(ValueError):
        GenConfig(vocab_size=6)
    with pytest.raises(ValueError):
        GenConfig(blob_size=40)
    with pytest.raises(ValueError):
        GenConfig(filler_vocab_size=0)
