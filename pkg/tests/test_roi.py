import numpy as np
import pytest

from bractive.autodiff import ShapeError
from bractive.encoders import FlattenMap
from bractive.roi import (
    AttentionMap,
    LocalizeConfig,
    RoiMask,
    attention_map,
    dice,
    export_map_csv,
    export_map_pgm,
    export_mask_csv,
    threshold_mask,
    visual_attention_map,
)


def test_hand_pipeline_2x2_nearest_exact():
    """Two tokens on a 2x4 grid, scale 2, nearest upsample, identity map.

    Token 0 equals the query (cosine 1); token 1 is orthogonal (cosine 0).
    The mask at gamma 0.5 must be exactly token 0's 2x2 block.
    """
    fmap = FlattenMap.identity(2, 4)
    query = np.array([1.0, 0.0])
    tokens = np.array([[2.0, 0.0],      # same direction as query
                       [0.0, 3.0]])     # orthogonal
    cfg = LocalizeConfig(scale=2, mode="nearest")
    att = attention_map(query, tokens, fmap, cfg)
    expected_vals = np.array([1.0, 1.0, 0.0, 0.0,
                              1.0, 1.0, 0.0, 0.0])
    assert np.array_equal(att.values, expected_vals)
    mask = threshold_mask(att, 0.5)
    assert np.array_equal(mask.bits,
                          np.array([1, 1, 0, 0, 1, 1, 0, 0], dtype=bool))
    gt = np.array([1, 1, 0, 0, 1, 1, 0, 0], dtype=bool)
    assert dice(mask, gt) == 1.0


def test_query_scale_invariance():
    r = np.random.default_rng(0)
    fmap = FlattenMap.identity(8, 8)
    tokens = r.normal(size=(16, 6))
    cfg = LocalizeConfig(scale=2)
    worst = 0.0
    for _ in range(100):
        q = r.normal(size=6)
        c = np.exp(r.uniform(-3, 3))
        a = attention_map(q, tokens, fmap, cfg).values
        b = attention_map(q * c, tokens, fmap, cfg).values
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst <= 1e-12


def test_values_lie_in_cosine_range():
    r = np.random.default_rng(1)
    fmap = FlattenMap.identity(8, 8)
    att = attention_map(r.normal(size=5), r.normal(size=(16, 5)), fmap,
                        LocalizeConfig(scale=2))
    assert att.values.min() >= -1 - 1e-12 and att.values.max() <= 1 + 1e-12


def test_coverage_mismatch_raises():
    fmap = FlattenMap.identity(8, 8)
    with pytest.raises(ShapeError):
        attention_map(np.ones(4), np.ones((9, 4)), fmap, LocalizeConfig(scale=2))


def test_threshold_strictness():
    att = AttentionMap(values=np.array([0.6, 0.5, 0.4]))
    mask = threshold_mask(att, 0.5)
    assert list(mask.bits) == [True, False, False]


def test_threshold_example():
    att = AttentionMap(values=np.array([0.6, 0.4]))
    assert list(threshold_mask(att, 0.5).bits) == [True, False]


def test_threshold_monotone_in_gamma():
    r = np.random.default_rng(2)
    att = AttentionMap(values=r.uniform(-1, 1, size=50))
    sizes = [threshold_mask(att, g).num_set for g in np.linspace(-1, 1, 11)]
    assert sizes == sorted(sizes, reverse=True)


def test_dice_properties():
    r = np.random.default_rng(3)
    a = r.uniform(size=30) > 0.5
    b = r.uniform(size=30) > 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_dice_empty_conventions():
    empty = np.zeros(10, dtype=bool)
    full = np.ones(10, dtype=bool)
    assert dice(empty, empty) == 1.0
    assert dice(empty, full) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros(3, bool), np.zeros(4, bool))


def test_visual_map_shape_and_range():
    r = np.random.default_rng(4)
    att = visual_attention_map(r.normal(size=5), r.normal(size=(16, 5)),
                               (32, 32), 8, LocalizeConfig())
    assert att.values.shape == (32, 32)
    assert np.isfinite(att.values).all()


def test_bilinear_map_continuous_at_patch_seams():
    """Bilinear upsampling must not have nearest-style jumps between cells."""
    fmap = FlattenMap.identity(8, 8)
    tokens = np.array([[1.0, 0.0]] * 8 + [[0.0, 1.0]] * 8)
    att = attention_map(np.array([1.0, 0.0]), tokens, fmap,
                        LocalizeConfig(scale=2, mode="bilinear"))
    grid = att.values.reshape(8, 8)
    jumps = np.abs(np.diff(grid, axis=0))
    assert jumps.max() < 0.99  # a hard 1 -> 0 step would be ~1.0


def test_pgm_export_format(tmp_path):
    grid = np.linspace(-1, 1, 16).reshape(4, 4)
    path = tmp_path / "m.pgm"
    export_map_pgm(grid, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n")
    pixels = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
    assert pixels[0] == 0 and pixels[-1] == 255


def test_csv_exports_round_trip(tmp_path):
    att = AttentionMap(values=np.array([0.25, -0.5, 0.75]))
    export_map_csv(att, tmp_path / "map.csv")
    lines = (tmp_path / "map.csv").read_text().strip().splitlines()
    assert lines[0] == "index,value"
    assert lines[1].startswith("0,0.25")

    mask = RoiMask(bits=np.array([True, False, True]), gamma=0.5)
    export_mask_csv(mask, tmp_path / "mask.csv")
    lines = (tmp_path / "mask.csv").read_text().strip().splitlines()
    assert lines == ["voxel", "0", "2"]


def test_localize_config_validation():
    with pytest.raises(ValueError):
        LocalizeConfig(gamma=1.5)
    with pytest.raises(ValueError):
        LocalizeConfig(mode="cubic")
    with pytest.raises(ValueError):
        LocalizeConfig(scale=0)
