import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bractive.autodiff import Tensor
from bractive.losses import (
    BatchFeatures,
    LossConfig,
    SlotFeatures,
    contras,
    global_loss,
    total_loss,
    weighted_soi_loss,
)
from bractive.selfcheck import contras_oracle, weighted_soi_oracle


def test_single_pair_identical_is_zero():
    x = np.array([[0.6, 0.8]])
    val = float(contras(Tensor(x), Tensor(x), 0.07).data)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_two_sample_hand_value():
    """Orthonormal rows, sigma=1: each direction gives log(1+e^-1) per row."""
    x = np.eye(2)
    val = float(contras(Tensor(x), Tensor(x), 1.0).data)
    ref = 2 * math.log(1 + math.exp(-1.0))
    assert val == pytest.approx(ref, abs=1e-12)
    assert val == pytest.approx(0.6265233750364456, abs=1e-10)


def test_matches_bruteforce_oracle():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        n, d = int(r.integers(1, 9)), int(r.integers(2, 8))
        x, y = r.normal(size=(n, d)), r.normal(size=(n, d))
        ours = float(contras(Tensor(x), Tensor(y), 0.07).data)
        worst = max(worst, abs(ours - contras_oracle(x, y, 0.07)))
    assert worst <= 1e-10


def test_weighted_matches_oracle():
    r = np.random.default_rng(1)
    n, d = 5, 4
    x, y = r.normal(size=(n, d)), r.normal(size=(n, d))
    w = r.uniform(0.1, 1.0, size=n)
    ours = float(contras(Tensor(x), Tensor(y), 0.1, weights=Tensor(w)).data)
    assert ours == pytest.approx(contras_oracle(x, y, 0.1, weights=w), abs=1e-10)


def test_symmetric_in_arguments():
    r = np.random.default_rng(2)
    x, y = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    a = float(contras(Tensor(x), Tensor(y), 0.07).data)
    b = float(contras(Tensor(y), Tensor(x), 0.07).data)
    assert a == pytest.approx(b, abs=1e-12)


def test_weight_linearity():
    """The loss is linear in the per-sample weights."""
    r = np.random.default_rng(3)
    x, y = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    w1 = r.uniform(0.1, 1, size=4)
    w2 = r.uniform(0.1, 1, size=4)
    f = lambda w: float(contras(Tensor(x), Tensor(y), 0.1, weights=Tensor(w)).data)
    assert f(w1) + f(w2) == pytest.approx(f(w1 + w2), abs=1e-10)


def test_unit_weights_reduce_to_unweighted():
    r = np.random.default_rng(4)
    x, y = r.normal(size=(5, 3)), r.normal(size=(5, 3))
    a = float(contras(Tensor(x), Tensor(y), 0.07).data)
    b = float(contras(Tensor(x), Tensor(y), 0.07,
                      weights=Tensor(np.ones(5))).data)
    assert a == pytest.approx(b, abs=1e-14)


def test_loss_nonnegative_and_finite():
    r = np.random.default_rng(5)
    for _ in range(5):
        x, y = r.normal(size=(6, 4)), r.normal(size=(6, 4))
        v = float(contras(Tensor(x), Tensor(y), 0.07).data)
        assert math.isfinite(v) and v >= -1e-12


def _random_batch(r, n=3, d=4, k=2):
    slots = [SlotFeatures(confidence=Tensor(r.uniform(0.1, 0.9, size=n)),
                          text=Tensor(r.normal(size=(n, d))),
                          visual=Tensor(r.normal(size=(n, d))),
                          fmri=Tensor(r.normal(size=(n, d))))
             for _ in range(k)]
    return BatchFeatures(text_cls=Tensor(r.normal(size=(n, d))),
                         visual_cls=Tensor(r.normal(size=(n, d))),
                         fmri_cls=Tensor(r.normal(size=(n, d))),
                         slots=slots)


def test_soi_loss_matches_oracle():
    r = np.random.default_rng(6)
    batch = _random_batch(r)
    cfg = LossConfig(sigma=0.07)
    ours = float(weighted_soi_loss(batch, cfg).data)
    ref = weighted_soi_oracle(
        [(s.confidence.data, s.text.data, s.visual.data, s.fmri.data)
         for s in batch.slots], cfg.sigma)
    assert ours == pytest.approx(ref, abs=1e-10)


def test_total_combines_parts_with_weights():
    r = np.random.default_rng(7)
    batch = _random_batch(r)
    g = float(global_loss(batch, LossConfig()).data)
    s = float(weighted_soi_loss(batch, LossConfig()).data)
    both = float(total_loss(batch, LossConfig(lambda_global=2.0,
                                              lambda_soi=0.5)).data)
    assert both == pytest.approx(2.0 * g + 0.5 * s, abs=1e-10)


def test_zero_weight_skips_term_entirely():
    """A zero-weight branch must keep its inputs off the autodiff tape."""
    r = np.random.default_rng(8)
    batch = _random_batch(r)
    for s in batch.slots:
        s.confidence.requires_grad = True
    loss = total_loss(batch, LossConfig(lambda_soi=0.0))
    loss.backward()
    for s in batch.slots:
        assert s.confidence.grad is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_oracle_agreement_property(seed, n):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(n, 3)), r.normal(size=(n, 3))
    ours = float(contras(Tensor(x), Tensor(y), 0.2).data)
    assert ours == pytest.approx(contras_oracle(x, y, 0.2), abs=1e-10)
