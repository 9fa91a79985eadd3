import numpy as np
import pytest

from bractive.autodiff import ShapeError, Tensor
from bractive.encoders import EncoderConfig
from bractive.soip import SoipParams, propose


def make_params(weight):
    p = SoipParams.init(EncoderConfig())
    return SoipParams(weight=Tensor(np.asarray(weight, dtype=float),
                                    requires_grad=True))


def test_hand_example_confidences_and_indices():
    """Logits [2, 0, -2] over three slots, k=2: picks slots 0 and 1 with
    sigmoid confidences."""
    d = 3
    t_cls = np.array([[1.0, 0.0, 0.0]])
    # W rows chosen so t_cls . w_m = 2, 0, -2 for slots 0..2
    w = np.array([[2.0, 0, 0], [0.0, 0, 0], [-2.0, 0, 0]])
    tokens = np.arange(9, dtype=float).reshape(1, 3, 3)
    valid = np.ones((1, 3), dtype=bool)
    props = propose(Tensor(t_cls), Tensor(tokens), valid, make_params(w), k=2)
    got = props.confidences.data[0]
    assert got[0] == pytest.approx(0.8807970779778823, abs=1e-12)
    assert got[1] == pytest.approx(0.5, abs=1e-12)
    assert list(props.indices[0]) == [0, 1]
    assert np.array_equal(props.features.data[0], tokens[0, [0, 1]])


def test_tie_break_prefers_lowest_index():
    t_cls = np.array([[1.0, 0.0]])
    w = np.array([[1.0, 0], [1.0, 0], [1.0, 0]])
    tokens = np.zeros((1, 3, 2))
    props = propose(Tensor(t_cls), Tensor(tokens), np.ones((1, 3), bool),
                    make_params(w), k=2)
    assert list(props.indices[0]) == [0, 1]


def test_confidences_in_unit_interval_and_sorted():
    r = np.random.default_rng(0)
    t_cls = r.normal(size=(4, 8))
    w = r.normal(size=(10, 8))
    tokens = r.normal(size=(4, 10, 8))
    props = propose(Tensor(t_cls), Tensor(tokens), np.ones((4, 10), bool),
                    make_params(w), k=5)
    g = props.confidences.data
    assert (g > 0).all() and (g < 1).all()
    assert (np.diff(g, axis=1) <= 1e-15).all()  # non-increasing per row


def test_padded_positions_never_selected():
    r = np.random.default_rng(1)
    t_cls = r.normal(size=(1, 4))
    w = r.normal(size=(6, 4)) + 5.0  # large positive logits everywhere
    tokens = r.normal(size=(1, 6, 4))
    valid = np.array([[True, False, True, False, True, False]])
    props = propose(Tensor(t_cls), Tensor(tokens), valid, make_params(w), k=3)
    assert set(props.indices[0]) <= {0, 2, 4}


def test_k_larger_than_valid_count_raises():
    t_cls = np.zeros((1, 4))
    w = np.zeros((6, 4))
    valid = np.array([[True, True, False, False, False, False]])
    with pytest.raises(ShapeError):
        propose(Tensor(t_cls), Tensor(np.zeros((1, 6, 4))), valid,
                make_params(w), k=3)


def test_gradient_reaches_proposal_matrix():
    r = np.random.default_rng(2)
    params = make_params(r.normal(size=(5, 4)))
    t_cls = Tensor(r.normal(size=(2, 4)))
    tokens = Tensor(r.normal(size=(2, 5, 4)))
    props = propose(t_cls, tokens, np.ones((2, 5), bool), params, k=2)
    (props.confidences.sum()).backward()
    assert params.weight.grad is not None
    assert np.abs(params.weight.grad).sum() > 0


def test_feature_gather_is_differentiable():
    r = np.random.default_rng(3)
    params = make_params(r.normal(size=(5, 4)))
    tokens = Tensor(r.normal(size=(1, 5, 4)), requires_grad=True)
    props = propose(Tensor(r.normal(size=(1, 4))), tokens,
                    np.ones((1, 5), bool), params, k=2)
    props.features.sum().backward()
    assert tokens.grad is not None
    picked = set(props.indices[0])
    for j in range(5):
        has_grad = np.abs(tokens.grad[0, j]).sum() > 0
        assert has_grad == (j in picked)


def test_monotone_logit_raises_confidence():
    """Increasing a slot's logit (along t_cls) raises its confidence."""
    t_cls = np.array([[1.0, 0.0]])
    tokens = np.zeros((1, 2, 2))
    lo = propose(Tensor(t_cls), Tensor(tokens), np.ones((1, 2), bool),
                 make_params([[0.5, 0], [0.0, 0]]), k=1)
    hi = propose(Tensor(t_cls), Tensor(tokens), np.ones((1, 2), bool),
                 make_params([[1.5, 0], [0.0, 0]]), k=1)
    assert hi.confidences.data[0, 0] > lo.confidences.data[0, 0]
