import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metapoison import autograd as ag
from metapoison import losses as L
from metapoison.data import synth_dataset


def _z(v):
    return ag.const(np.asarray(v, dtype=np.float64))


def test_uniform_logits_four_classes():
    assert L.train_loss(_z(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4))


def test_confident_correct_logit_near_zero():
    assert L.train_loss(_z([[0.0, 60.0]]), [1]).item() < 1e-20


def test_two_example_ce_by_hand():
    z = np.array([[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expect = -(np.log(p[0, 2]) + np.log(p[1, 0])) / 2
    assert L.train_loss(_z(z), [2, 0]).item() == pytest.approx(expect, rel=1e-12)


def test_train_loss_label_range():
    with pytest.raises(ValueError):
        L.train_loss(_z(np.zeros((1, 2))), [2])


@pytest.mark.parametrize("z,y,kappa,expect", [([2, 5], 1, None, -3), ([2, 5], 0, None, 3),
                                              ([0, 10], 1, 2, -2)])
def test_cw_examples(z, y, kappa, expect):
    assert L.cw_loss(_z(z), y, kappa).item() == expect


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (200, 5), elements=st.floats(-10, 10)), st.integers(0, 4))
def test_cw_sign_law(z, y):
    cw = L.cw_loss(_z(z), y).data
    strict = (z[:, y][:, None] > np.delete(z, y, axis=1)).all(axis=1)
    np.testing.assert_array_equal(cw < 0, strict)
    np.testing.assert_allclose(L.cw_margin(z, y), cw)


def test_cw_ties_nonnegative():
    assert L.cw_loss(_z([3.0, 3.0]), 0).item() == 0.0


def test_self_conceal_half_probability():
    assert L.self_conceal_loss(_z([[0.0, 0.0]]), [0]).item() == pytest.approx(np.log(2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)), st.integers(0, 2))
def test_self_conceal_nonnegative_and_capped(z, y):
    v = L.self_conceal_loss(_z(z), y).item()
    assert 0.0 <= v <= -np.log(1e-6) + 1e-9


def test_self_conceal_vanishes_when_true_class_unlikely():
    assert L.self_conceal_loss(_z([[-40.0, 0.0]]), [0]).item() < 1e-15


def _img():
    return np.zeros((4, 4, 3))


def test_spec_invariants():
    with pytest.raises(ValueError):
        L.AttackSpec(_img(), 0, 1, 0, "collision")
    with pytest.raises(ValueError):
        L.AttackSpec(_img(), 0, None, 1, "self_conceal")
    with pytest.raises(ValueError):
        L.AttackSpec(_img(), 0, 1, 1, "indiscriminate_class")
    with pytest.raises(ValueError):
        L.AttackSpec(_img(), 0, 1, 1, "unknown")


def test_adv_loss_collision_is_cw():
    spec = L.AttackSpec(_img(), 0, 1, 1, "collision")
    z = _z([[2.0, 5.0]])
    assert L.adv_loss(spec, z).item() == L.cw_loss(z, 1).reshape(()).item() == -3


def test_adv_loss_multi_target_mean():
    spec = L.AttackSpec(np.zeros((2, 4, 4, 3)), [0, 0], 1, 1, "multi_target")
    assert L.adv_loss(spec, _z([[2.0, 5.0], [1.0, 0.0]])).item() == pytest.approx(-1.0)


def test_adv_loss_self_conceal():
    spec = L.AttackSpec(_img(), 1, None, 1, "self_conceal")
    assert L.adv_loss(spec, _z([[0.0, 0.0]])).item() == pytest.approx(np.log(2))


def test_indiscriminate_resamples_seeded_holdout():
    hold = synth_dataset(0, 50, 2, (4, 4, 3))
    spec = L.AttackSpec(_img(), 0, 1, 1, "indiscriminate_class", holdout=hold, holdout_batch=8)
    a1, l1 = spec.eval_batch(np.random.default_rng(1))
    a2, _ = spec.eval_batch(np.random.default_rng(1))
    a3, _ = spec.eval_batch(np.random.default_rng(2))
    assert len(a1) == 8 and (l1 == 0).all()
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, a3)
    spec_all = L.AttackSpec(_img(), 0, None, None, "indiscriminate_all", holdout=hold)
    z = _z(np.zeros((2, 2)))
    assert L.adv_loss(spec_all, z, np.array([0, 1])).item() == pytest.approx(-np.log(2))


def test_adv_loss_gradient_is_first_max_subgradient():
    g = ag.Graph()
    z = g.leaf(np.array([[1.0, 4.0, 4.0, 0.0]]))
    spec = L.AttackSpec(_img(), 1, 0, 0, "collision")
    (gz,) = ag.backward(g, L.adv_loss(spec, z), [z])
    np.testing.assert_array_equal(gz.data, [[-1.0, 1.0, 0.0, 0.0]])
