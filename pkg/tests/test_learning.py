"""Assignment NLL, its reverse pass, matcher training and the triplet baselines.

Analytic gradients are checked against central differences (h = 1e-5) at
64-bit precision. Parameters are drawn so no ReLU pre-activation sits
within reach of the step, keeping the loss smooth where it is probed.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reid3d.learning import (SupervisedEpisode, TrainConfig, TripletConfig, TripletSample, backward,
                             batch_loss_and_grad, gradient_check, min_relu_margin, mine_triplets, nll_loss,
                             numeric_gradient, relative_error, train_matcher, train_projection,
                             triplet_batch_loss_and_grad, triplet_loss, _proj_forward)
from reid3d.matcher import init_params, init_projection, sinkhorn_backward, sinkhorn_trace


def _episode(rng, mA=4, mB=5, d=6, n_match=3):
    FA = rng.normal(size=(mA, d))
    FB = rng.normal(size=(mB, d))
    ia, ib = rng.permutation(mA), rng.permutation(mB)
    matches = [(int(ia[k]), int(ib[k])) for k in range(n_match)]
    for i, j in matches:
        FB[j] = FA[i] + 0.3 * rng.normal(size=d)
    return SupervisedEpisode(FA, FB, matches, sorted(int(i) for i in ia[n_match:]),
                             sorted(int(j) for j in ib[n_match:]))


def _smooth_params(ep, variant, seed=0, margin=1e-3):
    for s in range(seed, seed + 200):
        p = init_params(ep.FA.shape[1], 4, variant, hidden=(8, 4), seed=s, noise=0.3)
        if min_relu_margin(ep, p) > margin:
            return p
    raise RuntimeError("no kink-free parameters found")


# --- loss ------------------------------------------------------------------

def test_nll_examples():
    P = np.zeros((3, 3))
    P[0, 0] = P[1, 2] = P[2, 1] = 1.0
    assert nll_loss(P, [(0, 0)], [1], [1]) == 0.0
    P = np.full((2, 2), 0.5)
    assert nll_loss(P, [(0, 0)]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(IndexError):
        nll_loss(P, [(3, 0)])
    assert nll_loss(np.zeros((2, 2)), [(0, 0)]) == pytest.approx(-math.log(1e-30))


def test_nll_independent_recompute():
    rng = np.random.default_rng(0)
    P = rng.random((5, 6))
    m, ua, ub = [(0, 1), (2, 3)], [1, 3], [0, 4]
    want = -(math.log(P[0, 1]) + math.log(P[2, 3]) + math.log(P[1, 5]) + math.log(P[3, 5])
             + math.log(P[4, 0]) + math.log(P[4, 4]))
    assert nll_loss(P, m, ua, ub) == pytest.approx(want, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.01, 10.0))
def test_nll_decreases_when_gt_cell_grows(seed, factor):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.01, 0.09, size=(4, 4))
    m = [(0, 1), (2, 2)]
    base = nll_loss(P, m, [1], [0])
    P2 = P.copy()
    P2[2, 2] *= factor
    assert nll_loss(P2, m, [1], [0]) < base


# --- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("variant", ["adaptive", "fixed"])
def test_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(1)
    ep = _episode(rng)
    errs = gradient_check(ep, _smooth_params(ep, variant), h=1e-5)
    assert max(errs.values()) < 1e-4, errs


def test_gradient_zero_for_unused_block():
    rng = np.random.default_rng(2)
    ep = _episode(rng)
    p = _smooth_params(ep, "adaptive")
    D = p.d_out
    p.fin[0][0][:, D:] = 0.0  # attention features no longer reach the dustbin score
    g = backward(ep, p)
    for k in range(3):
        assert not g[f"att.{k}.weight"].any() and not g[f"att.{k}.bias"].any()
    p.fin[2][0][:] = 0.0  # final layer zeroed: earlier final-MLP layers are cut off
    g = backward(ep, p)
    for k in range(2):
        assert not g[f"fin.{k}.weight"].any()
    assert g["fin.2.bias"].any()


def test_duplicated_episode_doubles_gradient():
    rng = np.random.default_rng(3)
    ep = _episode(rng)
    p = _smooth_params(ep, "adaptive")
    l1, g1 = batch_loss_and_grad([ep], p, reduction="sum")
    l2, g2 = batch_loss_and_grad([ep, ep], p, reduction="sum")
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-13, atol=1e-15)


def test_gradients_deterministic():
    rng = np.random.default_rng(4)
    ep = _episode(rng)
    p = _smooth_params(ep, "adaptive")
    a, b = backward(ep, p), backward(ep, p)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_sinkhorn_backward_shift_invariant():
    rng = np.random.default_rng(5)
    S = rng.normal(size=(5, 6))
    G = rng.normal(size=S.shape)
    g0 = sinkhorn_backward(sinkhorn_trace(S), G)
    g1 = sinkhorn_backward(sinkhorn_trace(S + 3.7), G)
    np.testing.assert_allclose(g1, g0, atol=1e-9)


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0, floor=1e-6) < 1e-5
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


# --- training ----------------------------------------------------------------

def _separable(d=8, m=4, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    FA = 2.0 * Q[:m]
    perm = rng.permutation(m)
    FB = FA[perm]
    return SupervisedEpisode(FA, FB, [(int(perm[j]), j) for j in range(m)], [], [])


def test_training_drives_loss_to_zero():
    ep = _separable()
    cfg = TrainConfig(epochs=200, batch_size=1, gain_augment=0.0, select_best=False)
    _, curve = train_matcher([ep], config=cfg, variant="adaptive", hidden=(16, 8))
    assert len(curve) <= 200
    assert curve[-1][1] < 0.05


def test_zero_learning_rate_keeps_params():
    ep = _separable()
    p0 = init_params(8, 8, "adaptive", hidden=(8, 4), seed=1)
    cfg = TrainConfig(lr=0.0, epochs=3, batch_size=1)
    p1, _ = train_matcher([ep], params=p0, config=cfg)
    assert all(p1.tensors()[k].tobytes() == v.tobytes() for k, v in p0.tensors().items())


def test_training_bit_deterministic():
    rng = np.random.default_rng(6)
    eps = [_episode(rng) for _ in range(5)]
    cfg = TrainConfig(epochs=3, batch_size=2)
    pa, ca = train_matcher(eps, config=cfg, val_episodes=eps[:2], d_out=4, hidden=(8, 4))
    pb, cb = train_matcher(eps, config=cfg, val_episodes=eps[:2], d_out=4, hidden=(8, 4))
    assert ca == cb
    assert all(pa.tensors()[k].tobytes() == pb.tensors()[k].tobytes() for k in pa.tensors())


def test_training_requires_episodes():
    with pytest.raises(ValueError):
        train_matcher([])


def test_sgd_option_reduces_loss():
    ep = _separable()
    cfg = TrainConfig(epochs=40, batch_size=1, optimizer="sgd", lr=0.05, gain_augment=0.0, select_best=False)
    _, curve = train_matcher([ep], config=cfg, variant="fixed")
    assert curve[-1][1] < curve[0][1]


# --- triplets ----------------------------------------------------------------

def test_triplet_examples():
    a = np.zeros(3)
    assert triplet_loss(TripletSample(a, a, np.array([1.5, 0, 0]))) == 0.0
    s = (a, np.array([2.0, 0, 0]), np.array([0, 1.0, 0]))
    assert triplet_loss(s, margin=1.0) == pytest.approx(2.0)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_triplet_gradient_finite_differences(layers):
    rng = np.random.default_rng(7)
    net = init_projection(5, 4, layers, seed=layers)
    for _, b in net.layers:
        b[:] = rng.uniform(-0.5, 0.5, size=b.shape)  # zero biases put dead units exactly on a kink
    A, P, N = (rng.normal(size=(6, 5)) for _ in range(3))
    _, pres = _proj_forward(net, np.concatenate([A, P, N]))
    out = pres[-1]
    viol = np.linalg.norm(out[:6] - out[6:12], axis=1) - np.linalg.norm(out[:6] - out[12:], axis=1) + 1.0
    assert min((np.abs(q).min() for q in pres[:-1]), default=1.0) > 1e-4 and np.abs(viol).min() > 1e-4
    _, grads = triplet_batch_loss_and_grad(net, A, P, N)
    for name, t in net.tensors().items():
        num = numeric_gradient(lambda: triplet_batch_loss_and_grad(net, A, P, N)[0], t, 1e-5)
        assert relative_error(grads[name], num, 1e-6).max() < 1e-4, name


def test_mine_triplets_examples():
    rng = np.random.default_rng(8)
    FA, FB = rng.normal(size=(1, 3)), rng.normal(size=(2, 3))
    (t,) = mine_triplets(FA, FB, [(0, 1)], rng)
    np.testing.assert_array_equal(t.negative, FB[0])
    assert mine_triplets(FA, FB, [], rng) == []
    assert mine_triplets(FA, FB[:1], [(0, 0)], rng) == []
    FA, FB = rng.normal(size=(10, 3)), rng.normal(size=(12, 3))
    m = [(i, i) for i in range(10)]
    a = mine_triplets(FA, FB, m, np.random.default_rng(1))
    b = mine_triplets(FA, FB, m, np.random.default_rng(1))
    assert len(a) == 10
    assert all(np.array_equal(x.negative, y.negative) for x, y in zip(a, b))
    assert all(not np.array_equal(x.negative, x.positive) for x in a)


def test_train_projection_lowers_loss():
    rng = np.random.default_rng(9)
    FA = rng.normal(size=(40, 6))
    FB = FA + 0.2 * rng.normal(size=FA.shape)
    trip = mine_triplets(FA, FB, [(i, i) for i in range(40)], rng)
    net, curve = train_projection(trip, 6, TripletConfig(d_out=6, epochs=20, batch_size=8))
    assert curve[-1][1] < curve[0][1]
    assert net(FA).shape == (40, 6)
