import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from pfedgm.model import CovarianceBank, Navigator, init_generator
from pfedgm.objectives import (Prototypes, class_posterior, compute_prototypes_exact,
                               covariance_loss_and_grad, dense_ce_and_grads, gaussian_logits,
                               mixture_nll, personal_loss_and_grad, prototypes_from_embeddings,
                               shared_loss_and_grads, update_prototypes)
from pfedgm.model import DenseHead
from pfedgm.numcore import rng_stream


def test_two_class_frozen_value(backend):
    nav = Navigator(np.array([[0.0], [1.0]]), np.zeros(2))
    g = shared_loss_and_grads(np.array([[0.0]]), [0], nav)
    # log(1 + exp(-1/2))
    assert g.H == pytest.approx(0.47407698418010663, abs=1e-14)


def test_shared_loss_against_scipy_oracle(backend):
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal((20, 4)), rng.integers(0, 3, 20)
    nav = Navigator(rng.standard_normal((3, 4)), rng.standard_normal(3))
    d2 = ((z[:, None, :] - nav.means[None]) ** 2).sum(-1)
    logits = -0.5 * d2 + nav.biases
    expected = np.mean(logsumexp(logits, axis=1) - logits[np.arange(20), y])
    assert shared_loss_and_grads(z, y, nav).H == pytest.approx(expected, rel=1e-13)


def test_dz_closed_form(backend):
    rng = np.random.default_rng(1)
    z, y = rng.standard_normal((5, 3)), rng.integers(0, 4, 5)
    nav = Navigator(rng.standard_normal((4, 3)), rng.standard_normal(4))
    P = class_posterior(gaussian_logits(z, nav))
    expected = (P @ nav.means - nav.means[y]) / len(z)
    np.testing.assert_allclose(shared_loss_and_grads(z, y, nav).dz, expected, atol=1e-15)


def test_covariance_grad_sign(backend):
    # a sample sitting off-centre on its own class: raising that class's
    # precision lowers its logit, so the loss must rise
    nav = Navigator(np.array([[0.0], [5.0]]), np.zeros(2))
    bank = CovarianceBank(np.ones((2, 1)))
    _, dprec = covariance_loss_and_grad(np.array([[1.0]]), [0], nav, bank)
    assert dprec[0, 0] > 0
    eps = 1e-6
    up = mixture_nll([[1.0]], [0], nav, CovarianceBank(np.array([[1 + eps], [1.0]])))
    assert (up - mixture_nll([[1.0]], [0], nav, bank)) / eps == pytest.approx(dprec[0, 0], rel=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 5))
def test_posterior_sums_to_one(seed, K, d):
    rng = np.random.default_rng(seed)
    nav = Navigator(rng.standard_normal((K, d)) * 3, rng.standard_normal(K) * 3)
    z = rng.standard_normal((8, d)) * 10
    P = class_posterior(gaussian_logits(z, nav, CovarianceBank(rng.uniform(0.01, 10, (K, d)))))
    assert np.all(np.abs(P.sum(axis=1) - 1) < 1e-9)
    assert np.all(P >= 0)


def test_personal_loss_values_and_missing():
    protos = Prototypes(np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([True, False]))
    z = np.array([[2.0, 3.0], [5.0, 5.0]])
    pl = personal_loss_and_grad(z, [0, 1], protos)
    # only the first sample counts: (1 + 4) / (n d) with n=2, d=2
    assert pl.R == pytest.approx(5 / 4)
    assert pl.n_missing == 1
    np.testing.assert_allclose(pl.dz, [[0.5, 1.0], [0.0, 0.0]])


def test_personal_loss_zero_at_prototypes():
    protos = Prototypes(np.array([[1.0, 2.0]]), np.array([True]))
    assert personal_loss_and_grad(np.array([[1.0, 2.0]] * 3), [0, 0, 0], protos).R == 0.0


def test_prototypes_exact_and_absent():
    z = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 0.0]])
    p = prototypes_from_embeddings(z, [0, 0, 2], 3)
    np.testing.assert_array_equal(p.means, [[1.0, 1.0], [0.0, 0.0], [4.0, 0.0]])
    np.testing.assert_array_equal(p.present, [True, False, True])


def test_prototypes_via_generator():
    gen = init_generator([3, 2], rng_stream(0))
    x = rng_stream(1).standard_normal((10, 3))
    y = np.array([0, 1] * 5)
    p = compute_prototypes_exact(x, y, gen, 2)
    z = x @ gen.layers[0].W.T + gen.layers[0].b
    np.testing.assert_allclose(p.means[1], z[y == 1].mean(axis=0))


def test_ema_update():
    p = Prototypes(np.array([[0.0], [0.0]]), np.array([True, False]), ema_rate=0.1)
    update_prototypes(p, np.array([[10.0], [3.0]]), [0, 1])
    assert p.means[0, 0] == pytest.approx(1.0)
    assert p.means[1, 0] == 3.0 and p.present[1]
    with pytest.raises(ValueError):
        update_prototypes(p, np.zeros((1, 1)), [0], ema_rate=0.0)


def test_dense_head_grads():
    rng = np.random.default_rng(2)
    head = DenseHead(rng.standard_normal((3, 2)), rng.standard_normal(3))
    z, y = rng.standard_normal((4, 2)), rng.integers(0, 3, 4)
    loss, dz, dW, dc = dense_ce_and_grads(z, y, head)
    logits = z @ head.W.T + head.c
    assert loss == pytest.approx(np.mean(logsumexp(logits, axis=1) - logits[np.arange(4), y]))
    assert dc.sum() == pytest.approx(0.0, abs=1e-15)
