import numpy as np
import pytest

from pfedgm.model import (CovarianceBank, DenseHead, GeneratorParams, SGDState, backward, forward,
                          init_covariance_bank, init_generator, init_navigator, load_checkpoint,
                          model_param_groups, save_checkpoint, sgd_step)
from pfedgm.numcore import EPS_PD, finite_diff_grad, relative_error, rng_stream


def test_forward_shapes_and_mismatch():
    gen = init_generator([4, 6, 3], rng_stream(0))
    z, tape = forward(gen, np.ones((5, 4)))
    assert z.shape == (5, 3) and len(tape.pre) == 2
    with pytest.raises(ValueError):
        forward(gen, np.ones((5, 3)))


def test_single_linear_layer_is_affine():
    gen = init_generator([3, 2], rng_stream(1))
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_allclose(forward(gen, x)[0], x @ gen.layers[0].W.T + gen.layers[0].b)


def test_backward_matches_finite_difference():
    rng = rng_stream(2)
    gen = init_generator([4, 5, 3], rng)
    gen.layers[0].b[:] = 0.5  # keep units away from the kink
    x = np.abs(rng.standard_normal((3, 4))) + 0.1
    w = rng.standard_normal((3, 3))
    _, tape = forward(gen, x)
    grads, dx = backward(gen, tape, w, need_input_grad=True)
    f = lambda v: float(np.sum(forward(gen, v)[0] * w))
    assert relative_error(dx, finite_diff_grad(f, x)) < 1e-7
    W = gen.layers[0].W

    def fw(v):
        saved = W.copy()
        W[...] = v
        out = float(np.sum(forward(gen, x)[0] * w))
        W[...] = saved
        return out

    assert relative_error(grads[0], finite_diff_grad(fw, W.copy())) < 1e-7


def test_backward_rejects_bad_shape():
    gen = init_generator([2, 2], rng_stream(0))
    _, tape = forward(gen, np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(gen, tape, np.ones((3, 2)))


def test_relu_subgradient_at_zero():
    gen = init_generator([1, 1, 1], rng_stream(0))
    gen.layers[0].W[:] = 1.0
    gen.layers[0].b[:] = 0.0
    _, tape = forward(gen, np.zeros((1, 1)))
    grads, _ = backward(gen, tape, np.ones((1, 1)))
    assert grads[0][0, 0] == 0.0


def test_inits():
    nav = init_navigator(200, 16, rng_stream(3))
    assert np.var(nav.means) == pytest.approx(16 ** -0.5, rel=0.1)
    assert np.all(nav.biases == 0)
    assert np.all(init_covariance_bank(3, 4).precisions == 1.0)


def test_sgd_momentum_and_decay():
    p = [np.array([1.0]), np.array([1.0])]
    st = SGDState(p)
    sgd_step(p, [np.array([1.0]), np.array([1.0])], 0.1, 0.5, 0.1, st, decay=[True, False])
    np.testing.assert_allclose(p[0], [1 - 0.1 * 1.1])
    np.testing.assert_allclose(p[1], [0.9])
    sgd_step(p, [np.array([0.0]), np.array([0.0])], 0.1, 0.5, 0.0, st, decay=[True, False])
    np.testing.assert_allclose(p[1], [0.9 - 0.1 * 0.5])


def test_bank_floor_after_step():
    gen = init_generator([2, 2], rng_stream(0))
    nav = init_navigator(2, 2, rng_stream(1))
    bank = CovarianceBank(np.full((2, 2), 0.01))
    params, decay, floors = model_param_groups(gen, nav, bank)
    grads = [np.zeros_like(q) for q in params]
    grads[-1][:] = 10.0
    sgd_step(params, grads, 1.0, 0.0, 0.0, SGDState(params), decay, floors)
    assert np.all(bank.precisions == EPS_PD)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = rng_stream(9)
    gen = init_generator([3, 4, 2], rng)
    nav = init_navigator(3, 2, rng)
    bank = CovarianceBank(rng.uniform(0.1, 3, (3, 2)))
    head = DenseHead(rng.standard_normal((3, 2)), rng.standard_normal(3))
    save_checkpoint(tmp_path / "c.json", gen=gen, nav=nav, bank=bank, head=head, lineage={"seed": 9})
    back = load_checkpoint(tmp_path / "c.json")
    for a, b in zip(gen.arrays(), back["generator"].arrays()):
        assert a.tobytes() == b.tobytes()
    assert back["navigator"].means.tobytes() == nav.means.tobytes()
    assert back["covariance_bank"].precisions.tobytes() == bank.precisions.tobytes()
    assert back["dense_head"].W.tobytes() == head.W.tobytes()
    assert back["lineage"] == {"seed": 9}
    assert isinstance(back["generator"], GeneratorParams)
