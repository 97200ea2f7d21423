"""Tape and jet primitives checked against finite differences."""

import numpy as np
import pytest

from aaspde import autodiff as ad
from aaspde.autodiff import Jet, Var


def numerical_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def test_add_mul_scalar_chain():
    a = Var(np.array(2.0))
    b = Var(np.array(3.0))
    loss = a * b + a * a
    ad.backward(loss)
    assert loss.value == 10.0
    np.testing.assert_allclose(a.grad, 7.0)  # b + 2a
    np.testing.assert_allclose(b.grad, 2.0)


def test_broadcast_backward():
    rng = np.random.default_rng(0)
    w = Var(rng.normal(size=(1, 4)))
    x = rng.normal(size=(5, 4))
    loss = ad.vsum(ad.tanh(x * w))
    ad.backward(loss)
    num = numerical_grad(lambda v: np.sum(np.tanh(x * v)), w.value.copy())
    np.testing.assert_allclose(w.grad, num, rtol=1e-7)


def test_matmul_backward_batched():
    rng = np.random.default_rng(1)
    a = Var(rng.normal(size=(3, 2, 4)))
    w = Var(rng.normal(size=(4, 5)))
    loss = ad.vsum(ad.matmul(a, w) ** 2.0)
    ad.backward(loss)
    num_w = numerical_grad(lambda v: np.sum((a.value @ v) ** 2), w.value.copy())
    num_a = numerical_grad(lambda v: np.sum((v @ w.value) ** 2), a.value.copy())
    np.testing.assert_allclose(w.grad, num_w, rtol=1e-6)
    np.testing.assert_allclose(a.grad, num_a, rtol=1e-6)


@pytest.mark.parametrize("opname", ["exp", "log", "tanh", "sigmoid", "softplus", "log1p", "sqrt"])
def test_unary_ops_backward(opname):
    rng = np.random.default_rng(2)
    x0 = rng.uniform(0.1, 1.5, size=(4, 3))
    op = getattr(ad, opname)
    ref = {
        "exp": np.exp, "log": np.log, "tanh": np.tanh,
        "sigmoid": lambda v: 1 / (1 + np.exp(-v)),
        "softplus": lambda v: np.logaddexp(0, v),
        "log1p": np.log1p, "sqrt": np.sqrt,
    }[opname]
    x = Var(x0)
    loss = ad.vsum(op(x) * 2.0)
    ad.backward(loss)
    num = numerical_grad(lambda v: 2 * np.sum(ref(v)), x0.copy())
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-9)


def test_sigmoid_extreme_arguments_stable():
    x = np.array([[-800.0, 800.0, 0.0]])
    s = ad.sigmoid(x)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [[0.0, 1.0, 0.5]], atol=1e-12)
    sp = ad.softplus(x)
    assert np.all(np.isfinite(sp))


def test_concat_take_reshape_backward():
    rng = np.random.default_rng(3)
    a = Var(rng.normal(size=(4, 2)))
    b = Var(rng.normal(size=(4, 3)))
    joined = ad.concat([a, b], axis=-1)
    picked = joined[:, 1:4]
    loss = ad.vsum(ad.reshape(picked, (12,)) ** 2.0)
    ad.backward(loss)

    def ref(av, bv):
        return np.sum(np.concatenate([av, bv], axis=-1)[:, 1:4] ** 2)

    num_a = numerical_grad(lambda v: ref(v, b.value), a.value.copy())
    num_b = numerical_grad(lambda v: ref(a.value, v), b.value.copy())
    np.testing.assert_allclose(a.grad, num_a, rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(b.grad, num_b, rtol=1e-6, atol=1e-10)


def test_mean_axis_backward():
    x = Var(np.arange(12.0).reshape(3, 4))
    loss = ad.vsum(ad.vmean(x, axis=0) ** 2.0)
    ad.backward(loss)
    num = numerical_grad(lambda v: np.sum(v.mean(axis=0) ** 2), x.value.copy())
    np.testing.assert_allclose(x.grad, num, rtol=1e-6)


def test_diamond_graph_accumulation():
    # value feeding two consumers must accumulate both contributions
    x = Var(np.array(1.5))
    y = ad.tanh(x)
    loss = y * y + 3.0 * y
    ad.backward(loss)
    t = np.tanh(1.5)
    np.testing.assert_allclose(x.grad, (2 * t + 3) * (1 - t * t), rtol=1e-12)


def test_backward_rejects_nonscalar_and_nonfinite():
    with pytest.raises(ValueError):
        ad.backward(Var(np.zeros(3)) * 1.0)
    bad = ad.log(Var(np.array(0.0)))
    with pytest.raises(FloatingPointError):
        ad.backward(bad * 1.0)


def test_parameter_gradient_zero_for_unused_param():
    a = Var(np.array(2.0))
    unused = Var(np.ones(3))
    g = ad.parameter_gradient(a * a, [a, unused])
    np.testing.assert_allclose(g[0], 4.0)
    np.testing.assert_allclose(g[1], np.zeros(3))


# -- jets ----------------------------------------------------------------


def jet_of(f, x, order=2):
    return f(Jet.seed(x, order))


def test_jet_quadratic_exact():
    x = np.array([[0.3, -0.2], [1.0, 2.0]])
    out = jet_of(lambda j: (j * j).matmul(np.ones((2, 1))), x)
    np.testing.assert_allclose(out.val[:, 0], (x ** 2).sum(axis=1))
    np.testing.assert_allclose(out.tan[:, :, 0], 2 * x)
    np.testing.assert_allclose(out.tan2.sum(axis=1)[:, 0], [4.0, 4.0])


def test_jet_product_harmonic():
    x = np.array([[0.7, -0.4]])
    out = jet_of(lambda j: j.col([0]) * j.col([1]), x)
    np.testing.assert_allclose(out.val, [[-0.28]])
    np.testing.assert_allclose(out.tan[0, :, 0], [-0.4, 0.7])
    np.testing.assert_allclose(out.tan2.sum(axis=1), [[0.0]], atol=1e-15)


@pytest.mark.parametrize("fn,ref", [
    (lambda j: j.exp(), np.exp),
    (lambda j: (j + 2.0).log(), lambda v: np.log(v + 2)),
    (lambda j: j.tanh(), np.tanh),
    (lambda j: j.sigmoid(), lambda v: 1 / (1 + np.exp(-v))),
    (lambda j: j.softplus(), lambda v: np.logaddexp(0, v)),
    (lambda j: (j + 2.0).power(1.7), lambda v: (v + 2) ** 1.7),
    (lambda j: j.square(), lambda v: v * v),
])
def test_jet_elementwise_against_finite_differences(fn, ref):
    rng = np.random.default_rng(7)
    x = rng.uniform(-0.8, 0.8, size=(6, 3))
    out = jet_of(fn, x)
    h = 1e-4
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fp, fm, f0 = ref(x + e), ref(x - e), ref(x)
        np.testing.assert_allclose(out.tan[:, i, :], (fp - fm) / (2 * h),
                                   rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(out.tan2[:, i, :], (fp - 2 * f0 + fm) / h ** 2,
                                   rtol=1e-4, atol=1e-6)


def test_jet_division():
    x = np.array([[0.5, 0.25]])
    out = jet_of(lambda j: j.col([0]) / (j.col([1]) + 1.0), x)
    np.testing.assert_allclose(out.val, [[0.4]])
    # d/dx0 = 1/(x1+1); d/dx1 = -x0/(x1+1)^2
    np.testing.assert_allclose(out.tan[0, :, 0], [0.8, -0.32])
    # d2/dx1^2 = 2 x0/(x1+1)^3
    np.testing.assert_allclose(out.tan2[0, :, 0], [0.0, 2 * 0.5 / 1.25 ** 3])


def test_jet_parameter_gradient_flows_through_tangents():
    # d/dw of (d f / d x) with f = tanh(w x): tangent must stay on the tape
    w = Var(np.array([[0.7]]))
    x = np.array([[0.3]])
    out = Jet.seed(x, 1).matmul(w).tanh()
    g = ad.parameter_gradient(ad.vsum(out.tan), [w])[0]
    # d/dw [w (1 - tanh^2(wx))] at w=0.7, x=0.3
    wv, xv = 0.7, 0.3
    t = np.tanh(wv * xv)
    expected = (1 - t ** 2) + wv * (-2 * t * (1 - t ** 2) * xv)
    np.testing.assert_allclose(g[0, 0], expected, rtol=1e-12)
