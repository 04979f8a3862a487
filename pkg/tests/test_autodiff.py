import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import RegularGridInterpolator

from metasample import autodiff as ad

from conftest import central_diff, rel_err


def _grad1(f, x):
    tape = ad.Tape()
    xv = tape.var(x)
    (g,) = ad.grad(f(xv), [xv])
    return g.value


UNARY = {
    "log1p": (ad.log1p, lambda x: np.abs(x) + 0.1),
    "log": (ad.log, lambda x: np.abs(x) + 0.1),
    "exp": (ad.exp, lambda x: x),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.1),
    "sin": (ad.sin, lambda x: x),
    "cos": (ad.cos, lambda x: x),
    "sigmoid": (ad.sigmoid, lambda x: x),
    "abs": (ad.abs, lambda x: x + np.sign(x) * 0.1),
    "relu": (ad.relu, lambda x: x + np.sign(x) * 0.1),
    "square": (ad.square, lambda x: x),
    "pow_scalar": (lambda a: ad.pow_scalar(a, 2.5), lambda x: np.abs(x) + 0.1),
    "max_with_const": (lambda a: ad.max_with_const(a, 0.05), lambda x: x + np.sign(x - 0.05) * 0.1),
    "clamp": (lambda a: ad.clamp(a, -0.3, 0.4), lambda x: x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_first_and_second_order(name, rng):
    op, dom = UNARY[name]
    x = dom(rng.normal(size=(3, 4)))
    if name == "clamp":
        x = x[np.abs(x + 0.3) > 1e-3]
        x = x[np.abs(x - 0.4) > 1e-3].reshape(-1)
    f = lambda v: ad.sum(ad.mul(op(v), op(v)))
    g = _grad1(f, x)
    num = central_diff(lambda a: float(np.sum(op(ad.const(a)).value ** 2)), x)
    assert rel_err(g, num) < 1e-6

    # Hessian-vector product against differences of the analytic gradient
    vec = rng.normal(size=x.shape)
    tape = ad.Tape()
    xv = tape.var(x)
    (gx,) = ad.grad(f(xv), [xv], create_graph=True)
    (hv,) = ad.grad(ad.sum(ad.mul(gx, vec)), [xv])
    eps = 1e-5
    fd = (_grad1(f, x + eps * vec) - _grad1(f, x - eps * vec)) / (2 * eps)
    assert np.allclose(hv.value, fd, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "power"])
def test_binary_broadcast_gradients(name, rng):
    op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div, "power": ad.power}[name]
    a = np.abs(rng.normal(size=(4, 3))) + 0.5
    b = np.abs(rng.normal(size=(1, 3))) + 0.5

    def f(av, bv):
        return ad.sum(ad.square(op(av, bv)))

    tape = ad.Tape()
    av, bv = tape.var(a), tape.var(b)
    ga, gb = ad.grad(f(av, bv), [av, bv])
    num_a = central_diff(lambda z: float(f(ad.const(z), ad.const(b)).value), a)
    num_b = central_diff(lambda z: float(f(ad.const(a), ad.const(z)).value), b)
    assert rel_err(ga.value, num_a) < 1e-6
    assert rel_err(gb.value, num_b) < 1e-6


def test_matmul_solve_structural_ops(rng):
    A = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    B = rng.normal(size=(4, 2))

    def f(Av, Bv):
        X = ad.solve(Av, Bv)
        Y = ad.matmul(ad.transpose(X), Bv)
        Z = ad.concat([ad.reshape(Y, (-1,)), ad.getitem(ad.stack([X[:, 0], X[:, 1]], axis=0), (0, slice(None)))], axis=0)
        return ad.sum(ad.sin(Z)) + ad.mean(ad.where(X.value > 0, X, 0.0))

    tape = ad.Tape()
    Av, Bv = tape.var(A), tape.var(B)
    gA, gB = ad.grad(f(Av, Bv), [Av, Bv])
    assert rel_err(gA.value, central_diff(lambda z: float(f(ad.const(z), ad.const(B)).value), A)) < 1e-6
    assert rel_err(gB.value, central_diff(lambda z: float(f(ad.const(A), ad.const(z)).value), B)) < 1e-6


def test_solve_matches_numpy(rng):
    A = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    b = rng.normal(size=(5, 3))
    assert np.allclose(ad.solve(A, b).value, np.linalg.solve(A, b), atol=1e-14)


def test_trivial_derivatives():
    assert _grad1(ad.log1p, np.array(0.0)) == 1.0
    assert _grad1(lambda v: ad.sum(ad.relu(v)), np.array([-1.0, 0.0, 1.0])).tolist() == [0.0, 0.0, 1.0]
    # tie derivative of max/min with a constant is zero
    assert _grad1(lambda v: ad.sum(ad.max_with_const(v, 0.5)), np.array([0.5])).tolist() == [0.0]
    assert _grad1(lambda v: ad.sum(ad.min_with_const(v, 0.5)), np.array([0.5])).tolist() == [0.0]

    tape = ad.Tape()
    x, y = tape.var(2.0), tape.var(3.0)
    gx, gy = ad.grad(x * y, [x, y])
    assert (gx.value, gy.value) == (3.0, 2.0)

    tape = ad.Tape()
    x = tape.var(2.0)
    (d1,) = ad.grad(x * x * x, [x], create_graph=True)
    (d2,) = ad.grad(d1, [x])
    assert float(d2.value) == 12.0


def test_mlp_jacobian(rng):
    W1, b1 = rng.normal(size=(5, 3)), rng.normal(size=5)
    W2, b2 = rng.normal(size=(2, 5)), rng.normal(size=2)
    x = rng.normal(size=(4, 3))

    def net(params):
        w1 = ad.reshape(params[0:15], (5, 3))
        h = ad.relu(ad.matmul(ad.const(x), ad.transpose(w1)) + params[15:20])
        w2 = ad.reshape(params[20:30], (2, 5))
        return ad.exp(ad.matmul(h, ad.transpose(w2)) + params[30:32])

    theta = np.concatenate([W1.ravel(), b1, W2.ravel(), b2])
    vec = rng.normal(size=(4, 2))
    tape = ad.Tape()
    tv = tape.var(theta)
    (g,) = ad.grad(ad.sum(ad.mul(net(tv), vec)), [tv])
    num = central_diff(lambda p: float(np.sum(net(ad.const(p)).value * vec)), theta)
    assert rel_err(g.value, num) < 1e-4


def test_linearity(rng):
    x = rng.normal(size=6)
    f = lambda v: ad.sum(ad.sin(v) * v)
    g = lambda v: ad.sum(ad.exp(v * 0.3))
    a, b = 1.7, -0.4
    lhs = _grad1(lambda v: a * f(v) + b * g(v), x)
    rhs = a * _grad1(f, x) + b * _grad1(g, x)
    assert np.allclose(lhs, rhs, rtol=1e-13, atol=1e-14)


def test_determinism(rng):
    x = rng.normal(size=(8, 3))
    f = lambda v: ad.sum(ad.log1p(ad.square(ad.matmul(v, ad.transpose(v)))))
    assert np.array_equal(_grad1(f, x), _grad1(f, x))


def test_maml_toy_meta_gradient():
    """Second-order meta-gradient through 20 inner steps vs differences of the trained loss."""
    a_train, a_eval = np.array([1.0, -2.0]), np.array([1.3, -1.5])
    lr, steps = 0.1, 20

    def inner_loss(th):
        return ad.sum(ad.square(ad.sin(th) - a_train * 0.3) + 0.1 * th * th)

    def trained_loss(init_v):
        th = init_v
        for _ in range(steps):
            (g,) = ad.grad(inner_loss(th), [th], create_graph=True)
            th = th - lr * g
        return ad.sum(ad.square(th - a_eval))

    init = np.array([0.2, 0.4])
    tape = ad.Tape()
    iv = tape.var(init)
    (meta,) = ad.grad(trained_loss(iv), [iv])

    def plain(z):
        t = ad.Tape()
        return float(trained_loss(t.var(z)).value)

    num = central_diff(plain, init, h=1e-5)
    assert rel_err(meta.value, num) < 1e-3


def test_quadratic_contraction():
    a, lr = 3.0, 0.1
    tape = ad.Tape()
    th = tape.var(5.0)
    for _ in range(20):
        (g,) = ad.grad((th - a) * (th - a), [th], create_graph=True)
        th = th - lr * g
    assert abs(float(th.value) - a) == pytest.approx(2.0 * 0.8 ** 20, rel=1e-12)


def test_disconnected_input_counts():
    tape = ad.Tape()
    x, y = tape.var(1.0), tape.var(2.0)
    gx, gy = ad.grad(x * 3.0, [x, y])
    assert float(gy.value) == 0.0 and float(gx.value) == 3.0
    assert tape.disconnected == 1


def test_errors():
    with pytest.raises(ad.NanGuard):
        ad.log(ad.const(np.array([-1.0])))
    with pytest.raises(ad.ShapeMismatch):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    tape = ad.Tape()
    with pytest.raises(ad.ShapeMismatch):
        x = tape.var(np.ones(3))
        ad.grad(x * 2.0, [x])
    small = ad.Tape(budget=5)
    with pytest.raises(ad.TapeBudgetExceeded):
        v = small.var(1.0)
        for _ in range(10):
            v = v + 1.0


def test_no_grad_records_nothing():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    with ad.no_grad():
        y = ad.exp(x) * 2.0
    assert not y.tracked and len(tape) == 1


def test_gather_trilinear_matches_scipy_and_fd(rng):
    table = rng.normal(size=(6, 5, 8, 2))
    t = np.column_stack([rng.uniform(0.1, 4.9, 20), rng.uniform(0.1, 3.9, 20), rng.uniform(0, 8, 20)])
    # keep away from cell faces so central differences stay inside one cell
    t = t[np.all(np.abs(t - np.round(t)) > 0.02, axis=1)]
    val = ad.gather_trilinear(table, t).value
    wrapped = np.concatenate([table, table[:, :, :1]], axis=2)
    ref = RegularGridInterpolator((np.arange(6), np.arange(5), np.arange(9)), wrapped)(t)
    assert np.allclose(val, ref, atol=1e-12)

    w = rng.normal(size=(t.shape[0], 2))
    f = lambda z: ad.sum(ad.gather_trilinear(table, z) * w)
    assert rel_err(_grad1(f, t), central_diff(lambda z: float(f(ad.const(z)).value), t, 1e-6)) < 1e-6

    # second order: the mixed partials of a trilinear cell are constant
    tape = ad.Tape()
    tv = tape.var(t)
    (g,) = ad.grad(f(tv), [tv], create_graph=True)
    (h,) = ad.grad(ad.sum(g[:, 0]), [tv])
    fd = (_grad1(f, t + [0, 1e-5, 0])[:, 0] - _grad1(f, t - [0, 1e-5, 0])[:, 0]) / 2e-5
    assert np.allclose(h.value[:, 1], fd, atol=1e-6)


def test_make_function():
    vg = ad.make_function(lambda a, b: ad.sum(a * b))
    val, (ga, gb) = vg(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert val == 11.0 and ga.tolist() == [3.0, 4.0] and gb.tolist() == [1.0, 2.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-2, 2))
def test_property_product_rule(xs, c):
    x = np.array(xs)
    g = _grad1(lambda v: ad.sum(v * ad.sin(v) + c * v), x)
    assert np.allclose(g, np.sin(x) + x * np.cos(x) + c, atol=1e-12)
