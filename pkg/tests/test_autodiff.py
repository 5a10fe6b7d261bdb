import numpy as np
import pytest

from hybridcal import autodiff as ad
from hybridcal.errors import NonFiniteError, TapeMemoryError

from helpers import central_diff_grad


def _params(seed, shapes):
    rng = np.random.default_rng(seed)
    return ad.ParamVector.pack([(n, rng.standard_normal(s)) for n, s in shapes])


def test_grad_matches_finite_difference():
    # tanh/matvec/square/sum chain, checked against central differences
    for seed in range(5):
        params = _params(seed, [("w", (4, 3)), ("b", (4,))])
        x = np.random.default_rng(100 + seed).standard_normal(3)

        def program(tape, leaves):
            w, b = leaves
            y = tape.tanh(tape.matvec(w, tape.const(x)) + b)
            return tape.sum(tape.square(y)) + tape.dot(b, b)

        def value(theta):
            w = theta[:12].reshape(4, 3)
            b = theta[12:]
            y = np.tanh(w @ x + b)
            return np.sum(y * y) + np.dot(b, b)

        got = ad.grad_scalar(program, params)
        want = central_diff_grad(value, params.data)
        assert np.abs(got - want).max() < 1e-8


def test_grad_mul_div_exp_scale():
    for seed in range(5):
        params = _params(seed, [("a", (6,)), ("b", (6,))])
        shift = 3.0  # keeps the divisor away from zero

        def program(tape, leaves):
            a, b = leaves
            bb = b * b + shift
            t = tape.exp(a * 0.1) * b - a / bb
            return tape.sum(t * 0.5) - tape.sum(a - b)

        def value(theta):
            a, b = theta[:6], theta[6:]
            bb = b * b + shift
            t = np.exp(a * 0.1) * b - a / bb
            return np.sum(t * 0.5) - np.sum(a - b)

        got = ad.grad_scalar(program, params)
        want = central_diff_grad(value, params.data)
        assert np.abs(got - want).max() < 1e-8


def test_broadcast_gradient_sums_over_batch():
    params = _params(0, [("b", (3,))])
    x = np.random.default_rng(1).standard_normal((5, 3))

    def program(tape, leaves):
        return tape.sum(tape.const(x) * leaves[0])

    got = ad.grad_scalar(program, params)
    assert np.allclose(got, x.sum(axis=0), atol=1e-14)


def test_matvec_batched_rows():
    # one tape evaluation carries a whole minibatch
    params = _params(3, [("w", (2, 3))])
    x = np.random.default_rng(4).standard_normal((7, 3))

    def program(tape, leaves):
        return tape.sum(tape.square(tape.matvec(leaves[0], tape.const(x))))

    def value(theta):
        w = theta.reshape(2, 3)
        return np.sum((x @ w.T) ** 2)

    got = ad.grad_scalar(program, params)
    want = central_diff_grad(value, params.data)
    assert np.abs(got - want).max() < 1e-7


def test_jacobian_params_rows():
    params = _params(7, [("w", (3, 2)), ("b", (3,))])
    x = np.random.default_rng(8).standard_normal(2)

    def program(tape, leaves):
        w, b = leaves
        return tape.tanh(tape.matvec(w, tape.const(x)) + b)

    jac = ad.jacobian_params(program, params)
    assert jac.shape == (3, params.size)
    for k in range(3):
        def row(theta, k=k):
            w = theta[:6].reshape(3, 2)
            b = theta[6:]
            return np.tanh(w @ x + b)[k]

        want = central_diff_grad(row, params.data)
        assert np.abs(jac[k] - want).max() < 1e-8


def test_jacobian_params_rejects_nonvector():
    params = _params(0, [("w", (2, 2))])

    def program(tape, leaves):
        return tape.sum(leaves[0])

    with pytest.raises(ValueError):
        ad.jacobian_params(program, params)


def test_backward_needs_scalar_or_cotangent():
    tape = ad.Tape()
    x = tape.input(np.ones(3))
    y = tape.square(x)
    with pytest.raises(ValueError):
        tape.backward(y, [x])
    g = tape.backward(y, [x], cotangent=np.array([1.0, 0.0, 2.0]))
    assert np.allclose(g[0], [2.0, 0.0, 4.0])


def test_cross_tape_operands_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.input(1.0)
    b = t2.input(2.0)
    with pytest.raises(ValueError):
        t1.add(a, b)


def test_nonfinite_primitive_raises():
    tape = ad.Tape()
    a = tape.input(np.array([1.0]))
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        tape.div(a, tape.const(np.array([0.0])))


def test_node_limit_enforced():
    params = _params(0, [("a", (3,))])

    def program(tape, leaves):
        x = leaves[0]
        for _ in range(50):
            x = tape.tanh(x)
        return tape.sum(x)

    with pytest.raises(TapeMemoryError):
        ad.grad_scalar(program, params, node_limit=10)


def test_gradient_bitwise_deterministic():
    params = _params(11, [("w", (5, 5)), ("b", (5,))])
    x = np.random.default_rng(12).standard_normal((4, 5))

    def program(tape, leaves):
        w, b = leaves
        return tape.sum(tape.square(tape.tanh(tape.matvec(w, tape.const(x)) + b)))

    g1 = ad.grad_scalar(program, params)
    g2 = ad.grad_scalar(program, params)
    assert np.array_equal(g1, g2)


def test_dual_seed_identity_tangents():
    u = np.random.default_rng(0).standard_normal((2, 3))
    d = ad.Dual.seed(u)
    assert d.tan.shape == (2, 3, 3)
    assert np.array_equal(d.tan[0], np.eye(3))


def test_dual_arithmetic_matches_finite_difference():
    rng = np.random.default_rng(5)
    u0 = rng.standard_normal(4)

    def f(u):
        return (2.0 * u - 1.0) * ad.exp(0.1 * u) / (ad.square(u) + 2.0) + ad.tanh(u)

    out = f(ad.Dual.seed(u0))
    jac = out.tan
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-6
        col = (np.asarray(f(u0 + e)) - np.asarray(f(u0 - e))) / 2e-6
        assert np.abs(jac[:, i] - col).max() < 1e-7


def test_jacobian_input_helper():
    w = np.random.default_rng(6).standard_normal((3, 3))

    def f(u):
        return ad.tanh(ad.matvec(w, u))

    u = np.random.default_rng(7).standard_normal(3)
    jac = ad.jacobian_input(f, u)
    y = np.tanh(w @ u)
    want = (1.0 - y * y)[:, None] * w
    assert np.abs(jac - want).max() < 1e-12


def test_paramvector_pack_and_views():
    pv = _params(0, [("w", (2, 3)), ("b", (3,))])
    assert pv.size == 9
    w, b = pv.views()
    assert w.shape == (2, 3) and b.shape == (3,)
    # views alias the flat buffer
    pv.data[:] = np.arange(9.0)
    assert np.array_equal(pv.view("w"), np.arange(6.0).reshape(2, 3))
    assert np.array_equal(pv.view("b"), np.array([6.0, 7.0, 8.0]))
    with pytest.raises(KeyError):
        pv.view("missing")


def test_paramvector_flatten_like_validation():
    pv = _params(1, [("w", (2, 2)), ("b", (2,))])
    flat = pv.flatten_like([np.ones((2, 2)), np.zeros(2)])
    assert np.array_equal(flat, np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        pv.flatten_like([np.ones((2, 2))])
    with pytest.raises(ValueError):
        pv.flatten_like([np.ones((2, 2)), np.zeros(3)])


def test_paramvector_copy_is_independent():
    pv = _params(2, [("b", (3,))])
    cp = pv.copy()
    cp.data[:] = 0.0
    assert not np.array_equal(pv.data, cp.data)
