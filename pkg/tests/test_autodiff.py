import numpy as np
import pytest

from spacycd import autodiff as ad


def _shape(rng, ndim=None):
    ndim = rng.integers(1, 4) if ndim is None else ndim
    return tuple(int(n) for n in rng.integers(1, 4, size=ndim))


def _check(f, x, tol=1e-4):
    rep = ad.grad_check(f, x, tol=tol)
    assert rep.passed, f"max rel error {rep.max_rel_error:.3g}"


UNARY = {
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "sqrt": (ad.sqrt, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "square": (ad.square, lambda r, s: r.normal(size=s)),
    "sigmoid": (ad.sigmoid, lambda r, s: r.normal(size=s)),
    "log_sigmoid": (ad.log_sigmoid, lambda r, s: r.normal(size=s) * 3),
    "softplus": (ad.softplus, lambda r, s: r.normal(size=s) * 3),
    "tanh": (ad.tanh, lambda r, s: r.normal(size=s)),
    "sin": (ad.sin, lambda r, s: r.normal(size=s)),
    "cos": (ad.cos, lambda r, s: r.normal(size=s)),
    # keep away from the kink, where central differences are meaningless
    "leaky_relu": (ad.leaky_relu, lambda r, s: np.sign(r.normal(size=s)) * r.uniform(0.1, 2.0, size=s)),
    "power": (lambda x: ad.power(x, 1.7), lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "neg": (ad.neg, lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_on_random_inputs(name):
    op, draw = UNARY[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(100):
        s = _shape(rng)
        x = draw(rng, s)
        w = rng.normal(size=s)
        _check(lambda t: ad.sum(op(t) * w), x)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": ad.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("side", [0, 1])
def test_binary_gradients_with_broadcasting(name, side):
    op = BINARY[name]
    rng = np.random.default_rng(7 + side)
    for _ in range(100):
        s = _shape(rng, 3)
        # the other operand broadcasts along a random subset of axes
        s_other = tuple(n if rng.random() < 0.5 else 1 for n in s)[rng.integers(0, 3):]
        x = rng.normal(size=s) if side == 0 else rng.normal(size=s_other)
        other = rng.normal(size=s_other) if side == 0 else rng.normal(size=s)
        if name == "div":
            if side == 1:
                x = np.sign(x) * (np.abs(x) + 0.5)
            else:
                other = np.sign(other) * (np.abs(other) + 0.5)
        w = rng.normal(size=np.broadcast_shapes(np.shape(x), np.shape(other)))
        if side == 0:
            _check(lambda t: ad.sum(op(t, other) * w), x)
        else:
            _check(lambda t: ad.sum(op(other, t) * w), x)


def test_matmul_and_batched_matmul_gradients():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, k, m = rng.integers(1, 4, size=3)
        b = rng.integers(1, 3)
        A = rng.normal(size=(b, n, k))
        B = rng.normal(size=(k, m))
        W = rng.normal(size=(b, n, m))
        _check(lambda t: ad.sum(ad.matmul(t, B) * W), A)
        _check(lambda t: ad.sum(ad.matmul(A, t) * W), B)
    v = rng.normal(size=3)
    M = rng.normal(size=(2, 3))
    _check(lambda t: ad.sum(ad.matmul(M, t)), v)
    _check(lambda t: ad.sum(ad.matmul(t, v)), M)


def test_reductions_and_shape_ops():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(3, 4))
    r0 = rng.normal(size=(4, 2, 3))
    r1 = rng.normal(size=(4, 3, 2))
    r2 = rng.normal(size=(5, 3, 4))
    r3 = rng.normal(size=(2, 1, 3, 4))
    r4 = rng.normal(size=(2, 2, 2))
    r5 = rng.normal(size=(2, 3, 4))
    r6 = rng.normal(size=(2, 6, 4))
    r7 = rng.normal(size=(2, 2, 3, 4))
    r8 = rng.normal(size=(2, 3, 2))
    r9 = rng.normal(size=(2, 3, 4))
    r10 = rng.normal(size=(2, 3, 4))
    idx = rng.integers(0, 4, size=(2, 3, 2))
    checks = [
        lambda t: ad.sum(ad.sum(t, axis=0) * w),
        lambda t: ad.sum(ad.mean(t, axis=(0, 2)) * w[:, 0]),
        lambda t: ad.sum(ad.cumsum(t, axis=2) * w),
        lambda t: ad.sum(ad.logsumexp(t, axis=1) * w[0, :4]),
        lambda t: ad.sum(ad.softmax(t, axis=-1) * w),
        lambda t: ad.sum(ad.reshape(t, (6, 4)) * np.tile(w, (2, 1))),
        lambda t: ad.sum(ad.transpose(t, (2, 0, 1)) * r0),
        lambda t: ad.sum(ad.swapaxes(t, 0, 2) * r1),
        lambda t: ad.sum(ad.broadcast_to(t[:1], (5, 3, 4)) * r2),
        lambda t: ad.sum(ad.expand_dims(t, 1) * r3),
        lambda t: ad.sum(t[:, 1:, ::2] * r4),
        lambda t: ad.sum(t[:, [0, 0, 2]] * r5),
        lambda t: ad.sum(ad.concat([t, ad.square(t)], axis=1) * r6),
        lambda t: ad.sum(ad.stack([t, t * 2.0], axis=0) * r7),
        lambda t: ad.sum(ad.take_along_axis(t, idx, axis=2) * r8),
        lambda t: ad.sum(ad.where(x > 0, t, ad.square(t)) * r9),
        lambda t: ad.sum(ad.maximum(t, 0.3 * t + 0.01) * r10),
    ]
    for i, f in enumerate(checks):
        rep = ad.grad_check(f, x)
        assert rep.passed, (i, rep.max_rel_error)


def test_trace_expm_gradient():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = rng.integers(1, 5)
        M = rng.normal(size=(n, n)) * 0.7
        _check(lambda t: ad.trace_expm(t), M)


def test_expm_matches_scipy():
    from scipy.linalg import expm

    rng = np.random.default_rng(6)
    for scale in (0.1, 1.0, 5.0):
        A = rng.normal(size=(5, 5)) * scale
        np.testing.assert_allclose(ad.expm(A), expm(A), rtol=1e-10, atol=1e-10)


def test_forward_examples():
    assert np.array_equal(ad.matmul(np.array([[1.0, 2], [3, 4]]), np.eye(2)).data, [[1, 2], [3, 4]])
    assert ad.exp(np.array([0.0])).data.tolist() == [1.0]
    assert ad.leaky_relu(np.array(-2.0)).data == pytest.approx(-0.02)


def test_backward_examples():
    tape = ad.Tape()
    x = tape.leaf(3.0, "x")
    assert ad.backward(tape, x * x)["x"] == pytest.approx(6.0)

    tape = ad.Tape()
    W = tape.leaf(np.arange(4.0).reshape(2, 2), "W")
    g = ad.backward(tape, ad.sum(ad.matmul(W, np.ones(2))))["W"]
    assert np.array_equal(g, np.ones((2, 2)))


def test_backward_requires_scalar_and_reports_unreached_leaves():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3), "x")
    y = tape.leaf(np.ones(2), "y")
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, x * 2.0)
    g = ad.backward(tape, ad.sum(x))
    assert np.array_equal(g["y"], np.zeros(2))


def test_grad_check_cubic():
    rep = ad.grad_check(lambda t: ad.sum(ad.power(t, 3.0)), np.array([2.0]), step=1e-5)
    assert rep.analytic[0] == pytest.approx(12.0)
    assert abs(rep.numeric[0] - 12.0) < 1e-6
    assert rep.passed


def test_domain_and_shape_errors():
    with pytest.raises(ad.DomainError):
        ad.log(np.array([0.0, 1.0]))
    with pytest.raises(ad.DomainError):
        ad.sqrt(np.array([-1.0]))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones(3), np.ones(2))
    with pytest.raises((ad.ShapeError, ValueError)):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_straight_through_uses_hard_forward_soft_backward():
    tape = ad.Tape()
    s = tape.leaf(np.array([0.3, 0.8]), "s")
    out = ad.straight_through(np.array([0.0, 1.0]), s)
    assert np.array_equal(out.data, [0.0, 1.0])
    g = ad.backward(tape, ad.sum(out * np.array([2.0, 3.0])))["s"]
    assert np.array_equal(g, [2.0, 3.0])


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(20, 30))
    B = rng.normal(size=(30, 10))

    def run():
        tape = ad.Tape()
        a = tape.leaf(A, "a")
        out = ad.sum(ad.tanh(ad.matmul(a, B)) * 1.5)
        return ad.backward(tape, out)["a"]

    assert np.array_equal(run(), run())


def test_float32_tensors_stay_float32_with_python_scalars():
    x = ad.Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert ad.exp(x / 3.0).dtype == np.float32
