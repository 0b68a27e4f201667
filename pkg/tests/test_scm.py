import numpy as np
import pytest
from scipy.optimize import brentq

from spacycd import autodiff as ad
from spacycd import scm


def _random_raw(rng, shape, scale=1.0):
    return rng.normal(0.0, scale, size=tuple(shape) + (scm.spline_param_count(),))


# ------------------------------------------------------------- graph utils


def test_topological_order_and_dag_check():
    chain = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    assert scm.topological_order(chain) == [0, 1, 2]
    assert not scm.is_dag(chain + chain.T)
    assert scm.is_dag(np.zeros((4, 4)))


def test_edge_mask_forbids_only_instantaneous_self_loops():
    m = scm.edge_mask(3, 2)
    assert m.shape == (3, 3, 3)
    assert np.trace(m[0]) == 0 and m[0].sum() == 6
    assert np.all(m[1:] == 1)


# ------------------------------------------------------------- linear mean


def test_linear_mean_examples():
    D, lag = 3, 1
    rng = np.random.default_rng(0)
    W = rng.normal(size=(lag + 1, D, D))
    zh = rng.normal(size=(D, lag + 1))
    assert np.all(scm.linear_mean(zh, np.zeros_like(W), W).data == 0)
    G = np.array([[[0.0]], [[1.0]]])
    out = scm.linear_mean(np.array([[9.0, 2.0]]), G, np.array([[[0.0]], [[0.5]]]))
    assert out.data[0] == pytest.approx(1.0)


def test_linear_mean_matches_loops():
    rng = np.random.default_rng(1)
    D, lag = 2, 1
    W = rng.normal(size=(lag + 1, D, D))
    G = np.ones_like(W)
    G[0] = [[0, 1], [0, 0]]
    zh = rng.normal(size=(D, lag + 1))
    ref = np.zeros(D)
    for d in range(D):
        for k in range(lag + 1):
            for j in range(D):
                ref[d] += G[k, j, d] * W[k, j, d] * zh[j, k]
    np.testing.assert_array_equal(scm.linear_mean(zh, G, W).data, ref)


def test_linear_means_batch_matches_single_step():
    rng = np.random.default_rng(2)
    D, lag, T = 3, 2, 7
    W = rng.normal(size=(lag + 1, D, D))
    G = (rng.random((lag + 1, D, D)) < 0.5).astype(float)
    Z = rng.normal(size=(2, D, T))
    M = scm.linear_means(Z, G, W, lag).data
    for b in range(2):
        for t in range(lag, T):
            zh = Z[b][:, t - np.arange(lag + 1)]
            np.testing.assert_allclose(M[b, :, t - lag], scm.linear_mean(zh, G, W).data, rtol=1e-12)


def test_linear_mean_with_full_graph_is_contraction():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(3, 4, 4))
    zh = rng.normal(size=(4, 3))
    np.testing.assert_allclose(scm.linear_mean(zh, np.ones_like(W), W).data, np.einsum("kjd,jk->d", W, zh), rtol=1e-12)


# ---------------------------------------------------------- nonlinear mean


@pytest.fixture
def nl_params():
    rng = np.random.default_rng(4)
    return scm.init_nonlinear_params(rng, n_nodes=3, lag=1, embed_dim=4, hidden=8)


def test_nonlinear_mean_empty_graph(nl_params):
    rng = np.random.default_rng(5)
    G = np.zeros((2, 3, 3))
    p = dict(nl_params)
    p["scm.emb"] = np.broadcast_to(p["scm.emb"][:, :1], p["scm.emb"].shape).copy()
    a = scm.nonlinear_mean(rng.normal(size=(3, 2)), G, p, 1).data
    b = scm.nonlinear_mean(rng.normal(size=(3, 2)), G, p, 1).data
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    assert np.allclose(a, a[0])


def test_nonlinear_mean_is_permutation_equivariant(nl_params):
    rng = np.random.default_rng(6)
    G = (rng.random((2, 3, 3)) < 0.6).astype(float)
    G[0] = np.triu(G[0], 1)
    zh = rng.normal(size=(3, 2))
    perm = np.array([2, 0, 1])
    p2 = dict(nl_params)
    p2["scm.emb"] = nl_params["scm.emb"][:, perm]
    out = scm.nonlinear_mean(zh, G, nl_params, 1).data
    out_p = scm.nonlinear_mean(zh[perm], G[:, perm][:, :, perm], p2, 1).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12)


def test_nonlinear_mean_embedding_gradient(nl_params):
    rng = np.random.default_rng(7)
    G = (rng.random((2, 3, 3)) < 0.6).astype(float)
    zh = rng.normal(size=(3, 2))
    w = rng.normal(size=3)

    def f(t):
        p = dict(nl_params)
        p["scm.emb"] = t
        return ad.sum(scm.nonlinear_mean(zh, G, p, 1) * w)

    assert ad.grad_check(f, nl_params["scm.emb"]).passed


# ------------------------------------------------------------------ spline


def test_identity_spline():
    x = np.linspace(-7, 7, 301)
    raw = scm.identity_spline_params(x.shape)
    y, ld = scm.spline_forward(x, raw)
    np.testing.assert_allclose(y.data, x, atol=1e-12)
    np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)
    xi, ldi = scm.spline_inverse(x, raw)
    np.testing.assert_allclose(xi.data, x, atol=1e-12)
    np.testing.assert_allclose(ldi.data, 0.0, atol=1e-12)


def test_spline_tails_are_identity():
    rng = np.random.default_rng(8)
    x = np.array([-9.0, -5.0, 5.0, 12.0])
    y, ld = scm.spline_forward(x, _random_raw(rng, x.shape, 2.0))
    np.testing.assert_array_equal(y.data, x)
    np.testing.assert_array_equal(ld.data, 0.0)


def test_spline_round_trip_and_logdet_cancel():
    rng = np.random.default_rng(9)
    x = rng.uniform(-6, 6, size=10_000)
    raw = _random_raw(rng, x.shape, 1.5)
    y, ld = scm.spline_forward(x, raw)
    xr, ldi = scm.spline_inverse(y.data, raw)
    assert np.max(np.abs(xr.data - x)) < 1e-6
    assert np.max(np.abs(ld.data + ldi.data)) < 1e-8


def test_spline_strictly_increasing():
    rng = np.random.default_rng(10)
    mesh = np.linspace(-5.5, 5.5, 1000)
    for _ in range(20):
        raw = np.broadcast_to(_random_raw(rng, (), 2.0), mesh.shape + (scm.spline_param_count(),))
        y, _ = scm.spline_forward(mesh, raw)
        assert np.all(np.diff(y.data) > 0)


def test_spline_inverse_matches_bisection():
    rng = np.random.default_rng(11)
    for _ in range(50):
        raw = _random_raw(rng, (), 1.5)
        target = rng.uniform(-4.9, 4.9)

        def fwd(v):
            return float(scm.spline_forward(np.array([v]), raw[None])[0].data[0])

        root = brentq(lambda v: fwd(v) - target, -5.0, 5.0, xtol=1e-12)
        x, _ = scm.spline_inverse(np.array([target]), raw[None])
        assert abs(x.data[0] - root) < 1e-6


def test_spline_logdet_matches_finite_difference():
    rng = np.random.default_rng(12)
    x = rng.uniform(-4.5, 4.5, size=200)
    raw = _random_raw(rng, x.shape)
    eps = 1e-6
    yp, _ = scm.spline_forward(x + eps, raw)
    ym, _ = scm.spline_forward(x - eps, raw)
    _, ld = scm.spline_forward(x, raw)
    fd = np.log((yp.data - ym.data) / (2 * eps))
    np.testing.assert_allclose(ld.data, fd, atol=1e-4, rtol=0)


def test_spline_logdet_gradient_wrt_parameters():
    rng = np.random.default_rng(13)
    x = rng.uniform(-4, 4, size=5)
    raw = _random_raw(rng, x.shape)
    w = rng.normal(size=5)
    assert ad.grad_check(lambda t: ad.sum(scm.spline_forward(x, t)[1] * w), raw).passed
    assert ad.grad_check(lambda t: ad.sum(scm.spline_inverse(x, t)[0] * w), raw).passed
    assert ad.grad_check(lambda t: ad.sum(scm.spline_inverse(t, raw)[1] * w), x).passed


def test_spline_rejects_non_finite_parameters():
    raw = scm.identity_spline_params((1,))
    raw[0, 3] = np.nan
    with pytest.raises(ValueError):
        scm.spline_forward(np.zeros(1), raw)


# -------------------------------------------------------------- likelihood


def test_linear_loglik_zero_residual():
    D, T = 2, 4
    Z = np.zeros((1, D, T))
    params = {"scm.W": np.zeros((2, D, D)), "scm.logvar": np.zeros(D)}
    ll = scm.latent_loglik(Z, np.ones((2, D, D)), params, "linear", 1).data
    assert ll == pytest.approx(-0.5 * np.log(2 * np.pi) * D * (T - 1))
    assert -0.5 * np.log(2 * np.pi) == pytest.approx(-0.918939, abs=1e-6)


def test_linear_loglik_hand_summed():
    Z = np.array([[[0.3, -1.2, 0.7]]])
    G = np.array([[[0.0]], [[1.0]]])
    W = np.array([[[0.0]], [[0.5]]])
    lv = np.array([np.log(0.8)])
    ll = scm.latent_loglik(Z, G, {"scm.W": W, "scm.logvar": lv}, "linear", 1).data
    ref = 0.0
    for t in (1, 2):
        r = Z[0, 0, t] - 0.5 * Z[0, 0, t - 1]
        ref += -0.5 * (np.log(2 * np.pi * 0.8) + r * r / 0.8)
    assert ll == pytest.approx(ref, rel=1e-12)


def test_nonlinear_loglik_identity_spline_is_standard_normal():
    rng = np.random.default_rng(14)
    D, T = 2, 5
    p = scm.init_nonlinear_params(rng, D, 1, embed_dim=4, hidden=8)
    for k in list(p):
        if k.startswith("scm.xi_eta.w") or k.startswith("scm.xi_eta.b"):
            p[k] = np.zeros_like(p[k])
    Z = rng.normal(size=(1, D, T))
    G = np.ones((2, D, D))
    G[0] = [[0, 1], [0, 0]]
    u = Z[:, :, 1:] - scm.nonlinear_means(Z, G, p, 1).data
    ll = scm.latent_loglik(Z, G, p, "nonlinear", 1).data
    assert ll == pytest.approx(np.sum(-0.5 * (u**2 + np.log(2 * np.pi))), rel=1e-12)


def test_nonlinear_loglik_gradients():
    rng = np.random.default_rng(15)
    D, T = 2, 5
    p = scm.init_nonlinear_params(rng, D, 1, embed_dim=3, hidden=5)
    # larger spline head so the flow is not close to the identity
    p["scm.xi_eta.w2"] = p["scm.xi_eta.w2"] * 100
    Z = rng.normal(size=(1, D, T))
    G = np.ones((2, D, D))
    G[0] = [[0, 1], [0, 0]]
    for name in sorted(p):
        def f(t, name=name):
            q = dict(p)
            q[name] = t
            return scm.latent_loglik(Z, G, q, "nonlinear", 1)

        rep = ad.grad_check(f, p[name])
        assert rep.passed, (name, rep.max_rel_error)


def test_gaussian_logpdf_sum_matches_elementwise():
    rng = np.random.default_rng(16)
    x, m = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
    lv = rng.normal(size=(1, 3, 1, 1))
    assert scm.gaussian_logpdf_sum(x, m, lv).data == pytest.approx(ad.sum(scm.gaussian_logpdf(x, m, lv)).data, rel=1e-12)
    assert ad.grad_check(lambda t: scm.gaussian_logpdf_sum(x, t, lv), m).passed
    assert ad.grad_check(lambda t: scm.gaussian_logpdf_sum(x, m, t), lv).passed


# ------------------------------------------------------------ acyclicity


def test_acyclicity_examples():
    assert scm.acyclicity(np.zeros((4, 4))).data == 0.0
    assert scm.acyclicity(np.array([[0.0, 1.0], [1.0, 0.0]])).data == pytest.approx(2 * np.cosh(1) - 2, abs=1e-6)
    rng = np.random.default_rng(17)
    U = np.triu(rng.normal(size=(6, 6)), 1)
    assert abs(scm.acyclicity(U).data) < 1e-10


def test_zero_penalty_implies_dag():
    rng = np.random.default_rng(18)
    for _ in range(100):
        D = rng.integers(2, 8)
        perm = rng.permutation(D)
        M = np.triu(rng.uniform(0.1, 2, (D, D)) * (rng.random((D, D)) < 0.5), 1)[perm][:, perm]
        assert abs(scm.acyclicity(M).data) < 1e-10
        assert scm.is_dag(M > 0)


def test_graph_prior_examples():
    assert scm.graph_prior_logp(np.zeros((2, 3, 3)), 10.0, 5.0).data == 0.0
    G = np.zeros((2, 3, 3))
    G[1, 0, 2] = 1
    assert scm.graph_prior_logp(G, 10.0).data == pytest.approx(-10.0)
    G[0, 0, 1] = 1
    assert scm.graph_prior_logp(G, 10.0, 123.0).data == pytest.approx(-20.0)
    with pytest.raises(ValueError):
        scm.graph_prior_logp(G, -1.0)
