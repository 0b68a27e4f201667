import numpy as np
import pytest

from spacycd import autodiff as ad
from spacycd import variational as vi
from spacycd.spatial import GridSpec, differentiable_factor

N_MC = 100_000


def _within_3se(samples, target):
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - target) < 3 * se + 1e-12, (samples.mean(), target, se)


# -------------------------------------------------------------------- q(G)


def test_saturated_logit_samples_one():
    rng = np.random.default_rng(0)
    s = vi.sample_graph(np.full((2, 3, 3), 30.0), rng, hard=False)
    assert np.all(s.data > 0.999999)


def test_zero_logit_hard_sample_mean():
    rng = np.random.default_rng(1)
    s = vi.sample_graph(np.zeros(N_MC), rng, hard=True).data
    assert set(np.unique(s)) <= {0.0, 1.0}
    assert abs(s.mean() - 0.5) < 0.005


def test_hard_sample_frequency_matches_edge_probability():
    rng = np.random.default_rng(2)
    logits = np.array([-2.0, -0.5, 1.0, 3.0])
    s = vi.sample_graph(np.broadcast_to(logits, (N_MC, 4)).copy(), rng).data
    p = 1 / (1 + np.exp(-logits))
    se = np.sqrt(p * (1 - p) / N_MC)
    assert np.all(np.abs(s.mean(0) - p) < 3 * se + 1e-3)


def test_sample_gradient_is_positive():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    logits = tape.leaf(rng.normal(0, 2, size=100), "w")
    g = ad.backward(tape, ad.sum(vi.sample_graph(logits, rng)))["w"]
    assert np.all(g > 0)


def test_sample_graph_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        vi.sample_graph(np.zeros(3), np.random.default_rng(0), temperature=0.0)


def test_mask_zeroes_self_loops():
    mask = np.ones((2, 3, 3))
    mask[0][np.diag_indices(3)] = 0
    s = vi.sample_graph(np.full((2, 3, 3), 30.0), np.random.default_rng(4), mask=mask).data
    np.testing.assert_array_equal(s, mask)


def test_graph_entropy_examples():
    assert vi.graph_entropy(np.zeros((2, 3, 3))).data == pytest.approx(18 * np.log(2))
    assert vi.graph_entropy(np.array([50.0, -50.0])).data == pytest.approx(0.0, abs=1e-18)
    logit = np.log(0.9 / 0.1)
    assert vi.graph_entropy(np.array([logit])).data == pytest.approx(0.325083, abs=1e-6)


def test_graph_entropy_matches_monte_carlo():
    rng = np.random.default_rng(5)
    p = 0.3
    x = rng.random(N_MC) < p
    nll = -np.where(x, np.log(p), np.log(1 - p))
    _within_3se(nll, vi.graph_entropy(np.array([np.log(p / (1 - p))])).data)


def test_graph_entropy_gradient():
    rng = np.random.default_rng(6)
    assert ad.grad_check(vi.graph_entropy, rng.normal(size=(2, 3, 3))).passed


# -------------------------------------------------------------------- q(F)


@pytest.fixture
def grid():
    return GridSpec.regular(5)


def test_zero_variance_factor_is_deterministic(grid):
    rng = np.random.default_rng(7)
    p = vi.init_factor_params(rng, 3, mu_gamma=-2.0, logvar=-60.0)
    F1, _, _ = vi.sample_factors(p, grid, np.random.default_rng(1))
    F2, _, _ = vi.sample_factors(p, grid, np.random.default_rng(2))
    np.testing.assert_allclose(F1.data, F2.data, atol=1e-12, rtol=0)
    np.testing.assert_allclose(F1.data, vi.mean_factors(p, grid).data, atol=1e-12, rtol=0)


def test_small_variance_draws_stay_within_their_scale(grid):
    # at log-variance -40 the draw spread is exp(-20) ~ 2e-9
    rng = np.random.default_rng(7)
    p = vi.init_factor_params(rng, 3, mu_gamma=-2.0, logvar=-40.0)
    F1, _, _ = vi.sample_factors(p, grid, np.random.default_rng(1))
    F2, _, _ = vi.sample_factors(p, grid, np.random.default_rng(2))
    assert np.max(np.abs(F1.data - F2.data)) < 10 * np.exp(-20.0)


def test_center_samples_have_posterior_mean():
    # one node per draw, all sharing the same posterior
    rng = np.random.default_rng(8)
    p = {
        "factor.mu_rho": np.tile([0.4, -1.1], (N_MC, 1)),
        "factor.logvar_rho": np.full(N_MC, np.log(0.3)),
        "factor.mu_gamma": np.full(N_MC, -2.0),
        "factor.logvar_gamma": np.full(N_MC, -1.0),
    }
    _, rho, gamma = vi.sample_factors(p, GridSpec.regular(2), rng)
    _within_3se(rho.data[:, 0], 0.4)
    _within_3se(rho.data[:, 1], -1.1)
    _within_3se(gamma.data, -2.0)


def test_sample_factors_gradients(grid):
    rng = np.random.default_rng(9)
    p = vi.init_factor_params(rng, 2, mu_gamma=-2.0, logvar=-3.0)
    w = rng.normal(size=(grid.n_points, 2))
    for name in ("factor.mu_rho", "factor.logvar_rho", "factor.mu_gamma", "factor.logvar_gamma"):
        def f(t, name=name):
            q = dict(p)
            q[name] = t
            F, _, _ = vi.sample_factors(q, grid, np.random.default_rng(11))
            return ad.sum(F * w)

        rep = ad.grad_check(f, p[name])
        assert rep.passed, name
        assert np.any(np.abs(rep.analytic) > 1e-8), name


def test_sample_factors_uses_squashed_centers(grid):
    rng = np.random.default_rng(10)
    p = vi.init_factor_params(rng, 2, logvar=-40.0)
    F, rho, gamma = vi.sample_factors(p, grid, rng)
    ref = differentiable_factor(grid, rho.data, gamma.data).data
    np.testing.assert_allclose(F.data, ref, rtol=1e-12)


def test_gamma_kl_examples():
    assert vi.gamma_kl(np.zeros(1), np.zeros(1)).data == 0.0
    assert vi.gamma_kl(np.array([2.0]), np.zeros(1)).data == pytest.approx(2.0)


def test_gamma_kl_matches_monte_carlo():
    rng = np.random.default_rng(12)
    mu, lv = 0.7, np.log(0.5)
    s = np.sqrt(0.5)
    x = mu + s * rng.standard_normal(N_MC)
    log_q = -0.5 * (((x - mu) / s) ** 2 + np.log(2 * np.pi * 0.5))
    log_p = -0.5 * (x**2 + np.log(2 * np.pi))
    _within_3se(log_q - log_p, vi.gamma_kl(np.array([mu]), np.array([lv])).data)


def test_center_entropy_matches_monte_carlo():
    rng = np.random.default_rng(13)
    lv = np.log(0.2)
    x = rng.standard_normal((N_MC, 2)) * np.sqrt(0.2)
    log_q = -0.5 * (np.sum(x**2, axis=1) / 0.2 + 2 * np.log(2 * np.pi * 0.2))
    _within_3se(-log_q, vi.center_entropy(np.array([lv])).data)


def test_factor_kl_combines_gamma_kl_and_center_entropy():
    rng = np.random.default_rng(14)
    p = vi.init_factor_params(rng, 4, mu_gamma=-1.0, logvar=-2.0)
    expected = vi.gamma_kl(p["factor.mu_gamma"], p["factor.logvar_gamma"]).data - vi.center_entropy(p["factor.logvar_rho"]).data
    assert vi.factor_kl(p).data == pytest.approx(expected)


# ---------------------------------------------------------------- q(Z | X)


def test_encoder_output_shapes():
    rng = np.random.default_rng(15)
    npv = [2, 3]
    p = vi.init_encoder_params(rng, 16, npv, hidden=8)
    X = rng.normal(size=(2, 16, 7))
    Z, mu, lv = vi.encode_latents(X, p, rng, npv)
    assert Z.shape == mu.shape == lv.shape == (5, 7)
    Zb, _, _ = vi.encode_latents(rng.normal(size=(4, 2, 16, 7)), p, rng, npv)
    assert Zb.shape == (4, 5, 7)


def test_zero_encoder_gives_standard_normal_sample():
    rng = np.random.default_rng(16)
    p = {k: np.zeros_like(v) for k, v in vi.init_encoder_params(rng, 9, [3], hidden=4).items()}
    X = rng.normal(size=(1, 9, 5))
    Z, mu, lv = vi.encode_latents(X, p, np.random.default_rng(99), [3])
    assert np.all(mu.data == 0) and np.all(lv.data == 0)
    np.testing.assert_array_equal(Z.data, np.random.default_rng(99).standard_normal((3, 5)))


def test_encoder_shape_errors():
    rng = np.random.default_rng(17)
    p = vi.init_encoder_params(rng, 9, [3], hidden=4)
    with pytest.raises(ad.ShapeError):
        vi.encode_latents(rng.normal(size=(1, 8, 5)), p, rng, [3])
    with pytest.raises(ad.ShapeError):
        vi.encode_latents(rng.normal(size=(2, 9, 5)), p, rng, [3])


def test_encoder_is_deterministic_given_seed():
    rng = np.random.default_rng(18)
    p = vi.init_encoder_params(rng, 9, [2], hidden=4)
    X = rng.normal(size=(1, 9, 5))
    a = vi.encode_latents(X, p, np.random.default_rng(5), [2])[0].data
    b = vi.encode_latents(X, p, np.random.default_rng(5), [2])[0].data
    np.testing.assert_array_equal(a, b)


def test_encoder_acts_per_timestep():
    rng = np.random.default_rng(19)
    p = vi.init_encoder_params(rng, 9, [2], hidden=4)
    X = rng.normal(size=(1, 9, 5))
    mu = vi.encoder_stats(X[None], p, [2])[0].data
    X2 = X.copy()
    X2[..., 3] += 1.0
    mu2 = vi.encoder_stats(X2[None], p, [2])[0].data
    np.testing.assert_array_equal(np.delete(mu, 3, axis=-1), np.delete(mu2, 3, axis=-1))


def test_gaussian_entropy_matches_monte_carlo():
    rng = np.random.default_rng(20)
    lv = np.array([-1.0, 0.5, 0.0])
    x = rng.standard_normal((N_MC, 3)) * np.exp(lv / 2)
    log_q = np.sum(-0.5 * (x**2 / np.exp(lv) + lv + np.log(2 * np.pi)), axis=1)
    _within_3se(-log_q, vi.gaussian_entropy(lv).data)
