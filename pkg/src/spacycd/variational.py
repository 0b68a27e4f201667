"""Variational posteriors over the graph, the spatial factors and the latents.

* ``q(G)``: independent Bernoulli edges with logits ``(lag + 1, D, D)``,
  sampled with a straight-through Gumbel-softmax relaxation.
* ``q(F)``: Gaussian centers and log-scales per node, reparameterised.
* ``q(Z | X)``: per-timestep Gaussian from one MLP encoder per variate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import init_mlp, mlp
from .spatial import GridSpec, differentiable_factor

LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))
TEMPERATURE = 0.5


# -------------------------------------------------------------------- q(G)


def edge_probs(logits) -> ad.Tensor:
    return ad.sigmoid(logits)


def sample_graph(logits, rng, hard: bool = True, temperature: float = TEMPERATURE, mask=None) -> ad.Tensor:
    """One relaxed Bernoulli draw per edge.

    With ``hard`` the forward value is exactly 0/1 while gradients follow the
    relaxed sample (straight-through).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = ad.as_tensor(logits)
    u = rng.uniform(size=logits.shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    noise = (np.log(u) - np.log1p(-u)).astype(logits.dtype)
    soft = ad.sigmoid((logits + noise) * (1.0 / temperature))
    out = ad.straight_through((soft.data > 0.5).astype(soft.dtype), soft) if hard else soft
    if mask is not None:
        out = out * np.asarray(mask, dtype=out.dtype)
    return out


def graph_entropy(logits, mask=None) -> ad.Tensor:
    """Sum of Bernoulli entropies ``-p log p - (1 - p) log(1 - p)``."""
    logits = ad.as_tensor(logits)
    p = ad.sigmoid(logits)
    h = p * ad.softplus(-logits) + (1.0 - p) * ad.softplus(logits)
    if mask is not None:
        h = h * np.asarray(mask, dtype=h.dtype)
    return ad.sum(h)


# -------------------------------------------------------------------- q(F)


def init_factor_params(rng, n_nodes: int, mu_gamma: float = -4.0, logvar: float = -8.0, family: str = "rbf", dtype=np.float64, prefix="factor") -> dict:
    p = {
        f"{prefix}.mu_rho": rng.normal(0.0, 1.0, (n_nodes, 2)).astype(dtype),
        f"{prefix}.logvar_rho": np.full(n_nodes, logvar, dtype=dtype),
        f"{prefix}.mu_gamma": np.full(n_nodes, mu_gamma, dtype=dtype),
        f"{prefix}.logvar_gamma": np.full(n_nodes, logvar, dtype=dtype),
    }
    if family == "rbf-anisotropic":
        p[f"{prefix}.A"] = np.zeros((n_nodes, 2, 2), dtype=dtype)
        p[f"{prefix}.B"] = np.full((n_nodes, 2), mu_gamma - np.log(2.0), dtype=dtype)
    return p


def sample_factors(params: dict, grid: GridSpec, rng, family: str = "rbf", prefix: str = "factor"):
    """Reparameterised draw of ``(F, rho, gamma)``; ``F`` is ``(L, D)``."""
    mu_rho, v_rho = params[f"{prefix}.mu_rho"], params[f"{prefix}.logvar_rho"]
    mu_g, v_g = params[f"{prefix}.mu_gamma"], params[f"{prefix}.logvar_gamma"]
    eps_rho = rng.standard_normal(mu_rho.shape).astype(mu_rho.dtype)
    eps_g = rng.standard_normal(mu_g.shape).astype(mu_g.dtype)
    rho = mu_rho + ad.reshape(ad.exp(v_rho * 0.5), (-1, 1)) * eps_rho
    gamma = mu_g + ad.exp(v_g * 0.5) * eps_g
    F = differentiable_factor(grid, rho, gamma, family, params.get(f"{prefix}.A"), params.get(f"{prefix}.B"))
    return F, rho, gamma


def mean_factors(params: dict, grid: GridSpec, family: str = "rbf", prefix: str = "factor") -> ad.Tensor:
    """Factor matrix at the posterior means."""
    return differentiable_factor(
        grid, params[f"{prefix}.mu_rho"], params[f"{prefix}.mu_gamma"], family,
        params.get(f"{prefix}.A"), params.get(f"{prefix}.B"),
    )


def gamma_kl(mu_gamma, logvar_gamma) -> ad.Tensor:
    """``KL(N(mu, exp(v)) || N(0, 1))`` summed over nodes."""
    mu_gamma, logvar_gamma = ad.as_tensor(mu_gamma), ad.as_tensor(logvar_gamma)
    return ad.sum(ad.exp(logvar_gamma) + ad.square(mu_gamma) - 1.0 - logvar_gamma) * 0.5


def center_entropy(logvar_rho, dim: int = 2) -> ad.Tensor:
    """Entropy of the isotropic Gaussian center posteriors."""
    logvar_rho = ad.as_tensor(logvar_rho)
    return ad.sum(logvar_rho + LOG_2PI_E) * (0.5 * dim)


def factor_kl(params: dict, prefix: str = "factor") -> ad.Tensor:
    """``KL(q(F) || p(F))`` up to the constant uniform-prior density of the centers."""
    return gamma_kl(params[f"{prefix}.mu_gamma"], params[f"{prefix}.logvar_gamma"]) - center_entropy(params[f"{prefix}.logvar_rho"])


# ---------------------------------------------------------------- q(Z | X)


def init_encoder_params(rng, n_points: int, nodes_per_variate, hidden: int = 64, dtype=np.float64, logvar_bias: float = -2.0) -> dict:
    p = {}
    for v, dv in enumerate(nodes_per_variate):
        p.update(init_mlp(rng, f"enc{v}", [n_points, hidden, hidden, 2 * dv], dtype=dtype))
        p[f"enc{v}.b2"][dv:] = logvar_bias
    return p


def encoder_stats(X, params: dict, nodes_per_variate):
    """Posterior mean and log-variance, each ``(B, D, T)``, for ``X`` of shape ``(B, V, L, T)``."""
    X = ad.as_tensor(X)
    if X.ndim != 4 or X.shape[1] != len(nodes_per_variate):
        raise ad.ShapeError(f"expected (B, {len(nodes_per_variate)}, L, T) observations, got {X.shape}")
    mus, logvars = [], []
    for v, dv in enumerate(nodes_per_variate):
        if params[f"enc{v}.w0"].shape[0] != X.shape[2]:
            raise ad.ShapeError("encoder input width does not match the grid size")
        snap = ad.transpose(X[:, v], (0, 2, 1))  # (B, T, L)
        out = mlp(params, f"enc{v}", snap)  # (B, T, 2 dv)
        mus.append(out[..., :dv])
        logvars.append(out[..., dv:])
    mu = ad.transpose(ad.concat(mus, axis=-1), (0, 2, 1))
    logvar = ad.transpose(ad.concat(logvars, axis=-1), (0, 2, 1))
    return mu, logvar


def encode_latents(X, params: dict, rng, nodes_per_variate):
    """Reparameterised latent draw ``Z = mu + exp(logvar / 2) * eps``.

    ``X`` is one sample ``(V, L, T)`` or a batch ``(B, V, L, T)``; outputs
    follow with ``D x T`` per sample.
    """
    X = ad.as_tensor(X)
    single = X.ndim == 3
    if single:
        X = ad.reshape(X, (1,) + X.shape)
    mu, logvar = encoder_stats(X, params, nodes_per_variate)
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    Z = mu + ad.exp(logvar * 0.5) * eps
    if single:
        return Z[0], mu[0], logvar[0]
    return Z, mu, logvar


def gaussian_entropy(logvar) -> ad.Tensor:
    """Entropy of a diagonal Gaussian, ``0.5 * sum(logvar + log(2 pi e))``."""
    return ad.sum(ad.as_tensor(logvar) + LOG_2PI_E) * 0.5
