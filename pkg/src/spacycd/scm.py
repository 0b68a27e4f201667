"""Latent structural causal model.

Temporal graphs are arrays of shape ``(lag + 1, D, D)``; entry ``[k, j, d]``
is an edge ``j -> d`` acting with lag ``k``. Slice 0 holds instantaneous
edges and must be acyclic. Latent series are laid out as ``(batch, D, T)``.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import autodiff as ad
from .nn import init_mlp, mlp

LOG_2PI = float(np.log(2.0 * np.pi))
SPLINE_BINS = 8
SPLINE_BOUND = 5.0
MIN_BIN = 1e-3
MIN_DERIV = 1e-3
_SOFTPLUS_ONE = float(np.log(np.e - 1.0))  # softplus(_SOFTPLUS_ONE) == 1


# ------------------------------------------------------------------ graphs


def topological_order(adj) -> list[int] | None:
    """Kahn's algorithm on a binary ``(D, D)`` adjacency; ``None`` if cyclic."""
    adj = np.asarray(adj) != 0
    D = adj.shape[0]
    indeg = adj.sum(0).astype(int)
    queue = deque(i for i in range(D) if indeg[i] == 0)
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    return order if len(order) == D else None


def is_dag(adj) -> bool:
    return topological_order(adj) is not None


def edge_mask(n_nodes: int, lag: int) -> np.ndarray:
    """Admissible edges: everything except instantaneous self-loops."""
    mask = np.ones((lag + 1, n_nodes, n_nodes))
    mask[0][np.diag_indices(n_nodes)] = 0.0
    return mask


def lag_stack(Z, lag: int, lags=None) -> ad.Tensor:
    """History tensor ``(B, T - lag, K, D)`` with ``[:, t, k] = Z[:, :, t + lag - k]``."""
    Z = ad.as_tensor(Z)
    T = Z.shape[-1]
    lags = range(lag + 1) if lags is None else lags
    slices = [ad.transpose(Z[:, :, lag - k : T - k], (0, 2, 1)) for k in lags]
    return ad.stack(slices, axis=2)


# ------------------------------------------------------------- mean models


def linear_mean(z_hist, G, W) -> ad.Tensor:
    """Linear structural mean at one timestep.

    ``z_hist`` is ``(D, lag + 1)`` with column ``k`` holding ``Z^(t-k)``.
    Returns ``f_d = sum_k sum_j (G * W)[k, j, d] * z_hist[j, k]``.
    """
    z_hist = ad.as_tensor(z_hist)
    GW = ad.mul(G, W)
    hist = ad.reshape(ad.transpose(z_hist), z_hist.shape[::-1] + (1,))
    return ad.sum(ad.mul(GW, hist), axis=(0, 1))


def linear_means(Z, G, W, lag: int) -> ad.Tensor:
    """Structural means for every ``t >= lag`` of a ``(B, D, T)`` series -> ``(B, D, T - lag)``."""
    Z = ad.as_tensor(Z)
    GW = ad.mul(G, W)
    T = Z.shape[-1]
    out = None
    for k in range(lag + 1):
        term = ad.matmul(ad.transpose(GW[k]), Z[:, :, lag - k : T - k])
        out = term if out is None else out + term
    return out


def _messages(params: dict, prefix: str, src, tgt, hist, G) -> ad.Tensor:
    """Aggregate ``sum_{k,j} G[k,j,d] * msg([z_j^(t-k), E[k,j]], E[0,d])``.

    ``hist`` is ``(B, T', K, D)``, ``G`` and the source embeddings cover the
    same K lags. Returns ``(B, T', D, M)``.
    """
    w0 = params[f"{prefix}.w0"]
    b0 = params[f"{prefix}.b0"]
    e = src.shape[-1]
    src_proj = ad.matmul(src, w0[1 : 1 + e])  # (K, D, H)
    tgt_proj = ad.matmul(tgt, w0[1 + e :])  # (D, H)
    H = src_proj.shape[-1]
    K, D = src_proj.shape[0], src_proj.shape[1]
    z_part = ad.mul(ad.reshape(hist, hist.shape + (1, 1)), ad.reshape(w0[0], (1, 1, 1, 1, 1, H)))
    pre = z_part + ad.reshape(src_proj, (1, 1, K, D, 1, H)) + ad.reshape(tgt_proj, (1, 1, 1, 1, D, H)) + b0
    msg = mlp(params, prefix, None, norm=True, skip=True, first=pre)  # (B, T', K, Dj, Dd, M)
    weighted = ad.mul(msg, ad.reshape(G, (1, 1, K, D, D, 1)))
    return ad.sum(weighted, axis=(2, 3))


def nonlinear_means(Z, G, params: dict, lag: int, prefix: str = "scm") -> ad.Tensor:
    """Message-passing structural means for ``t >= lag`` -> ``(B, D, T - lag)``.

    The networks are shared by all nodes; nodes differ only through their
    embeddings.
    """
    emb = params[f"{prefix}.emb"]
    hist = lag_stack(Z, lag)
    agg = _messages(params, f"{prefix}.lambda_f", emb, emb[0], hist, G)
    out = mlp(params, f"{prefix}.xi_f", agg, norm=True, skip=True)  # (B, T', D, 1)
    return ad.transpose(out[..., 0], (0, 2, 1))


def nonlinear_mean(z_hist, G, params: dict, lag: int, prefix: str = "scm") -> ad.Tensor:
    """Single-timestep form of :func:`nonlinear_means` (``z_hist`` is ``(D, lag+1)``)."""
    z_hist = ad.as_tensor(z_hist)
    series = ad.reshape(z_hist[:, ::-1], (1,) + z_hist.shape)
    return nonlinear_means(series, G, params, lag, prefix)[0, :, 0]


def spline_hyperparams(Z, G, params: dict, lag: int, prefix: str = "scm") -> ad.Tensor:
    """Spline parameters ``(B, T', D, 3*bins - 1)`` conditioned on lagged parents."""
    emb = params[f"{prefix}.noise_emb"]
    B, D, T = Z.shape
    if lag == 0:
        agg = ad.Tensor(np.zeros((B, T, D, params[f"{prefix}.lambda_eta.b2"].shape[0]), dtype=Z.dtype))
    else:
        hist = lag_stack(Z, lag, lags=range(1, lag + 1))
        agg = _messages(params, f"{prefix}.lambda_eta", emb[1:], emb[0], hist, G[1:])
    return mlp(params, f"{prefix}.xi_eta", agg, norm=True, skip=True)


def init_nonlinear_params(rng, n_nodes: int, lag: int, embed_dim: int = 64, hidden: int = 64, bins: int = SPLINE_BINS, prefix="scm", dtype=np.float64) -> dict:
    e = embed_dim
    p = {
        f"{prefix}.emb": (rng.standard_normal((lag + 1, n_nodes, e)) * 0.1).astype(dtype),
        f"{prefix}.noise_emb": (rng.standard_normal((lag + 1, n_nodes, e)) * 0.1).astype(dtype),
    }
    p.update(init_mlp(rng, f"{prefix}.lambda_f", [1 + 2 * e, hidden, hidden, e], dtype=dtype))
    p.update(init_mlp(rng, f"{prefix}.xi_f", [e, hidden, hidden, 1], dtype=dtype))
    p.update(init_mlp(rng, f"{prefix}.lambda_eta", [1 + 2 * e, hidden, hidden, e], dtype=dtype))
    p.update(init_mlp(rng, f"{prefix}.xi_eta", [e, hidden, hidden, 3 * bins - 1], out_scale=1e-2, dtype=dtype))
    return p


def init_linear_params(rng, n_nodes: int, lag: int, prefix="scm", dtype=np.float64) -> dict:
    return {
        f"{prefix}.W": (rng.standard_normal((lag + 1, n_nodes, n_nodes)) * 0.01).astype(dtype),
        f"{prefix}.logvar": np.zeros(n_nodes, dtype=dtype),
    }


# ------------------------------------------------------------------ spline


def spline_param_count(bins: int = SPLINE_BINS) -> int:
    return 3 * bins - 1


def identity_spline_params(shape=(), bins: int = SPLINE_BINS) -> np.ndarray:
    """Raw parameters for which the spline is the identity map."""
    return np.zeros(tuple(shape) + (spline_param_count(bins),))


def _knots(raw, bound: float, bins: int):
    uw, uh, ud = raw[..., :bins], raw[..., bins : 2 * bins], raw[..., 2 * bins :]
    lead = raw.shape[:-1]
    lo = np.full(lead + (1,), -bound, dtype=raw.dtype)
    hi = np.full(lead + (1,), bound, dtype=raw.dtype)

    def grid(u):
        frac = MIN_BIN + (1.0 - MIN_BIN * bins) * ad.softmax(u, axis=-1)
        inner = ad.cumsum(frac, axis=-1)[..., :-1] * (2.0 * bound) - bound
        return ad.concat([lo, inner, hi], axis=-1)

    ones = np.ones(lead + (1,), dtype=raw.dtype)
    derivs = ad.concat([ones, ad.softplus(ud + _SOFTPLUS_ONE) * (1.0 - MIN_DERIV) + MIN_DERIV, ones], axis=-1)
    return grid(uw), grid(uh), derivs


def _gather(a, idx):
    return ad.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def _bin_quantities(knots_in, knots_out, derivs, v, bins):
    idx = np.sum(knots_in.data[..., 1:-1] <= v.data[..., None], axis=-1)
    x_k = _gather(knots_in, idx)
    w_k = _gather(knots_in, idx + 1) - x_k
    y_k = _gather(knots_out, idx)
    h_k = _gather(knots_out, idx + 1) - y_k
    d_k = _gather(derivs, idx)
    d_k1 = _gather(derivs, idx + 1)
    return x_k, w_k, y_k, h_k, d_k, d_k1


def spline_forward(x, raw, bound: float = SPLINE_BOUND, bins: int = SPLINE_BINS):
    """Monotone rational-quadratic spline; returns ``(y, log|dy/dx|)``.

    ``raw`` has shape ``x.shape + (3*bins - 1,)``: unnormalised widths,
    heights and interior derivatives. Outside ``[-bound, bound]`` the map is
    the identity.
    """
    x, raw = ad.as_tensor(x), ad.as_tensor(raw)
    if not np.all(np.isfinite(raw.data)):
        raise ValueError("non-finite spline parameters")
    inside = np.abs(x.data) < bound
    xc = ad.where(inside, x, 0.0)
    kx, ky, dv = _knots(raw, bound, bins)
    x_k, w_k, y_k, h_k, d_k, d_k1 = _bin_quantities(kx, ky, dv, xc, bins)
    s = h_k / w_k
    xi = (xc - x_k) / w_k
    xi1 = xi * (1.0 - xi)
    denom = s + (d_k1 + d_k - s * 2.0) * xi1
    y = y_k + h_k * (s * ad.square(xi) + d_k * xi1) / denom
    num = ad.square(s) * (d_k1 * ad.square(xi) + s * xi1 * 2.0 + d_k * ad.square(1.0 - xi))
    logdet = ad.log(num) - ad.log(denom) * 2.0
    return ad.where(inside, y, x), ad.where(inside, logdet, 0.0)


def spline_inverse(y, raw, bound: float = SPLINE_BOUND, bins: int = SPLINE_BINS):
    """Inverse of :func:`spline_forward`; returns ``(x, log|dx/dy|)``."""
    y, raw = ad.as_tensor(y), ad.as_tensor(raw)
    if not np.all(np.isfinite(raw.data)):
        raise ValueError("non-finite spline parameters")
    inside = np.abs(y.data) < bound
    yc = ad.where(inside, y, 0.0)
    kx, ky, dv = _knots(raw, bound, bins)
    y_k, h_k, x_k, w_k, d_k, d_k1 = _bin_quantities(ky, kx, dv, yc, bins)
    s = h_k / w_k
    dy = yc - y_k
    slope_sum = d_k1 + d_k - s * 2.0
    a = h_k * (s - d_k) + dy * slope_sum
    b = h_k * d_k - dy * slope_sum
    c = -s * dy
    disc = ad.maximum(ad.square(b) - a * c * 4.0, 0.0)
    xi = (c * 2.0) / (-b - ad.sqrt(disc))
    x = x_k + xi * w_k
    xi1 = xi * (1.0 - xi)
    denom = s + slope_sum * xi1
    num = ad.square(s) * (d_k1 * ad.square(xi) + s * xi1 * 2.0 + d_k * ad.square(1.0 - xi))
    logdet = ad.log(denom) * 2.0 - ad.log(num)
    return ad.where(inside, x, y), ad.where(inside, logdet, 0.0)


# -------------------------------------------------------------- likelihood


def gaussian_logpdf(x, mean, logvar) -> ad.Tensor:
    """Elementwise ``log N(x; mean, exp(logvar))``."""
    r = ad.sub(x, mean)
    return (ad.as_tensor(logvar) + LOG_2PI + ad.square(r) / ad.exp(logvar)) * -0.5


def gaussian_logpdf_sum(x, mean, logvar) -> ad.Tensor:
    """``sum log N(x; mean, exp(logvar))`` as one fused primitive.

    Same value as ``ad.sum(gaussian_logpdf(...))`` with far fewer temporaries
    on large reconstructions.
    """
    x, mean, logvar = ad.as_tensor(x), ad.as_tensor(mean), ad.as_tensor(logvar)
    dt = np.result_type(x.dtype, mean.dtype, logvar.dtype)
    r = x.data - mean.data
    prec = np.exp(-logvar.data)
    sq = r * r
    shape = np.broadcast_shapes(x.shape, mean.shape, logvar.shape)
    n = int(np.prod(shape)) // max(logvar.data.size, 1)
    per = np.broadcast_to(sq, shape)
    sq_sum = ad.unbroadcast(per, logvar.shape) if logvar.shape != shape else per
    val = -0.5 * (np.sum(sq_sum * prec) + n * np.sum(logvar.data) + np.prod(shape) * LOG_2PI)
    out = np.asarray(val, dtype=dt)

    def g_mean(g):
        return ad.unbroadcast(g * r * prec, mean.shape)

    def g_x(g):
        return ad.unbroadcast(-g * r * prec, x.shape)

    def g_logvar(g):
        return (0.5 * g * (sq_sum * prec - n)).astype(logvar.dtype)

    return ad.primitive(out, (x, mean, logvar), (g_x, g_mean, g_logvar))


def latent_loglik(Z, G, params: dict, variant: str, lag: int, residual_scale=None, prefix: str = "scm") -> ad.Tensor:
    """``sum log p(Z^(t) | parents)`` over batch, nodes and ``t >= lag``.

    ``variant='linear'``: Gaussian residuals with per-node log-variance.
    ``variant='nonlinear'``: residuals, rescaled by ``residual_scale``, are
    pulled back through a history-conditioned spline to a standard normal.
    """
    Z = ad.as_tensor(Z)
    target = Z[:, :, lag:]
    if variant == "linear":
        mean = linear_means(Z, G, params[f"{prefix}.W"], lag)
        logvar = ad.reshape(params[f"{prefix}.logvar"], (1, -1, 1))
        return ad.sum(gaussian_logpdf(target, mean, logvar))
    if variant != "nonlinear":
        raise ValueError(f"unknown SCM variant {variant!r}")
    D = Z.shape[1]
    scale = np.ones(D) if residual_scale is None else np.asarray(residual_scale, dtype=np.float64)
    u = ad.transpose(target - nonlinear_means(Z, G, params, lag, prefix), (0, 2, 1))  # (B, T', D)
    u = u / scale.astype(Z.dtype)
    raw = spline_hyperparams(Z, G, params, lag, prefix)
    eta, logdet = spline_inverse(u, raw)
    base = (ad.square(eta) + LOG_2PI) * -0.5
    n_terms = u.shape[0] * u.shape[1]
    return ad.sum(base + logdet) - float(np.log(scale).sum()) * n_terms


# ------------------------------------------------------------- graph prior


def acyclicity(M) -> ad.Tensor:
    """``h(M) = trace(exp(M * M)) - D``; zero exactly for DAG supports."""
    M = ad.as_tensor(M)
    return ad.trace_expm(ad.square(M)) - float(M.shape[0])


def graph_prior_logp(G, alpha: float, sigma_pen: float = 0.0) -> ad.Tensor:
    """Unnormalised ``log p(G) = -alpha * ||G||^2 - sigma_pen * h(G[0])``."""
    if alpha < 0 or sigma_pen < 0:
        raise ValueError("alpha and sigma_pen must be non-negative")
    G = ad.as_tensor(G)
    out = ad.sum(ad.square(G)) * -alpha
    if sigma_pen:
        out = out - acyclicity(G[0]) * sigma_pen
    return out
