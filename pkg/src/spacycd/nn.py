"""Small feed-forward networks on the autodiff tape.

Parameters live in flat ``dict[str, ndarray]`` containers so that optimizers,
checkpoints and gradient maps all share one naming scheme.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_mlp(rng: np.random.Generator, prefix: str, sizes, out_scale: float = 1.0, dtype=np.float64) -> dict:
    """Glorot-uniform weights for a ``len(sizes) - 1`` layer MLP.

    ``out_scale`` shrinks the final layer, which lets heads start close to a
    known output (e.g. an identity spline).
    """
    params = {}
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        if i == n - 1:
            bound *= out_scale
        params[f"{prefix}.w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"{prefix}.b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def n_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in params:
        n += 1
    return n


def layer_norm(x, eps: float = 1e-5) -> ad.Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(ad.square(centered), axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps)


def mlp(params: dict, prefix: str, x, norm: bool = False, skip: bool = False, first=None) -> ad.Tensor:
    """Apply the MLP stored under ``prefix`` to the last axis of ``x``.

    Hidden layers use leaky-relu. With ``skip``, hidden layers of equal width
    add their input back. ``first`` optionally replaces the first affine map
    with a precomputed pre-activation (used when part of the input is shared
    across many rows and is cheaper to project once).
    """
    n = n_layers(params, prefix)
    h = x
    for i in range(n):
        w, b = params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"]
        if i == 0 and first is not None:
            pre = first
        else:
            pre = ad.matmul(h, w) + b
        if i == n - 1:
            return pre
        if norm:
            pre = layer_norm(pre)
        act = ad.leaky_relu(pre)
        if skip and i > 0 and act.shape == h.shape:
            act = act + h
        h = act
    return h
