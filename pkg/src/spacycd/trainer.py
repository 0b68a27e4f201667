"""ELBO assembly, decoder, optimisation loop and augmented-Lagrangian schedule."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad
from . import scm as scm_mod
from . import variational as vi
from .nn import init_mlp, mlp
from .spatial import GridSpec

logger = logging.getLogger(__name__)

GROUPS = {"graph": "lr_matrix", "scm": "lr_scm", "enc": "lr_encoder", "factor": "lr_factor", "dec": "lr_decoder"}
FROZEN_GROUPS = ("graph", "scm")
LOG_FIELDS = (
    "step", "outer", "epoch", "elbo", "recon", "latent", "entropy_z", "entropy_g",
    "graph_prior", "factor_kl", "h", "c", "lambda_al", "val_elbo",
)


class TrainingDivergence(RuntimeError):
    """The objective became non-finite."""


@dataclass
class TrainConfig:
    """Training and model settings; learning rates and schedule sizes default to Table-5 values."""

    lr_matrix: float = 1e-3
    lr_scm: float = 1e-3
    lr_encoder: float = 1e-3
    lr_factor: float = 1e-2
    lr_decoder: float = 1e-3
    batch_size: int = 100
    outer_auglag: int = 60
    inner_auglag: int = 6000
    scm_embed: int = 64
    sparsity_alpha: float = 10.0
    spline: str = "quadratic"
    decoder_embed: int = 32
    n_nodes: int | tuple = 10
    lag: int = 1
    scm: str = "linear"
    mapping: str = "linear"
    kernel: str = "rbf"
    hidden: int = 64
    freeze_epochs: int = 200
    seed: int = 0
    precision: str = "float64"
    temperature: float = 0.5
    straight_through: bool = True
    val_fraction: float = 0.2
    patience: int = 500
    plateau_tol: float = 1e-3
    eval_every: int = 50
    threshold: float = 0.5
    per_point_noise: bool = False
    recon_points: int | None = None
    init_gamma: float = -4.0
    init_enc_logvar: float = -2.0
    center_init: str = "variance"
    center_init_radius: float = 0.1
    auglag_c0: float = 1.0
    auglag_growth: float = 10.0
    auglag_ratio: float = 0.9
    max_penalty: float = 1e12
    max_steps: int | None = None
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.n_nodes, list):
            self.n_nodes = tuple(self.n_nodes)
        self.validate()

    @property
    def nodes_per_variate(self) -> tuple[int, ...]:
        return tuple(self.n_nodes) if isinstance(self.n_nodes, tuple) else (int(self.n_nodes),)

    @property
    def total_nodes(self) -> int:
        return sum(self.nodes_per_variate)

    def validate(self) -> None:
        for name in GROUPS.values():
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sparsity_alpha < 0:
            raise ValueError("sparsity_alpha must be non-negative")
        if self.batch_size < 1 or self.outer_auglag < 1 or self.inner_auglag < 1:
            raise ValueError("batch_size, outer_auglag and inner_auglag must be positive")
        if self.freeze_epochs < 0:
            raise ValueError("freeze_epochs must be non-negative")
        if any(d < 1 for d in self.nodes_per_variate) or self.lag < 0:
            raise ValueError("n_nodes must be positive and lag non-negative")
        if self.scm not in ("linear", "nonlinear"):
            raise ValueError(f"unknown scm {self.scm!r}")
        if self.mapping not in ("linear", "nonlinear"):
            raise ValueError(f"unknown mapping {self.mapping!r}")
        if self.kernel not in ("rbf", "rbf-anisotropic", "matern15", "matern25"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.spline != "quadratic":
            raise ValueError("only the quadratic spline is supported")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.center_init not in ("variance", "random"):
            raise ValueError("center_init must be 'variance' or 'random'")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.n_nodes, tuple):
            d["n_nodes"] = list(self.n_nodes)
        return d


# ------------------------------------------------------------------ model


def variance_peaks(Xv, grid: GridSpec, k: int, radius: float = 0.1) -> np.ndarray:
    """Raw (pre-sigmoid) centers at ``k`` points that explain most of the variance.

    ``Xv`` is one variate's ``(N, L, T)`` block. Points are picked greedily by
    residual variance; after each pick its series is regressed out of every
    point (a pivoted Cholesky of the point covariance), so overlapping
    factors do not attract more than one center. Points within ``radius``
    (in bounding-box units) of a chosen one are also skipped. When the grid
    runs out of candidates the remaining centers go to the next-highest
    points regardless of spacing.
    """
    R = np.moveaxis(np.asarray(Xv, np.float64), 1, 0).reshape(Xv.shape[1], -1)
    R = R - R.mean(axis=1, keepdims=True)
    lo, hi = grid.coords.min(0), grid.coords.max(0)
    unit = (grid.coords - lo) / np.where(hi > lo, hi - lo, 1.0)
    free = np.ones(len(R), bool)
    picked = []
    for _ in range(k):
        score = np.einsum("lm,lm->l", R, R)
        cand = np.flatnonzero(free)
        if cand.size == 0:
            cand = np.setdiff1d(np.arange(len(R)), picked)
        i = int(cand[np.argmax(score[cand])])
        picked.append(i)
        free &= np.linalg.norm(unit - unit[i], axis=1) >= radius
        if score[i] > 0:
            R = R - np.outer(R @ R[i] / score[i], R[i])
    u = np.clip(unit[picked], 0.02, 0.98)
    return np.log(u) - np.log1p(-u)


class SpacyModel:
    """Forward model plus variational families for one grid and node layout."""

    def __init__(self, config: TrainConfig, grid: GridSpec, n_variates: int | None = None):
        self.config = config
        self.grid = grid
        self.dv = config.nodes_per_variate
        if n_variates is not None and n_variates != len(self.dv):
            raise ValueError(f"data has {n_variates} variates but n_nodes lists {len(self.dv)}")
        self.D = sum(self.dv)
        self.lag = config.lag
        self.dtype = np.dtype(config.precision)
        self.mask = scm_mod.edge_mask(self.D, self.lag).astype(self.dtype)
        self.node_variate = np.repeat(np.arange(len(self.dv)), self.dv)
        self.residual_scale = np.ones(self.D)

    @property
    def n_variates(self) -> int:
        return len(self.dv)

    def init_params(self, rng, X=None) -> dict:
        cfg, dt, L, V = self.config, self.dtype, self.grid.n_points, self.n_variates
        p = {"graph.logits": np.zeros((self.lag + 1, self.D, self.D), dtype=dt)}
        if cfg.scm == "linear":
            p.update(scm_mod.init_linear_params(rng, self.D, self.lag, dtype=dt))
        else:
            p.update(scm_mod.init_nonlinear_params(rng, self.D, self.lag, cfg.scm_embed, cfg.hidden, dtype=dt))
        p.update(vi.init_factor_params(rng, self.D, cfg.init_gamma, family=cfg.kernel, dtype=dt))
        p.update(vi.init_encoder_params(rng, L, self.dv, cfg.hidden, dtype=dt, logvar_bias=cfg.init_enc_logvar))
        if X is not None and cfg.center_init == "variance":
            rows = [variance_peaks(X[:, v], self.grid, dv, cfg.center_init_radius) for v, dv in enumerate(self.dv)]
            p["factor.mu_rho"] = np.vstack(rows).astype(dt)
        if X is not None:
            var = np.var(X, axis=(0, 2, 3)) + 1e-6
        else:
            var = np.ones(V)
        if cfg.per_point_noise:
            p["dec.logvar"] = np.repeat(np.log(var)[:, None], L, axis=1).astype(dt)
        else:
            p["dec.logvar"] = np.log(var).astype(dt)
        if cfg.mapping == "nonlinear":
            p["dec.emb"] = (rng.standard_normal((V, L, cfg.decoder_embed)) * 0.1).astype(dt)
            p.update(init_mlp(rng, "dec.xi", [1 + cfg.decoder_embed, cfg.hidden, cfg.hidden, 1], dtype=dt))
        return p

    # -- pieces of the bound

    def factor_blocks(self, F) -> list:
        bounds = np.cumsum((0,) + self.dv)
        return [F[:, bounds[v] : bounds[v + 1]] for v in range(self.n_variates)]

    def decode(self, Z, F, params, points=None) -> ad.Tensor:
        return decode(Z, F, params, self.dv, self.config.mapping == "linear", points)

    def elbo(self, params: dict, X, rng, n_total: int | None = None):
        """Single-sample ELBO estimate for a batch ``X`` of shape ``(B, V, L, T)``.

        Per-sample terms are scaled by ``n_total / B`` so the estimate targets
        the bound of a dataset with ``n_total`` samples.
        """
        cfg = self.config
        X = np.asarray(X, dtype=self.dtype)
        B, V, L, T = X.shape
        scale = (n_total or B) / B
        Z, mu_z, logvar_z = vi.encode_latents(X, params, rng, self.dv)
        F, _, _ = vi.sample_factors(params, self.grid, rng, cfg.kernel)
        logits = params["graph.logits"]
        G = vi.sample_graph(logits, rng, hard=cfg.straight_through, temperature=cfg.temperature, mask=self.mask)

        points = None
        if cfg.recon_points is not None and cfg.recon_points < L:
            points = np.sort(rng.choice(L, size=cfg.recon_points, replace=False))
        X_hat = self.decode(Z, F, params, points)
        X_obs = X if points is None else X[:, :, points]
        logvar = params["dec.logvar"]
        if cfg.per_point_noise:
            lv = logvar if points is None else logvar[:, points]
            lv = ad.reshape(lv, (1, V, -1, 1))
        else:
            lv = ad.reshape(logvar, (1, V, 1, 1))
        recon = scm_mod.gaussian_logpdf_sum(X_obs, X_hat, lv)
        if points is not None:
            recon = recon * (L / len(points))
        latent = scm_mod.latent_loglik(Z, G, params, cfg.scm, self.lag, self.residual_scale)
        ent_z = vi.gaussian_entropy(logvar_z)
        ent_g = vi.graph_entropy(logits, self.mask)
        probs = vi.edge_probs(logits) * self.mask
        # E_q[-alpha ||G||^2] for binary G is -alpha * sum(p)
        prior = ad.sum(probs) * -cfg.sparsity_alpha
        fkl = vi.factor_kl(params)
        elbo = (recon + latent + ent_z) * scale + ent_g + prior - fkl
        terms = {
            "recon": float(recon.data) * scale,
            "latent": float(latent.data) * scale,
            "entropy_z": float(ent_z.data) * scale,
            "entropy_g": float(ent_g.data),
            "graph_prior": float(prior.data),
            "factor_kl": float(fkl.data),
        }
        if cfg.scm == "nonlinear":
            terms["_Z"] = Z
            terms["_G"] = G
        return elbo, terms

    def acyclicity(self, params) -> ad.Tensor:
        probs = vi.edge_probs(params["graph.logits"][0]) * self.mask[0]
        return scm_mod.acyclicity(probs)

    def update_residual_scale(self, params, Z, G, momentum: float = 0.9) -> None:
        """Running per-node residual scale used to standardise spline inputs."""
        Zc, Gc = ad.const(Z), ad.const(G)
        p = {k: ad.const(v) for k, v in params.items()}
        resid = Zc.data[:, :, self.lag :] - scm_mod.nonlinear_means(Zc, Gc, p, self.lag).data
        sd = np.sqrt(np.mean(resid.astype(np.float64) ** 2, axis=(0, 2))) + 1e-3
        self.residual_scale = momentum * self.residual_scale + (1 - momentum) * sd


def decode(Z, F, params: dict, nodes_per_variate, linear: bool, points=None) -> ad.Tensor:
    """Reconstruction ``(B, V, L, T)`` from latents ``(B, D, T)`` and factors ``(L, D)``.

    Variate ``v`` uses its own factor block and latent block; in nonlinear
    mode every grid point applies a shared network to ``[F Z, embedding]``.
    ``points`` restricts the output to a subset of grid points.
    """
    Z, F = ad.as_tensor(Z), ad.as_tensor(F)
    dv = tuple(nodes_per_variate)
    if Z.shape[-2] != sum(dv) or F.shape[-1] != sum(dv):
        raise ad.ShapeError(f"latent/factor widths {Z.shape[-2]}/{F.shape[-1]} do not match nodes {dv}")
    if points is not None:
        F = F[points]
    bounds = np.cumsum((0,) + dv)
    outs = []
    for v in range(len(dv)):
        lo, hi = bounds[v], bounds[v + 1]
        lin = ad.matmul(F[:, lo:hi], Z[:, lo:hi])  # (B, L, T)
        if linear:
            outs.append(lin)
            continue
        emb = params["dec.emb"][v]
        if points is not None:
            emb = emb[points]
        w0 = params["dec.xi.w0"]
        H = w0.shape[1]
        emb_proj = ad.matmul(emb, w0[1:])  # (L, H)
        pre = ad.mul(ad.reshape(lin, lin.shape + (1,)), ad.reshape(w0[0], (1, 1, 1, H)))
        pre = pre + ad.reshape(emb_proj, (1, emb_proj.shape[0], 1, H)) + params["dec.xi.b0"]
        out = mlp(params, "dec.xi", None, first=pre)
        outs.append(out[..., 0])
    return ad.stack(outs, axis=1)


# -------------------------------------------------------------- optimiser


class Adam:
    """Adam with one learning rate per parameter group."""

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads: dict, skip=()) -> None:
        for name, g in grads.items():
            group = param_group(name)
            if group in skip:
                continue
            lr = self.lrs[group]
            if lr == 0:
                continue
            g = np.asarray(g, dtype=params[name].dtype)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            else:
                v = self.v[name]
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            params[name] = params[name] - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[name].dtype)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    if head.startswith("enc"):
        return "enc"
    if head not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no group")
    return head


# ---------------------------------------------------------------- training


@dataclass
class RunState:
    params: dict
    lambda_al: float = 0.0
    c: float = 1.0
    step: int = 0
    epoch: int = 0
    outer: int = 0
    h_prev: float = math.inf
    best_val: float = -math.inf
    best_params: dict | None = None
    log: list = field(default_factory=list)
    penalty_history: list = field(default_factory=list)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    residual_scale: np.ndarray | None = None
    rng_state: dict | None = None


def split_indices(n: int, val_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _threads(n):
    if n is None:
        from contextlib import nullcontext

        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def train(X, config: TrainConfig, grid: GridSpec | None = None, callback=None) -> tuple[SpacyModel, RunState]:
    """Fit the model to observations ``X`` of shape ``(N, V, L, T)``.

    SCM and graph parameters stay frozen for the first ``freeze_epochs``
    epochs or the first two outer steps, whichever ends later. Each outer
    step runs up to ``inner_auglag`` optimiser steps (stopping early on a
    validation plateau) and then updates the augmented-Lagrangian multiplier
    or penalty.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected (N, V, L, T) observations, got shape {X.shape}")
    N, V, L, T = X.shape
    if grid is None:
        side = int(round(math.sqrt(L)))
        if side * side != L:
            raise ValueError("pass a GridSpec for non-square grids")
        grid = GridSpec.regular(side)
    if grid.n_points != L:
        raise ValueError(f"grid has {grid.n_points} points but the data has {L}")
    if T <= config.lag:
        raise ValueError("series must be longer than the lag")
    with _threads(config.threads):
        return _train(X, config, grid, callback)


def _train(X, cfg: TrainConfig, grid: GridSpec, callback):
    N, V, L, T = X.shape
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, split_rng, step_rng, val_rng = (np.random.default_rng(s) for s in seeds)
    model = SpacyModel(cfg, grid, V)
    dt = model.dtype
    X = X.astype(dt)
    train_idx, val_idx = split_indices(N, cfg.val_fraction, split_rng)
    params = model.init_params(init_rng, X[train_idx])
    state = RunState(params=params, c=cfg.auglag_c0, train_idx=train_idx, val_idx=val_idx)
    opt = Adam({g: getattr(cfg, attr) for g, attr in GROUPS.items()})
    n_train = len(train_idx)
    batch = min(cfg.batch_size, n_train)
    steps_per_epoch = math.ceil(n_train / batch)
    order = step_rng.permutation(train_idx)
    cursor = 0
    stop = False

    for outer in range(cfg.outer_auglag):
        state.outer = outer
        best_inner, since = -math.inf, 0
        for _ in range(cfg.inner_auglag):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                stop = True
                break
            if cursor >= n_train:
                order = step_rng.permutation(train_idx)
                cursor = 0
            idx = np.sort(order[cursor : cursor + batch])
            cursor += batch
            row = _step(model, state, opt, X[idx], step_rng, n_train, outer)
            state.step += 1
            state.epoch = state.step // steps_per_epoch
            if len(val_idx) and (state.step % cfg.eval_every == 0):
                val = validation_elbo(model, state.params, X[val_idx], val_rng)
                row["val_elbo"] = val
                if val > state.best_val:
                    state.best_val = val
                    state.best_params = {k: v.copy() for k, v in state.params.items()}
                if not math.isfinite(best_inner) or val > best_inner + cfg.plateau_tol * abs(best_inner):
                    best_inner, since = val, 0
                else:
                    since += cfg.eval_every
            state.log.append(row)
            if callback is not None:
                callback(state, row)
            if since >= cfg.patience:
                logger.info("outer %d: validation plateau after %d steps", outer, state.step)
                break
        h = float(model.acyclicity(_consts(state.params)).data)
        # while frozen the graph cannot move, so the schedule waits
        if not is_frozen(cfg, state.epoch, outer):
            if h > cfg.auglag_ratio * state.h_prev:
                state.c = min(state.c * cfg.auglag_growth, cfg.max_penalty)
            else:
                state.lambda_al += state.c * h
            state.h_prev = h
        state.penalty_history.append((outer, h, state.c, state.lambda_al))
        logger.info("outer %d done: step=%d h=%.3g c=%.3g lambda=%.3g", outer, state.step, h, state.c, state.lambda_al)
        if stop:
            break
    state.residual_scale = model.residual_scale.copy()
    state.rng_state = step_rng.bit_generator.state
    return model, state


def is_frozen(cfg: TrainConfig, epoch: int, outer: int) -> bool:
    """SCM and graph stay fixed for ``freeze_epochs`` epochs or two outer steps, whichever is longer."""
    return epoch < cfg.freeze_epochs or outer < 2


def _consts(params: dict) -> dict:
    return {k: ad.const(v) for k, v in params.items()}


def _step(model: SpacyModel, state: RunState, opt: Adam, Xb, rng, n_train: int, outer: int) -> dict:
    cfg = model.config
    tape = ad.Tape()
    p = {k: tape.leaf(v, k) for k, v in state.params.items()}
    elbo, terms = model.elbo(p, Xb, rng, n_train)
    h = model.acyclicity(p)
    loss = -elbo + h * state.lambda_al + ad.square(h) * (0.5 * state.c)
    if not np.isfinite(loss.data):
        raise TrainingDivergence(f"non-finite objective at step {state.step}: {terms}")
    grads = ad.backward(tape, loss)
    frozen = is_frozen(cfg, state.epoch, outer)
    opt.step(state.params, grads, skip=FROZEN_GROUPS if frozen else ())
    if cfg.scm == "nonlinear":
        model.update_residual_scale(state.params, terms.pop("_Z").data, terms.pop("_G").data)
    row = {"step": state.step, "outer": outer, "epoch": state.epoch, "elbo": float(elbo.data)}
    row.update(terms)
    row.update({"h": float(h.data), "c": state.c, "lambda_al": state.lambda_al, "val_elbo": float("nan")})
    return row


def validation_elbo(model: SpacyModel, params: dict, X_val, rng) -> float:
    """ELBO per validation sample (one Monte-Carlo draw, no gradients)."""
    elbo, _ = model.elbo(_consts(params), X_val, rng, len(X_val))
    return float(elbo.data) / len(X_val)


# ---------------------------------------------------------------- outputs


def extract_graph(logits_or_state, threshold: float = 0.5, mask=None) -> np.ndarray:
    """Binary temporal graph from posterior edge probabilities.

    Edges with probability above ``threshold`` are kept; while the
    instantaneous slice is cyclic, the least probable edge lying on a cycle
    is removed.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    logits = logits_or_state.params["graph.logits"] if isinstance(logits_or_state, RunState) else logits_or_state
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    if mask is None:
        mask = scm_mod.edge_mask(probs.shape[1], probs.shape[0] - 1)
    probs = probs * mask
    G = (probs > threshold).astype(float)
    inst = G[0]
    while not scm_mod.is_dag(inst):
        _, comp = connected_components(inst, directed=True, connection="strong")
        src, dst = np.nonzero(inst)
        on_cycle = comp[src] == comp[dst]
        cand = [(probs[0, i, j], i, j) for i, j in zip(src[on_cycle], dst[on_cycle])]
        _, i, j = min(cand)
        inst[i, j] = 0.0
    return G


def snapshot(state: RunState) -> RunState:
    return copy.deepcopy(state)


def infer_latents(model: SpacyModel, params: dict, X, batch: int = 100) -> np.ndarray:
    """Posterior mean latents ``(N, D, T)`` for observations ``(N, V, L, T)``."""
    X = np.asarray(X, dtype=model.dtype)
    if X.ndim == 3:
        X = X[:, None]
    p = _consts(params)
    out = [vi.encoder_stats(X[i : i + batch], p, model.dv)[0].data for i in range(0, len(X), batch)]
    return np.concatenate(out, axis=0).astype(np.float64)
