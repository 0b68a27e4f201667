"""Synthetic spatiotemporal datasets with known latent causal structure.

A dataset is produced by composing four draws:

1. an Erdős–Rényi temporal graph with an acyclic instantaneous slice,
2. RBF spatial factors with well separated centers,
3. latent series from a linear or nonlinear SCM on that graph,
4. gridded observations ``X = g(F Z) + noise``.

Each sample has its own random sub-stream, so a sample's trajectory does not
depend on how many other samples are drawn.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import scm as scm_mod
from .spatial import GridSpec, KernelParams, evaluate_factor

logger = logging.getLogger(__name__)

MAX_RETRIES = 20
DIVERGENCE_BOUND = 1e6
STATIONARITY_TOL = 0.2


class GenerationError(RuntimeError):
    """The generator could not satisfy its constraints."""


@dataclass
class GenConfig:
    """Generator settings.

    ``n_nodes`` is an int or, for multivariate data, one node count per
    variate. Edge counts default to ``4 * D`` instantaneous and ``2 * D``
    lagged edges. ``kernel_unit`` is the length (in unit-square coordinates)
    in which kernel distances are measured, so ``gamma_range`` describes
    kernel widths in cells of a 100-point-wide reference grid at any
    resolution.
    """

    n_nodes: int | tuple[int, ...] = 10
    lag: int = 1
    grid: tuple[int, int] = (100, 100)
    n_samples: int = 100
    n_timesteps: int = 100
    scm: str = "linear"
    mapping: str = "linear"
    noise_var: float = 0.5
    obs_noise: float = 0.1
    seed: int = 0
    n_inst_edges: int | None = None
    n_lag_edges: int | None = None
    lag_edges: str = "total"
    burn_in: int = 100
    gamma_range: tuple[float, float] = (3.0, 6.0)
    min_center_dist: float = 0.1
    kernel_unit: float = 0.01
    weight_range: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if isinstance(self.n_nodes, (list, tuple)):
            self.n_nodes = tuple(int(d) for d in self.n_nodes)
        self.grid = tuple(int(g) for g in self.grid)
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        self.weight_range = tuple(float(w) for w in self.weight_range)
        self.validate()

    @property
    def nodes_per_variate(self) -> tuple[int, ...]:
        return self.n_nodes if isinstance(self.n_nodes, tuple) else (int(self.n_nodes),)

    @property
    def total_nodes(self) -> int:
        return sum(self.nodes_per_variate)

    def validate(self) -> None:
        if any(d < 1 for d in self.nodes_per_variate):
            raise ValueError("n_nodes must be >= 1")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.n_timesteps <= self.lag:
            raise ValueError("n_timesteps must exceed lag")
        if self.n_samples < 1 or len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError("n_samples and grid dims must be positive")
        if self.scm not in ("linear", "nonlinear") or self.mapping not in ("linear", "nonlinear"):
            raise ValueError("scm and mapping must be 'linear' or 'nonlinear'")
        if self.lag_edges not in ("total", "per_lag"):
            raise ValueError("lag_edges must be 'total' or 'per_lag'")
        if self.noise_var < 0 or self.obs_noise < 0 or self.burn_in < 0:
            raise ValueError("noise levels and burn_in must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_nodes"] = list(self.n_nodes) if isinstance(self.n_nodes, tuple) else self.n_nodes
        for k in ("grid", "gamma_range", "weight_range"):
            d[k] = list(d[k])
        return d


@dataclass
class GroundTruth:
    """Everything drawn by :func:`generate_dataset`.

    ``factors`` is ``(L, D)``; column ``d`` only loads on the variate that
    owns node ``d`` (see ``node_variate``).
    """

    graph: np.ndarray
    factors: np.ndarray
    centers: np.ndarray
    gammas: np.ndarray
    latents: np.ndarray
    observations: np.ndarray
    node_variate: np.ndarray
    config: GenConfig
    weights: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


# ------------------------------------------------------------------ graphs


def sample_er_graph(n_nodes: int, lag: int, rng, n_inst: int | None = None, n_lag: int | None = None, lag_edges: str = "total") -> np.ndarray:
    """Random temporal adjacency ``(lag + 1, D, D)``.

    The instantaneous slice holds exactly ``n_inst`` (default ``4 D``) edges
    on a random topological order, so it is a DAG by construction. Lagged
    edges (default ``2 D``) are spread uniformly over (lag, source, target),
    in total or per lag.
    """
    D = n_nodes
    n_inst = 4 * D if n_inst is None else n_inst
    n_lag = 2 * D if n_lag is None else n_lag
    max_inst = D * (D - 1) // 2
    if n_inst > max_inst:
        raise GenerationError(f"{n_inst} instantaneous edges cannot form a DAG on {D} nodes (max {max_inst})")
    per_lag_slots = D * D
    if lag_edges == "total" and n_lag > lag * per_lag_slots or lag_edges == "per_lag" and n_lag > per_lag_slots:
        raise GenerationError(f"{n_lag} lagged edges do not fit")
    G = np.zeros((lag + 1, D, D))
    order = rng.permutation(D)
    pairs = [(order[a], order[b]) for a in range(D) for b in range(a + 1, D)]
    for i in rng.choice(len(pairs), size=n_inst, replace=False):
        G[0][pairs[i]] = 1.0
    if lag_edges == "total":
        flat = rng.choice(lag * per_lag_slots, size=n_lag, replace=False)
        G[1:].reshape(-1)[flat] = 1.0
    else:
        for k in range(1, lag + 1):
            G[k].reshape(-1)[rng.choice(per_lag_slots, size=n_lag, replace=False)] = 1.0
    return G


# ------------------------------------------------------------ spatial draws


def sample_spatial_params(n_nodes: int, grid: GridSpec, rng, gamma_range=(3.0, 6.0), min_dist: float = 0.1, kernel_unit: float = 0.01, max_attempts: int = 10_000):
    """Kernel centers with pairwise separation ``>= min_dist`` and scales ``U[gamma_range]``.

    Returns ``(KernelParams, gammas)``; the kernel's log-scale is expressed
    in unit-square coordinates, ``gammas`` are the raw draws.
    """
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < n_nodes:
        if attempts >= max_attempts:
            raise GenerationError(f"could not place {n_nodes} centers {min_dist} apart in {max_attempts} attempts")
        attempts += 1
        c = rng.uniform(0.0, 1.0, size=2)
        if all(np.linalg.norm(c - o) >= min_dist for o in centers):
            centers.append(c)
    gammas = rng.uniform(*gamma_range, size=n_nodes)
    log_scale = gammas + 2.0 * np.log(kernel_unit)
    return KernelParams(np.array(centers), log_scale, "rbf"), gammas


# ---------------------------------------------------------- latent dynamics


def sample_linear_weights(graph, rng, weight_range=(0.1, 0.5)) -> np.ndarray:
    lo, hi = weight_range
    mag = rng.uniform(lo, hi, size=graph.shape)
    sign = rng.choice([-1.0, 1.0], size=graph.shape)
    return mag * sign * graph


def _companion_radius(W) -> float:
    """Spectral radius of the reduced-form VAR implied by a linear SCM."""
    K, D, _ = W.shape
    lag = K - 1
    inv = np.linalg.inv(np.eye(D) - W[0].T)
    blocks = [inv @ W[k].T for k in range(1, K)]
    comp = np.zeros((D * lag, D * lag))
    comp[:D] = np.hstack(blocks)
    if lag > 1:
        comp[D:, :-D] = np.eye(D * (lag - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def sample_nonlinear_scm(graph, rng, hidden: int = 64) -> dict:
    """Random per-node ReLU nets and per-node noise splines."""
    K, D, _ = graph.shape
    n_in = K * D
    nets = []
    for _ in range(D):
        layers = []
        for fan_in, fan_out in ((n_in, hidden), (hidden, hidden), (hidden, 1)):
            layers.append((rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), rng.normal(0, 0.1, fan_out)))
        nets.append(layers)
    splines = rng.normal(0.0, 1.0, (D, scm_mod.spline_param_count()))
    return {"nets": nets, "splines": splines}


def _relu_net(layers, x):
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def simulate_latents(graph, kind: str, rng, n_timesteps: int, burn_in: int = 100, *, n_samples: int = 1, params=None, noise_var: float = 0.5, init=None, sample_rngs=None, weight_range=(0.1, 0.5), return_params: bool = False):
    """Simulate ``(n_samples, D, n_timesteps)`` latent series on ``graph``.

    Nodes are updated in topological order of the instantaneous slice within
    each step; the first ``burn_in`` steps are dropped. ``init`` supplies
    the ``lag`` initial values (shape ``(n_samples, D, lag)``), otherwise
    they are standard normal. When ``params`` is omitted the SCM parameters
    are drawn here and redrawn (up to 20 times) if the system diverges.
    """
    graph = np.asarray(graph, dtype=float)
    K, D, _ = graph.shape
    lag = K - 1
    order = scm_mod.topological_order(graph[0])
    if order is None:
        raise GenerationError("instantaneous graph is cyclic")
    total = lag + burn_in + n_timesteps
    if sample_rngs is None:
        sample_rngs = [rng] if n_samples == 1 else [np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, n_samples)]
    noise = np.stack([r.standard_normal((total, D)) for r in sample_rngs])  # (N, total, D)
    start = np.stack([r.standard_normal((D, lag)) for r in sample_rngs]) if init is None else np.asarray(init, float)
    fixed = params is not None
    best = None
    for attempt in range(MAX_RETRIES):
        if not fixed:
            if kind == "linear":
                params = sample_linear_weights(graph, rng, weight_range)
                if _companion_radius(params) >= 1.0:
                    continue
            else:
                params = sample_nonlinear_scm(graph, rng)
        Z = _run(graph, kind, params, order, noise, start, noise_var, lag, total)
        if np.all(np.isfinite(Z)) and np.max(np.abs(Z)) < DIVERGENCE_BOUND:
            Z = Z[:, :, lag + burn_in :]
            if fixed or kind != "linear":
                return (Z, params) if return_params else Z
            drift = variance_drift(Z)
            if best is None or drift < best[0]:
                best = (drift, Z, params)
            if drift < STATIONARITY_TOL:
                break
            logger.info("variance drift %.3f (attempt %d), redrawing SCM weights", drift, attempt + 1)
            continue
        if fixed:
            break
        logger.info("latent trajectory diverged (attempt %d), redrawing SCM parameters", attempt + 1)
    if best is None:
        raise GenerationError("latent simulation diverged")
    if best[0] >= STATIONARITY_TOL:
        logger.warning("no weight draw met the stationarity check; keeping the best (drift %.3f)", best[0])
    _, Z, params = best
    return (Z, params) if return_params else Z


def variance_drift(Z) -> float:
    """Largest per-node relative change in variance between the two halves of ``(N, D, T)`` series."""
    half = Z.shape[-1] // 2
    early = Z[:, :, :half].var(axis=(0, 2))
    late = Z[:, :, half:].var(axis=(0, 2))
    return float(np.max(np.abs(late / np.maximum(early, 1e-300) - 1.0)))


def _run(graph, kind, params, order, noise, start, noise_var, lag, total):
    N, _, D = noise.shape
    Z = np.zeros((N, D, total))
    Z[:, :, :lag] = start
    sd = np.sqrt(noise_var)
    with np.errstate(all="ignore"):
        for t in range(lag, total):
            hist = Z[:, :, t - lag : t + 1][:, :, ::-1]  # (N, D, K), column k = Z^(t-k)
            for d in order:
                if kind == "linear":
                    mean = np.einsum("njk,kj->n", hist, params[:, :, d])
                    eta = sd * noise[:, t, d]
                else:
                    x = (hist * np.transpose(graph[:, :, d])[None]).transpose(0, 2, 1).reshape(N, -1)
                    mean = _relu_net(params["nets"][d], x)[:, 0]
                    eta = _history_scale(graph, params["splines"][d], hist, d) * noise[:, t, d]
                Z[:, d, t] = mean + eta  # hist is a view, so children see this value
            if not np.all(np.isfinite(Z[:, :, t])) or np.max(np.abs(Z[:, :, t])) > DIVERGENCE_BOUND:
                return Z
    return Z


def _history_scale(graph, spline_raw, hist, d):
    """Noise scale ``softplus(spline(mean of lagged parents))``."""
    mask = graph[1:, :, d].T  # (D, lag)
    n_par = mask.sum()
    avg = (hist[:, :, 1:] * mask[None]).sum(axis=(1, 2)) / n_par if n_par else np.zeros(hist.shape[0])
    raw = np.broadcast_to(spline_raw, avg.shape + spline_raw.shape)
    y, _ = scm_mod.spline_forward(avg, raw)
    return np.logaddexp(0.0, y.data)


# ------------------------------------------------------------ observations


def sample_mapping(n_variates: int, n_points: int, rng, hidden: int = 16) -> list[dict]:
    """Random per-variate monotone maps ``g(x, e_l)`` with a scalar point embedding.

    ``g(x, e) = sum_h a_h tanh(w_h x + u_h e + b_h)`` with ``a_h w_h > 0`` so
    every grid point's map is strictly increasing in ``x``.
    """
    maps = []
    for _ in range(n_variates):
        w = np.abs(rng.normal(0.0, 1.0, hidden)) + 0.2
        maps.append({
            "embed": rng.normal(0.0, 1.0, n_points),
            "w": w,
            "u": rng.normal(0.0, 1.0, hidden),
            "b": rng.normal(0.0, 0.5, hidden),
            "a": np.abs(rng.normal(0.0, 1.0, hidden)) * 2.0 / np.sqrt(hidden),
        })
    return maps


def apply_mapping(m: dict, x: np.ndarray) -> np.ndarray:
    """Apply one variate's map to ``x`` of shape ``(..., L, T)``."""
    e = m["embed"][:, None, None]
    pre = x[..., None] * m["w"] + e * m["u"] + m["b"]
    return np.tanh(pre) @ m["a"] - np.tanh(e * m["u"] + m["b"]) @ m["a"]


def render_observations(latents, factors, mapping: str, noise_sd: float, rng, node_variate=None, maps=None, sample_rngs=None) -> np.ndarray:
    """Observations ``(N, V, L, T)`` from latents ``(N, D, T)`` and factors ``(L, D)``.

    Variate ``v`` sees only the nodes with ``node_variate == v``.
    """
    latents = np.asarray(latents, float)
    factors = np.asarray(factors, float)
    N, D, T = latents.shape
    L = factors.shape[0]
    if factors.shape[1] != D:
        raise ValueError("factor columns must match the latent dimension")
    node_variate = np.zeros(D, int) if node_variate is None else np.asarray(node_variate)
    V = int(node_variate.max()) + 1
    if mapping == "nonlinear" and maps is None:
        maps = sample_mapping(V, L, rng)
    X = np.empty((N, V, L, T))
    for v in range(V):
        cols = node_variate == v
        lin = np.einsum("ld,ndt->nlt", factors[:, cols], latents[:, cols])
        X[:, v] = lin if mapping == "linear" else apply_mapping(maps[v], lin)
    if noise_sd > 0:
        rngs = sample_rngs if sample_rngs is not None else [rng] * N
        for n in range(N):
            X[n] += noise_sd * rngs[n].standard_normal((V, L, T))
    return X


# ----------------------------------------------------------------- dataset


def generate_dataset(cfg: GenConfig, out_dir=None) -> GroundTruth:
    """Draw a full dataset; optionally persist it to ``out_dir``."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    model_seq, *sample_seqs = root.spawn(1 + cfg.n_samples)
    rng = np.random.default_rng(model_seq)
    lat_rngs = [np.random.default_rng(s.spawn(2)[0]) for s in sample_seqs]
    obs_rngs = [np.random.default_rng(s.spawn(2)[1]) for s in sample_seqs]

    dv = cfg.nodes_per_variate
    D = sum(dv)
    graph = sample_er_graph(D, cfg.lag, rng, cfg.n_inst_edges, cfg.n_lag_edges, cfg.lag_edges)
    grid = GridSpec.regular(*cfg.grid)
    node_variate = np.repeat(np.arange(len(dv)), dv)
    centers, gammas, blocks = [], [], []
    for n in dv:
        kp, g = sample_spatial_params(n, grid, rng, cfg.gamma_range, cfg.min_center_dist, cfg.kernel_unit)
        centers.append(kp.center)
        gammas.append(g)
        blocks.append(evaluate_factor(grid, kp))
    factors = np.hstack(blocks)
    Z, params = simulate_latents(
        graph, cfg.scm, rng, cfg.n_timesteps, cfg.burn_in,
        n_samples=cfg.n_samples, noise_var=cfg.noise_var, sample_rngs=lat_rngs,
        weight_range=cfg.weight_range, return_params=True,
    )
    maps = sample_mapping(len(dv), grid.n_points, rng) if cfg.mapping == "nonlinear" else None
    X = render_observations(Z, factors, cfg.mapping, cfg.obs_noise, rng, node_variate, maps, obs_rngs)
    truth = GroundTruth(
        graph=graph, factors=factors, centers=np.vstack(centers), gammas=np.concatenate(gammas),
        latents=Z, observations=X, node_variate=node_variate, config=cfg,
        weights=params if cfg.scm == "linear" else None,
    )
    if out_dir is not None:
        from .io import save_dataset

        save_dataset(truth, out_dir)
    return truth
