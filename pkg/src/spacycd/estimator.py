"""scikit-learn style wrapper around :func:`spacycd.trainer.train`."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .spatial import GridSpec
from .trainer import TrainConfig, extract_graph, infer_latents, train


def check_observations(X, n_variates: int | None = None, dtype=np.float64) -> np.ndarray:
    """Validate gridded observations and return them as ``(N, V, L, T)``.

    A 3-d array is read as a single-variate ``(N, L, T)`` stack.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected a 3-d or 4-d array, got {X.ndim} dimensions")
    if min(X.shape) < 1:
        raise ValueError(f"empty observations with shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations contain NaN or infinite values")
    if n_variates is not None and X.shape[1] != n_variates:
        raise ValueError(f"expected {n_variates} variates, got {X.shape[1]}")
    return X


def check_grid(grid, n_points: int) -> GridSpec:
    if grid is None:
        side = int(round(np.sqrt(n_points)))
        if side * side != n_points:
            raise ValueError(f"{n_points} grid points is not a square grid; pass grid=")
        return GridSpec.regular(side)
    if isinstance(grid, (tuple, list)) and len(grid) == 2 and all(isinstance(g, (int, np.integer)) for g in grid):
        grid = GridSpec.regular(*grid)
    if not isinstance(grid, GridSpec):
        raise TypeError("grid must be a GridSpec or a (rows, cols) pair")
    if grid.n_points != n_points:
        raise ValueError(f"grid has {grid.n_points} points, data has {n_points}")
    return grid


_CONFIG_FIELDS = [f for f in dataclasses.fields(TrainConfig)]


class SPACY(TransformerMixin, BaseEstimator):
    """Spatiotemporal causal discovery estimator.

    ``fit`` learns spatial factors, a latent temporal causal graph and an
    encoder; ``transform`` maps observations to posterior-mean latents of
    shape ``(N, D, T)``. Every :class:`TrainConfig` field is a constructor
    parameter.

    Attributes set by ``fit``: ``graph_`` (binary ``(lag + 1, D, D)``),
    ``edge_probs_``, ``factors_`` (``(L, D)``), ``centers_``, ``log_scales_``,
    ``state_`` and ``model_``.
    """

    def __init__(
        self,
        n_nodes=10,
        lag=1,
        scm="linear",
        mapping="linear",
        kernel="rbf",
        lr_matrix=1e-3,
        lr_scm=1e-3,
        lr_encoder=1e-3,
        lr_factor=1e-2,
        lr_decoder=1e-3,
        batch_size=100,
        outer_auglag=60,
        inner_auglag=6000,
        scm_embed=64,
        sparsity_alpha=10.0,
        spline="quadratic",
        decoder_embed=32,
        hidden=64,
        freeze_epochs=200,
        seed=0,
        precision="float64",
        temperature=0.5,
        straight_through=True,
        val_fraction=0.2,
        patience=500,
        plateau_tol=1e-3,
        eval_every=50,
        threshold=0.5,
        per_point_noise=False,
        recon_points=None,
        init_gamma=-4.0,
        init_enc_logvar=-2.0,
        center_init="variance",
        center_init_radius=0.1,
        auglag_c0=1.0,
        auglag_growth=10.0,
        auglag_ratio=0.9,
        max_penalty=1e12,
        max_steps=None,
        threads=None,
        grid=None,
    ):
        self.n_nodes = n_nodes
        self.lag = lag
        self.scm = scm
        self.mapping = mapping
        self.kernel = kernel
        self.lr_matrix = lr_matrix
        self.lr_scm = lr_scm
        self.lr_encoder = lr_encoder
        self.lr_factor = lr_factor
        self.lr_decoder = lr_decoder
        self.batch_size = batch_size
        self.outer_auglag = outer_auglag
        self.inner_auglag = inner_auglag
        self.scm_embed = scm_embed
        self.sparsity_alpha = sparsity_alpha
        self.spline = spline
        self.decoder_embed = decoder_embed
        self.hidden = hidden
        self.freeze_epochs = freeze_epochs
        self.seed = seed
        self.precision = precision
        self.temperature = temperature
        self.straight_through = straight_through
        self.val_fraction = val_fraction
        self.patience = patience
        self.plateau_tol = plateau_tol
        self.eval_every = eval_every
        self.threshold = threshold
        self.per_point_noise = per_point_noise
        self.recon_points = recon_points
        self.init_gamma = init_gamma
        self.init_enc_logvar = init_enc_logvar
        self.center_init = center_init
        self.center_init_radius = center_init_radius
        self.auglag_c0 = auglag_c0
        self.auglag_growth = auglag_growth
        self.auglag_ratio = auglag_ratio
        self.max_penalty = max_penalty
        self.max_steps = max_steps
        self.threads = threads
        self.grid = grid

    def _config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in _CONFIG_FIELDS})

    def fit(self, X, y=None, callback=None):
        cfg = self._config()
        X = check_observations(X)
        grid = check_grid(self.grid, X.shape[2])
        self.model_, self.state_ = train(X, cfg, grid, callback=callback)
        self.n_features_in_ = X.shape[2]
        self._set_outputs()
        return self

    def _set_outputs(self):
        from . import variational as vi
        from .autodiff import const
        from .spatial import center_from_raw

        p = self.state_.params
        self.edge_probs_ = 1.0 / (1.0 + np.exp(-p["graph.logits"].astype(np.float64))) * self.model_.mask
        self.graph_ = extract_graph(p["graph.logits"], self.threshold, self.model_.mask)
        cp = {k: const(v.astype(np.float64)) for k, v in p.items()}
        self.factors_ = vi.mean_factors(cp, self.model_.grid, self.kernel).data
        self.centers_ = center_from_raw(self.model_.grid, cp["factor.mu_rho"]).data
        self.log_scales_ = p["factor.mu_gamma"].astype(np.float64)

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_observations(X, self.model_.n_variates)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} grid points, got {X.shape[2]}")
        return infer_latents(self.model_, self.state_.params, X)
