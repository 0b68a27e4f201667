"""Recovery scores: optimal node matching, orientation F1 and MCC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Assignment:
    """``permutation[i]`` is the estimated node matched to true node ``i``."""

    permutation: np.ndarray
    total_cost: float

    def __post_init__(self):
        perm = np.asarray(self.permutation)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("permutation must be a bijection")


@dataclass
class EvalReport:
    f1: float
    precision: float
    recall: float
    mcc: float | None
    permutation: list
    mode: str
    confusion: dict = field(default_factory=dict)
    correlation: str = "absolute"

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "mcc": self.mcc,
            "permutation": [int(p) for p in self.permutation],
            "mode": self.mode,
            "confusion": self.confusion,
            "correlation": self.correlation,
        }


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest augmenting paths with dual potentials, ``O(n^3)``.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost entries must be finite")
    n = C.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=int), 0.0)
    # 1-based arrays; column 0 is a virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cols = np.nonzero(free)[0] + 1
            cur = C[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=int)
    perm[match[1:] - 1] = np.arange(n)
    return Assignment(perm, float(C[np.arange(n), perm].sum()))


def _abs_corr_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``|corr(A_i, B_j)|`` for rows of ``A`` and ``B``; undefined entries are 0."""
    A = A - A.mean(axis=1, keepdims=True)
    B = B - B.mean(axis=1, keepdims=True)
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((B * B).sum(axis=1))
    const_a, const_b = na == 0, nb == 0
    if const_a.any() or const_b.any():
        logger.warning("constant series (true %s, estimated %s); correlation set to 0",
                       np.nonzero(const_a)[0].tolist(), np.nonzero(const_b)[0].tolist())
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.abs(A @ B.T) / np.outer(na, nb)
    R[~np.isfinite(R)] = 0.0
    return np.clip(R, 0.0, 1.0)


def _pool(Z) -> np.ndarray:
    """Latents ``(N, D, T)`` or ``(D, T)`` as ``(D, N*T)`` rows."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2:
        return Z
    if Z.ndim != 3:
        raise ValueError(f"latents must be (D, T) or (N, D, T), got shape {Z.shape}")
    return np.moveaxis(Z, 1, 0).reshape(Z.shape[1], -1)


def _relabel(G, perm) -> np.ndarray:
    """Estimated graph expressed in true-node labels: ``out[k, i, j] = G[k, perm[i], perm[j]]``."""
    G = np.asarray(G)
    return G[:, perm][:, :, perm]


def match_nodes(truth, estimate, mode: str = "latent") -> Assignment:
    """Optimal relabeling of estimated nodes onto true nodes.

    ``mode='latent'`` uses cost ``1 - |corr|`` pooled over samples and time;
    ``mode='graph'`` uses the Hamming distance between adjacency tensors.
    """
    if mode == "latent":
        A, B = _pool(truth), _pool(estimate)
        if A.shape != B.shape:
            raise ValueError(f"latent shapes differ: {A.shape} vs {B.shape}")
        return hungarian(1.0 - _abs_corr_matrix(A, B))
    if mode != "graph":
        raise ValueError(f"unknown mode {mode!r}")
    T, E = np.asarray(truth) != 0, np.asarray(estimate) != 0
    if T.shape != E.shape:
        raise ValueError(f"graph shapes differ: {T.shape} vs {E.shape}")
    return _graph_match(T, E)


def _graph_match(T, E) -> Assignment:
    """Hamming-optimal relabeling.

    The Hamming distance between relabeled adjacencies is quadratic in the
    permutation, so it is solved exactly by enumeration for small ``D`` and
    by Hungarian-seeded pairwise-swap descent otherwise.
    """
    D = T.shape[1]

    def cost(perm):
        return float(np.sum(T != _relabel(E, perm)))

    if D <= 8:
        from itertools import permutations

        best = min(permutations(range(D)), key=lambda p: cost(np.array(p)))
        perm = np.array(best)
        return Assignment(perm, cost(perm))
    # linear surrogate: compare in/out degree profiles per lag
    prof_t = np.concatenate([T.sum(axis=1), T.sum(axis=2)], axis=0).T.astype(float)
    prof_e = np.concatenate([E.sum(axis=1), E.sum(axis=2)], axis=0).T.astype(float)
    lin = np.abs(prof_t[:, None, :] - prof_e[None, :, :]).sum(axis=2)
    perm = hungarian(lin).permutation.copy()
    best = cost(perm)
    improved = True
    while improved:
        improved = False
        for i in range(D):
            for j in range(i + 1, D):
                perm[[i, j]] = perm[[j, i]]
                c = cost(perm)
                if c < best:
                    best, improved = c, True
                else:
                    perm[[i, j]] = perm[[j, i]]
    return Assignment(perm, best)


def orientation_f1(truth, estimate, perm=None) -> tuple[float, float, float]:
    """F1, precision and recall over directed lag-labelled edges."""
    T = np.asarray(truth) != 0
    E = np.asarray(estimate) != 0
    if T.shape != E.shape:
        raise ValueError(f"graph shapes differ: {T.shape} vs {E.shape}")
    if perm is not None:
        E = _relabel(E, np.asarray(perm))
    tp = int(np.sum(T & E))
    n_est, n_true = int(E.sum()), int(T.sum())
    precision = tp / n_est if n_est else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def confusion_by_lag(truth, estimate, perm=None) -> dict:
    T = np.asarray(truth) != 0
    E = np.asarray(estimate) != 0
    if perm is not None:
        E = _relabel(E, np.asarray(perm))
    out = {}
    for k in range(T.shape[0]):
        out[str(k)] = {
            "tp": int(np.sum(T[k] & E[k])),
            "fp": int(np.sum(~T[k] & E[k])),
            "fn": int(np.sum(T[k] & ~E[k])),
        }
    return out


def mcc(truth, estimate, perm=None) -> float:
    """Mean absolute Pearson correlation of matched latent series."""
    A, B = _pool(truth), _pool(estimate)
    if A.shape != B.shape:
        raise ValueError(f"latent shapes differ: {A.shape} vs {B.shape}")
    if perm is not None:
        B = B[np.asarray(perm)]
    R = _abs_corr_matrix(A, B)
    return float(np.mean(np.diag(R)))


def evaluate(true_graph, est_graph, true_latents=None, est_latents=None) -> EvalReport:
    """Full report; matching uses latents when both are given, graphs otherwise."""
    if true_latents is not None and est_latents is not None:
        assign, mode = match_nodes(true_latents, est_latents, "latent"), "latent"
    else:
        assign, mode = match_nodes(true_graph, est_graph, "graph"), "graph"
    perm = assign.permutation
    f1, p, r = orientation_f1(true_graph, est_graph, perm)
    m = mcc(true_latents, est_latents, perm) if mode == "latent" else None
    return EvalReport(f1, p, r, m, perm.tolist(), mode, confusion_by_lag(true_graph, est_graph, perm))
