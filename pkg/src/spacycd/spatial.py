"""Grid geometry, distance metrics and spatial kernels.

A factor matrix ``F`` has one row per grid point and one column per latent
node; column ``d`` is a kernel bump centred at ``rho[d]`` whose width is set
by the log-scale ``gamma[d]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FAMILIES = ("rbf", "rbf-anisotropic", "matern15", "matern25")
METRICS = ("euclidean", "haversine")


@dataclass
class GridSpec:
    """Spatial locations of the ``L = L1 * L2`` grid points.

    Euclidean grids hold coordinates in ``[0, 1]^2``; haversine grids hold
    ``(latitude, longitude)`` in radians.
    """

    dims: tuple[int, int]
    coords: np.ndarray
    metric: str = "euclidean"
    radius: float = 1.0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if any(n < 1 for n in self.dims):
            raise ValueError(f"grid dims must be positive, got {self.dims}")
        if self.coords.shape != (self.n_points, 2):
            raise ValueError(f"coords must have shape ({self.n_points}, 2), got {self.coords.shape}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == "euclidean":
            if self.coords.min() < 0 or self.coords.max() > 1:
                raise ValueError("euclidean grid coordinates must lie in [0, 1]^2")
        else:
            if self.radius <= 0:
                raise ValueError("haversine radius must be positive")
            _check_latitudes(self.coords[:, 0])

    @property
    def n_points(self) -> int:
        return self.dims[0] * self.dims[1]

    @classmethod
    def regular(cls, n_rows: int, n_cols: int | None = None) -> "GridSpec":
        """Row-major regular grid on the unit square."""
        n_cols = n_rows if n_cols is None else n_cols
        ys = np.linspace(0.0, 1.0, n_rows) if n_rows > 1 else np.array([0.5])
        xs = np.linspace(0.0, 1.0, n_cols) if n_cols > 1 else np.array([0.5])
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return cls((n_rows, n_cols), np.column_stack([yy.ravel(), xx.ravel()]))

    @classmethod
    def latlon(cls, lats, lons, radius: float = 1.0) -> "GridSpec":
        """Row-major latitude/longitude grid (radians)."""
        lats, lons = np.asarray(lats, float), np.asarray(lons, float)
        la, lo = np.meshgrid(lats, lons, indexing="ij")
        return cls((len(lats), len(lons)), np.column_stack([la.ravel(), lo.ravel()]), "haversine", radius)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "metric": self.metric, "radius": self.radius}


def _check_latitudes(lat) -> None:
    lat = np.asarray(lat)
    if np.any(np.abs(lat) > np.pi / 2 + 1e-12):
        raise ValueError("latitude outside [-pi/2, pi/2]")


def distance(a, b, metric: str = "euclidean", radius: float = 1.0) -> float:
    """Distance between two points under ``metric``.

    >>> distance((0, 0), (3, 4))
    5.0
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if metric == "euclidean":
        return float(np.sqrt(np.sum((a - b) ** 2)))
    if metric == "haversine":
        _check_latitudes([a[0], b[0]])
        h = _haversine_h(a[0], a[1], b[0], b[1])
        return float(2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))
    raise ValueError(f"unknown metric {metric!r}")


def _haversine_h(lat1, lon1, lat2, lon2):
    return np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2


@dataclass
class KernelParams:
    """Per-node kernel parameters.

    ``center`` is ``(D, 2)`` in grid coordinates, ``log_scale`` is ``(D,)``.
    The anisotropic family additionally uses ``A`` of shape ``(D, 2, 2)`` and
    ``B`` of shape ``(D, 2)``, giving ``Sigma = A A^T + diag(exp(B))``.
    """

    center: np.ndarray
    log_scale: np.ndarray
    family: str = "rbf"
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.atleast_2d(np.asarray(self.center, float))
        self.log_scale = np.atleast_1d(np.asarray(self.log_scale, float))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.center.shape != (len(self.log_scale), 2):
            raise ValueError("center must be (D, 2) matching log_scale (D,)")
        if self.family == "rbf-anisotropic":
            D = len(self.log_scale)
            self.A = np.zeros((D, 2, 2)) if self.A is None else np.asarray(self.A, float).reshape(D, 2, 2)
            self.B = np.zeros((D, 2)) if self.B is None else np.asarray(self.B, float).reshape(D, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.log_scale)

    def covariance(self) -> np.ndarray:
        return self.A @ np.swapaxes(self.A, 1, 2) + np.stack([np.diag(np.exp(b)) for b in self.B])


def evaluate_factor(grid: GridSpec, params: KernelParams) -> np.ndarray:
    """Factor matrix ``F`` of shape ``(L, D)`` (numpy, no gradients)."""
    if params.family == "rbf-anisotropic" and grid.metric != "euclidean":
        raise ValueError("the anisotropic kernel is defined for euclidean grids only")
    if params.family == "rbf-anisotropic":
        sigma = params.covariance()
        if np.any(np.linalg.det(sigma) <= 0):
            raise np.linalg.LinAlgError("singular kernel covariance")
        prec = np.linalg.inv(sigma)
        diff = grid.coords[:, None, :] - params.center[None, :, :]
        q = np.einsum("ldi,dij,ldj->ld", diff, prec, diff)
        return np.exp(-0.5 * q)
    sq = squared_distances(grid, params.center)
    return _profile(sq / np.exp(params.log_scale)[None, :], params.family)


def squared_distances(grid: GridSpec, centers) -> np.ndarray:
    centers = np.atleast_2d(np.asarray(centers, float))
    if grid.metric == "euclidean":
        return ((grid.coords[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    _check_latitudes(centers[:, 0])
    c = grid.coords
    h = _haversine_h(c[:, None, 0], c[:, None, 1], centers[None, :, 0], centers[None, :, 1])
    return (2.0 * grid.radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))) ** 2


def _profile(u, family: str):
    """Kernel value as a function of ``u = r^2 / s^2``."""
    if family == "rbf":
        return np.exp(-u)
    a = np.sqrt(np.maximum(u, 0.0) * (3.0 if family == "matern15" else 5.0))
    if family == "matern15":
        return (1.0 + a) * np.exp(-a)
    if family == "matern25":
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError(f"no radial profile for {family!r}")


def matern(u, nu: float) -> ad.Tensor:
    """Matérn profile of ``u = (r / s)^2`` for ``nu`` in {1.5, 2.5}.

    Written in terms of the squared distance so the derivative stays finite
    at ``r = 0``.
    """
    u = ad.as_tensor(u)
    ud = np.maximum(u.data, 0.0)
    if nu == 1.5:
        a = np.sqrt(3.0 * ud)
        ea = np.exp(-a)
        val = (1.0 + a) * ea
        du = -1.5 * ea
    elif nu == 2.5:
        a = np.sqrt(5.0 * ud)
        ea = np.exp(-a)
        val = (1.0 + a + a * a / 3.0) * ea
        du = -(5.0 / 6.0) * (1.0 + a) * ea
    else:
        raise ValueError("only nu = 1.5 and nu = 2.5 are supported")
    return ad.primitive(val.astype(u.dtype), (u,), (lambda g: g * du,))


def _arcsin_sqrt_sq(h) -> ad.Tensor:
    """``arcsin(sqrt(h))**2`` with the removable singularity at 0 handled."""
    h = ad.as_tensor(h)
    hd = np.clip(h.data, 0.0, 1.0 - 1e-15)
    r = np.sqrt(hd)
    s = np.arcsin(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(hd > 1e-12, s / (r * np.sqrt(1.0 - hd)), 1.0 + 2.0 * hd / 3.0)
    return ad.primitive((s * s).astype(h.dtype), (h,), (lambda g: g * slope,))


def center_from_raw(grid: GridSpec, rho_raw) -> ad.Tensor:
    """Squash unconstrained centers into the grid domain with a sigmoid."""
    unit = ad.sigmoid(rho_raw)
    if grid.metric == "euclidean":
        return unit
    lo = grid.coords.min(0)
    hi = grid.coords.max(0)
    return unit * (hi - lo) + lo


def differentiable_squared_distances(grid: GridSpec, center) -> ad.Tensor:
    coords = grid.coords.astype(center.dtype)
    if grid.metric == "euclidean":
        diff = ad.sub(coords[:, None, :], ad.reshape(center, (1,) + center.shape))
        return ad.sum(ad.square(diff), axis=-1)
    lat1, lon1 = coords[:, None, 0], coords[:, None, 1]
    lat2 = ad.reshape(center[:, 0], (1, -1))
    lon2 = ad.reshape(center[:, 1], (1, -1))
    h = ad.square(ad.sin((lat2 - lat1) * 0.5)) + ad.cos(lat2) * np.cos(lat1) * ad.square(ad.sin((lon2 - lon1) * 0.5))
    return _arcsin_sqrt_sq(h) * (4.0 * grid.radius**2)


def differentiable_factor(grid: GridSpec, rho_raw, gamma, family: str = "rbf", A=None, B=None) -> ad.Tensor:
    """Factor matrix on the tape from unconstrained centers ``rho_raw`` (D, 2)."""
    if family not in FAMILIES:
        raise ValueError(f"unknown kernel family {family!r}")
    rho_raw, gamma = ad.as_tensor(rho_raw), ad.as_tensor(gamma)
    center = center_from_raw(grid, rho_raw)
    if family == "rbf-anisotropic":
        if grid.metric != "euclidean":
            raise ValueError("the anisotropic kernel is defined for euclidean grids only")
        return _anisotropic(grid, center, ad.as_tensor(A), ad.as_tensor(B))
    sq = differentiable_squared_distances(grid, center)
    u = sq / ad.reshape(ad.exp(gamma), (1, -1))
    if family == "rbf":
        return ad.exp(-u)
    return matern(u, 1.5 if family == "matern15" else 2.5)


def _anisotropic(grid: GridSpec, center, A, B) -> ad.Tensor:
    # Sigma = A A^T + diag(exp(B)), inverted in closed form (2x2)
    a, b, c, d = A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1]
    s11 = a * a + b * b + ad.exp(B[:, 0])
    s12 = a * c + b * d
    s22 = c * c + d * d + ad.exp(B[:, 1])
    det = s11 * s22 - s12 * s12
    if np.any(det.data <= 0):
        raise np.linalg.LinAlgError("singular kernel covariance")
    coords = grid.coords.astype(center.dtype)
    dy = ad.sub(coords[:, :1], ad.reshape(center[:, 0], (1, -1)))
    dx = ad.sub(coords[:, 1:], ad.reshape(center[:, 1], (1, -1)))
    q = (ad.square(dy) * s22 - dy * dx * (s12 * 2.0) + ad.square(dx) * s11) / det
    return ad.exp(q * -0.5)
