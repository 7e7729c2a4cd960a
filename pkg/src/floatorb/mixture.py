"""Signed anisotropic Gaussian mixtures as electron densities.

A mixture evaluates to ``scale * ReLU(sum_j w_j N(r | mu_j, Sigma_j))``
(the clamp can be switched off). Densities are in electrons per cubic
Angstrom; grids follow the VASP convention of lattice vectors as rows and
the first index varying fastest.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import _kernels

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_PRUNE = 60.0
SYMMETRY_TOL = 1e-12


class NotPositiveDefiniteError(ValueError):
    pass


def _check_covariance(sigma: np.ndarray) -> None:
    asym = np.abs(sigma - np.swapaxes(sigma, -1, -2)).max(initial=0.0)
    size = max(1.0, np.abs(sigma).max(initial=0.0))
    if asym > SYMMETRY_TOL * size:
        raise NotPositiveDefiniteError(f"covariance is not symmetric (max asymmetry {asym:.3e})")
    if sigma.size and np.linalg.eigvalsh(sigma).min() <= 0:
        raise NotPositiveDefiniteError("covariance is not positive definite")


@dataclass(frozen=True)
class Gaussian:
    w: float
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(3)
        sigma = np.asarray(self.sigma, dtype=float).reshape(3, 3)
        if not (np.isfinite(self.w) and np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValueError("Gaussian parameters must be finite")
        _check_covariance(sigma)
        sigma = 0.5 * (sigma + sigma.T)
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @cached_property
    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.sigma)

    @cached_property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @cached_property
    def log_norm(self) -> float:
        """``log((2 pi)^(-3/2) det(Sigma)^(-1/2))``."""
        return float(-1.5 * LOG_2PI - np.log(np.diag(self.cholesky)).sum())


def gaussian_pdf(g: Gaussian, r) -> np.ndarray | float:
    """Unweighted normal density of ``g`` at point(s) ``r`` (shape ``(..., 3)``)."""
    d = np.asarray(r, dtype=float) - g.mu
    q = np.einsum("...i,ij,...j->...", d, g.precision, d)
    out = np.exp(g.log_norm - 0.5 * q)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Mixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    scale: float = 1.0
    clamp_negative: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if not (len(w) == len(mu) == len(cov)):
            raise ValueError("weights, means and covariances disagree in length")
        if not (np.isfinite(w).all() and np.isfinite(mu).all() and np.isfinite(cov).all()):
            raise ValueError("mixture parameters must be finite")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        _check_covariance(cov)
        # store the exact symmetric part so serialized upper triangles round-trip
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        for a in (w, mu, cov):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def empty(cls, **kw) -> Mixture:
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)), **kw)

    @classmethod
    def from_gaussians(cls, gaussians, **kw) -> Mixture:
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(**kw)
        return cls(
            np.array([g.w for g in gaussians]),
            np.array([g.mu for g in gaussians]),
            np.array([g.sigma for g in gaussians]),
            **kw,
        )

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def gaussians(self) -> list[Gaussian]:
        return [Gaussian(w, m, s) for w, m, s in zip(self.weights, self.means, self.covariances)]

    @cached_property
    def precisions(self) -> np.ndarray:
        return np.linalg.inv(self.covariances) if len(self) else np.zeros((0, 3, 3))

    @cached_property
    def log_norms(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0)
        chol = np.linalg.cholesky(self.covariances)
        return -1.5 * LOG_2PI - np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)

    def replace(self, **kw) -> Mixture:
        return replace(self, **kw)

    def rotated(self, R) -> Mixture:
        R = np.asarray(R, dtype=float)
        cov = np.einsum("ij,gjk,lk->gil", R, self.covariances, R)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        return self.replace(means=self.means @ R.T, covariances=cov)

    def translated(self, t) -> Mixture:
        return self.replace(means=self.means + np.asarray(t, dtype=float))


def _raw_sum(m: Mixture, r: np.ndarray) -> np.ndarray:
    out = np.zeros(r.shape[:-1])
    for w, mu, prec, ln in zip(m.weights, m.means, m.precisions, m.log_norms):
        d = r - mu
        q = np.einsum("...i,ij,...j->...", d, prec, d)
        out += w * np.exp(ln - 0.5 * q)
    return out


def eval_point(m: Mixture, r) -> np.ndarray | float:
    """Density of the mixture at point(s) ``r``."""
    r = np.asarray(r, dtype=float)
    raw = _raw_sum(m, r)
    if m.clamp_negative:
        raw = np.maximum(raw, 0.0)
    out = m.scale * raw
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid: lattice rows ``cell``, point ``(i, j, k)`` at
    ``origin + ((i + offset)/n1, (j + offset)/n2, (k + offset)/n3) @ cell``.

    ``offset=0`` is VASP corner sampling, ``offset=0.5`` samples voxel centers.
    """

    cell: np.ndarray
    shape: tuple[int, int, int]
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset: float = 0.0

    def __post_init__(self):
        cell = np.asarray(self.cell, dtype=float).reshape(3, 3)
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"grid shape must be three positive integers, got {self.shape}")
        det = np.linalg.det(cell)
        if not np.isfinite(det) or abs(det) < 1e-12 * max(1.0, np.abs(cell).max() ** 3):
            raise ValueError("grid cell is singular")
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def cube(cls, length: float, n: int, **kw) -> GridSpec:
        return cls(np.eye(3) * length, (n, n, n), **kw)

    @property
    def steps(self) -> np.ndarray:
        """Displacement between neighboring points along each lattice index (rows)."""
        return self.cell / np.array(self.shape)[:, None]

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.cell)))

    @property
    def voxel_volume(self) -> float:
        return self.volume / self.n_points

    def points(self) -> np.ndarray:
        """Cartesian coordinates with shape ``(n1, n2, n3, 3)``."""
        idx = [np.arange(n) + self.offset for n in self.shape]
        f = np.stack(np.meshgrid(*idx, indexing="ij"), axis=-1)
        return self.origin + f @ self.steps

    def same_as(self, other: GridSpec, tol: float = 1e-9) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.cell, other.cell, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and abs(self.offset - other.offset) < tol
        )

    def rotated(self, R) -> GridSpec:
        R = np.asarray(R, dtype=float)
        return replace(self, cell=self.cell @ R.T, origin=R @ self.origin)


@dataclass(frozen=True)
class DensityGrid:
    spec: GridSpec
    values: np.ndarray  # (n1, n2, n3), electrons / A^3

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise ValueError(f"values have shape {values.shape}, grid is {self.spec.shape}")
        if not np.isfinite(values).all():
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.spec.shape

    @property
    def cell(self):
        return self.spec.cell

    @property
    def origin(self):
        return self.spec.origin


def _boxes(means, covariances, spec: GridSpec, threshold: float) -> np.ndarray:
    """Index ranges ``[i0, i1, j0, j1, k0, k1]`` of each Gaussian's pruning ellipsoid."""
    inv = np.linalg.inv(spec.cell)  # fractional f = (r - origin) @ inv
    center = (means - spec.origin) @ inv
    # half-width of f_a over {d : d^T P d <= T} is sqrt(T * b_a^T Sigma b_a)
    half = np.sqrt(threshold * np.einsum("ia,gij,ja->ga", inv, covariances, inv))
    n = np.array(spec.shape)
    lo = np.ceil((center - half) * n - spec.offset - 1e-9).astype(np.int64)
    hi = np.floor((center + half) * n - spec.offset + 1e-9).astype(np.int64)
    lo = np.clip(lo, 0, n - 1)
    hi = np.clip(hi, -1, n - 1)
    boxes = np.empty((len(means), 6), dtype=np.int64)
    boxes[:, 0::2] = lo
    boxes[:, 1::2] = hi
    # clipped boxes that lie entirely outside the grid become empty
    outside = ((center + half) * n - spec.offset < 0) | ((center - half) * n - spec.offset > n - 1)
    boxes[outside.any(axis=1)] = (0, -1, 0, -1, 0, -1)
    return boxes


def _run_planes(fn, n_planes: int, threads: int, *args) -> None:
    chunks = _kernels.plane_chunks(n_planes, threads)
    if len(chunks) == 1:
        fn(0, n_planes, *args)
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for fut in [pool.submit(fn, a, b, *args) for a, b in chunks]:
            fut.result()


def raw_sum_grid(
    weights, means, covariances, precisions, log_norms, spec: GridSpec, threshold: float,
    threads: int = 1,
) -> np.ndarray:
    """Pruned ``sum_j w_j N_j`` on the grid, as a C array indexed ``[k, j, i]``."""
    n1, n2, n3 = spec.shape
    out = np.zeros((n3, n2, n1))
    if len(weights) == 0:
        return out
    _run_planes(
        _kernels.raster_planes,
        n3,
        threads,
        spec.origin,
        np.ascontiguousarray(spec.steps),
        spec.offset,
        np.ascontiguousarray(means, dtype=float),
        np.ascontiguousarray(precisions, dtype=float),
        np.asarray(weights, dtype=float) * np.exp(log_norms),
        _boxes(means, covariances, spec, threshold),
        float(threshold),
        out,
    )
    return out


def rasterize(
    m: Mixture, spec: GridSpec, prune_threshold: float = DEFAULT_PRUNE, threads: int = 1
) -> DensityGrid:
    """Evaluate the mixture at every grid point, skipping Gaussians beyond
    ``prune_threshold`` squared Mahalanobis distance."""
    if prune_threshold < 0:
        raise ValueError("prune_threshold must be non-negative")
    raw = raw_sum_grid(
        m.weights, m.means, m.covariances, m.precisions, m.log_norms, spec,
        prune_threshold, threads,
    ).transpose(2, 1, 0)
    if m.clamp_negative:
        raw = np.maximum(raw, 0.0)
    return DensityGrid(spec, m.scale * raw)


def integrate(grid: DensityGrid) -> float:
    """Riemann sum of ``|rho| dV`` in electrons."""
    return float(np.abs(grid.values).sum() * grid.spec.voxel_volume)


def normalize(
    m: Mixture,
    spec: GridSpec,
    n_elec: float,
    prune_threshold: float = DEFAULT_PRUNE,
    threads: int = 1,
) -> Mixture:
    """Rescale so that the rasterized mixture integrates to ``n_elec``.

    The clamp (if enabled) is applied before the integral is taken.
    """
    total = integrate(rasterize(m, spec, prune_threshold, threads))
    if not total > 0:
        raise ValueError("cannot normalize a mixture whose grid integral is zero")
    return m.replace(scale=m.scale * n_elec / total)


def normalize_then_clamp(
    m: Mixture,
    spec: GridSpec,
    n_elec: float,
    prune_threshold: float = DEFAULT_PRUNE,
    threads: int = 1,
) -> DensityGrid:
    """Alternative ordering: scale the unclamped sum to ``n_elec`` and clamp afterwards.

    Returns the grid, since the result is no longer a plain rescaled mixture.
    """
    raw = rasterize(m.replace(clamp_negative=False), spec, prune_threshold, threads)
    total = integrate(raw)
    if not total > 0:
        raise ValueError("cannot normalize a mixture whose grid integral is zero")
    return DensityGrid(spec, np.maximum(raw.values * (n_elec / total), 0.0))


class GridMismatchError(ValueError):
    pass


def nmae(pred: DensityGrid, ref: DensityGrid, n_elec: float | None = None) -> float:
    """Normalized mean absolute error in percent.

    The denominator is ``sum |ref|`` unless ``n_elec`` is given, in which case
    the reference integral is replaced by ``n_elec``.
    """
    if not pred.spec.same_as(ref.spec):
        raise GridMismatchError("prediction and reference live on different grids")
    num = np.abs(ref.values - pred.values).sum()
    if n_elec is None:
        den = np.abs(ref.values).sum()
    else:
        den = n_elec / ref.spec.voxel_volume
    if not den > 0:
        raise ZeroDivisionError("NMAE denominator is zero")
    return float(100.0 * num / den)
