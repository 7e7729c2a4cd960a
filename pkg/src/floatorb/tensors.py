"""Cartesian tensor features up to rank 2 and small dense building blocks."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class TensorFeatures:
    """Per-atom features: scalars ``s[A, D]``, vectors ``v[A, D, 3]``, matrices ``M[A, D, 3, 3]``."""

    s: np.ndarray
    v: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        a, d = self.s.shape
        if self.v.shape != (a, d, 3) or self.M.shape != (a, d, 3, 3):
            raise ValueError(
                f"inconsistent feature shapes {self.s.shape}, {self.v.shape}, {self.M.shape}"
            )

    @classmethod
    def zeros(cls, n_atoms: int, width: int) -> TensorFeatures:
        return cls(
            np.zeros((n_atoms, width)),
            np.zeros((n_atoms, width, 3)),
            np.zeros((n_atoms, width, 3, 3)),
        )

    @property
    def n_atoms(self) -> int:
        return self.s.shape[0]

    @property
    def width(self) -> int:
        return self.s.shape[1]

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.s).all() and np.isfinite(self.v).all() and np.isfinite(self.M).all()
        )

    def replace(self, **kw) -> TensorFeatures:
        return replace(self, **kw)


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"matrix is not orthogonal (max |R R^T - I| = {err:.3e})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ValueError(f"matrix is not a proper rotation (det = {det:.12f})")
    return R


def rotate_features(f: TensorFeatures, R) -> TensorFeatures:
    R = check_rotation(R)
    return TensorFeatures(
        f.s.copy(),
        f.v @ R.T,
        np.einsum("ij,adjk,lk->adil", R, f.M, R),
    )


def reflect_features(f: TensorFeatures, P) -> TensorFeatures:
    """Apply an orthogonal matrix (possibly improper) as a polar-tensor action."""
    P = np.asarray(P, dtype=float)
    return TensorFeatures(f.s.copy(), f.v @ P.T, np.einsum("ij,adjk,lk->adil", P, f.M, P))


def shifted_softplus(x):
    return np.logaddexp(0.0, x) - np.log(2.0)


ACTIVATIONS = {
    "softplus": shifted_softplus,
    "identity": lambda x: x,
    "sigmoid": expit,
}


@dataclass(frozen=True)
class DenseBlock:
    """Feed-forward stack; ``activation`` between layers, ``output`` after the last one."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "softplus"
    output: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} does not match bias {b.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k} input {w.shape[0]} does not chain")
        for tag in (self.activation, self.output):
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation="softplus", output="identity"):
        """Uniform(-a, a) weights and biases with ``a = 1/sqrt(fan_in)``."""
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            a = 1.0 / np.sqrt(n_in)
            ws.append(rng.uniform(-a, a, size=(n_in, n_out)))
            bs.append(rng.uniform(-a, a, size=n_out))
        return cls(tuple(ws), tuple(bs), activation, output)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]


def dense_forward(block: DenseBlock, x) -> np.ndarray:
    """Apply ``block`` along the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != block.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, block expects {block.n_in}")
    act = ACTIVATIONS[block.activation]
    last = len(block.weights) - 1
    for k, (w, b) in enumerate(zip(block.weights, block.biases)):
        x = x @ w + b
        x = ACTIVATIONS[block.output](x) if k == last else act(x)
    return x


@dataclass(frozen=True)
class RadialBasis:
    """Gaussian bumps on ``[0, cutoff]`` times a cosine cutoff envelope."""

    n_basis: int = 16
    cutoff: float = 8.0

    def __post_init__(self):
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.cutoff, self.n_basis)

    @property
    def width(self) -> float:
        return self.cutoff / self.n_basis


def cosine_envelope(d, cutoff: float):
    d = np.asarray(d, dtype=float)
    return np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


def radial_basis_eval(rb: RadialBasis, d) -> np.ndarray:
    """Basis values with shape ``d.shape + (n_basis,)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    bumps = np.exp(-((d[..., None] - rb.centers) ** 2) / (2.0 * rb.width**2))
    return bumps * cosine_envelope(d, rb.cutoff)[..., None]
