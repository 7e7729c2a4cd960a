"""Direct gradient-descent fit of an unconstrained Gaussian mixture to a density grid.

Each Gaussian has 10 free parameters ``[w, mu_x, mu_y, mu_z, l00, l10, l11,
l20, l21, l22]`` where the ``l`` entries are a lower-triangular factor whose
diagonal passes through a softplus, so ``Sigma = L L^T`` is always SPD.

The loss is the NMAE of the normalized prediction against the reference,
with the reference integral replaced by the electron count::

    rho_pred = c * g(sum_j w_j N_j),   c = n_elec / (dV * sum |g(...)|)
    loss     = dV * sum |rho_ref - rho_pred| / n_elec

where ``g`` is the ReLU clamp or the identity.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _kernels
from .geometry import Molecule
from .mixture import (
    DEFAULT_PRUNE,
    LOG_2PI,
    DensityGrid,
    Mixture,
    _boxes,
    _run_planes,
    raw_sum_grid,
)

log = logging.getLogger(__name__)

N_PER_GAUSSIAN = 10
RESIDUAL_TOL = 1e-13  # relative to the reference peak
_TRIL = np.tril_indices(3)  # row-major: (0,0) (1,0) (1,1) (2,0) (2,1) (2,2)
_DIAG = np.array([0, 2, 5])
# (a, b) pairs of the packed y y^T moments written by the kernel
_SYM = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class NonFiniteLossError(FloatingPointError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1000
    lr: float = 3.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0  # multiplicative per step
    seed: int = 0
    displacement: float = 0.2  # A, std of the initial mean offsets
    sigma0: float = 0.4  # A, initial isotropic width
    m_e: int = 4  # Gaussians per valence electron
    clamp_negative: bool = True
    denominator: str = "nelec"  # or "grid"
    prune_threshold: float = DEFAULT_PRUNE
    log_every: int = 100
    target_loss: float | None = None  # stop early once reached

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.denominator not in ("nelec", "grid"):
            raise ValueError(f"unknown denominator mode {self.denominator!r}")


@dataclass
class FitParams:
    w: np.ndarray  # (K,)
    mu: np.ndarray  # (K, 3)
    lower: np.ndarray  # (K, 6), diagonal entries stored before the softplus

    def __len__(self) -> int:
        return len(self.w)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w[:, None], self.mu, self.lower], axis=1).reshape(-1)

    @classmethod
    def from_vector(cls, theta) -> FitParams:
        t = np.asarray(theta, dtype=float).reshape(-1, N_PER_GAUSSIAN)
        return cls(t[:, 0].copy(), t[:, 1:4].copy(), t[:, 4:].copy())

    @property
    def factors(self) -> np.ndarray:
        """Lower-triangular ``L`` with softplus-mapped diagonal, shape ``(K, 3, 3)``."""
        vals = self.lower.copy()
        vals[:, _DIAG] = softplus(vals[:, _DIAG])
        L = np.zeros((len(self), 3, 3))
        L[:, _TRIL[0], _TRIL[1]] = vals
        return L

    @property
    def covariances(self) -> np.ndarray:
        L = self.factors
        return L @ np.swapaxes(L, 1, 2)

    @classmethod
    def from_mixture(cls, m: Mixture) -> FitParams:
        L = np.linalg.cholesky(m.covariances)
        lower = L[:, _TRIL[0], _TRIL[1]]
        lower[:, _DIAG] = softplus_inv(lower[:, _DIAG])
        return cls(m.weights * m.scale, m.means.copy(), lower)

    def to_mixture(self, scale: float = 1.0, clamp_negative: bool = True) -> Mixture:
        return Mixture(self.w, self.mu, self.covariances, scale=scale, clamp_negative=clamp_negative)


@dataclass
class FitReport:
    history: list[tuple[int, float]] = field(default_factory=list)
    final_nmae: float = float("nan")  # percent, best loss seen
    wall_time: float = 0.0
    steps: int = 0
    best_step: int = 0

    def log_lines(self) -> list[str]:
        return [f"step {s} loss {l:.10e}" for s, l in self.history]

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "best_step": self.best_step,
            "final_nmae": self.final_nmae,
            "wall_time": self.wall_time,
        }


def gaussian_counts(mol: Molecule, m_e: int) -> np.ndarray:
    return mol.valence_counts * int(m_e)


def _split_total(mol: Molecule, total: int) -> np.ndarray:
    # largest-remainder split proportional to valence electrons
    share = mol.valence_counts / mol.valence_counts.sum() * total
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def init_fit(mol: Molecule, k_per_atom=None, config: FitConfig = FitConfig()) -> FitParams:
    """Gaussians start on their atoms plus a seeded random offset, with equal weights.

    ``k_per_atom`` is a per-atom count sequence, a total count to spread over
    atoms in proportion to their valence electrons, or ``None`` for
    ``n_e(A) * m_e`` per atom.
    """
    if k_per_atom is None:
        counts = gaussian_counts(mol, config.m_e)
    elif np.ndim(k_per_atom) == 0:
        counts = _split_total(mol, int(k_per_atom))
    else:
        counts = np.asarray(k_per_atom, dtype=int)
        if len(counts) != len(mol) or (counts < 0).any():
            raise ValueError("k_per_atom needs one non-negative count per atom")
    k = int(counts.sum())
    if k == 0:
        raise ValueError("cannot fit a mixture with zero Gaussians")
    rng = np.random.default_rng(config.seed)
    centers = np.repeat(mol.positions, counts, axis=0)
    mu = centers + config.displacement * rng.standard_normal((k, 3))
    lower = np.zeros((k, 6))
    lower[:, _DIAG] = softplus_inv(config.sigma0)
    w = np.full(k, mol.n_valence / k)
    return FitParams(w, mu, lower)


def _precision_and_lognorm(L: np.ndarray):
    Linv = np.linalg.inv(L)
    P = np.swapaxes(Linv, 1, 2) @ Linv
    P = 0.5 * (P + np.swapaxes(P, 1, 2))
    log_norm = -1.5 * LOG_2PI - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(-1)
    return P, log_norm


def loss_and_grad(
    p: FitParams,
    ref: DensityGrid,
    config: FitConfig = FitConfig(),
    n_elec: float | None = None,
    threads: int = 1,
    with_grad: bool = True,
):
    """NMAE loss (as a fraction) and its analytic gradient over ``p.to_vector()``.

    Subgradients of ``|.|`` and of the ReLU are taken as zero at the kink.
    """
    spec = ref.spec
    dV = spec.voxel_volume
    if n_elec is None:
        n_elec = float(np.abs(ref.values).sum() * dV)
    ref_c = np.ascontiguousarray(ref.values.transpose(2, 1, 0))
    denom = n_elec if config.denominator == "nelec" else float(np.abs(ref_c).sum() * dV)

    L = p.factors
    cov = L @ np.swapaxes(L, 1, 2)
    P, log_norm = _precision_and_lognorm(L)
    raw = raw_sum_grid(p.w, p.mu, cov, P, log_norm, spec, config.prune_threshold, threads)
    a = np.maximum(raw, 0.0) if config.clamp_negative else raw
    total = np.abs(a).sum()
    if not (np.isfinite(total) and total > 0):
        raise NonFiniteLossError(
            f"predicted density sums to {total!r}; cannot normalize (check widths and weights)"
        )
    c = n_elec / (dV * total)
    res = ref_c - c * a
    loss = float(np.abs(res).sum() * dV / denom)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss!r}; parameters: {np.abs(p.to_vector()).max():.3e} max")
    if not with_grad:
        return loss, c
    s = np.sign(res)
    # residuals at rounding level count as exact matches (the |.| kink)
    s[np.abs(res) <= RESIDUAL_TOL * np.abs(ref_c).max()] = 0.0
    # d loss / d a_u through both the residual and the normalization constant
    G = (dV / denom) * c * (-s + np.sign(a) * (s * a).sum() / total)
    if config.clamp_negative:
        G = G * (raw > 0)

    n3 = spec.shape[2]
    k = len(p)
    partial = np.zeros((n3, k, N_PER_GAUSSIAN))
    _run_planes(
        _kernels.moment_planes,
        n3,
        threads,
        spec.origin,
        np.ascontiguousarray(spec.steps),
        spec.offset,
        np.ascontiguousarray(p.mu),
        np.ascontiguousarray(P),
        np.exp(log_norm),
        _boxes(p.mu, cov, spec, config.prune_threshold),
        float(config.prune_threshold),
        G,
        partial,
    )
    mom = partial.sum(axis=0)

    grad = np.zeros((k, N_PER_GAUSSIAN))
    grad[:, 0] = mom[:, 0]
    grad[:, 1:4] = p.w[:, None] * mom[:, 1:4]
    yy = np.zeros((k, 3, 3))
    for slot, (i, j) in enumerate(_SYM):
        yy[:, i, j] = yy[:, j, i] = mom[:, 4 + slot]
    g_cov = 0.5 * p.w[:, None, None] * (yy - mom[:, 0, None, None] * P)
    g_L = 2.0 * g_cov @ L
    g_low = g_L[:, _TRIL[0], _TRIL[1]]
    g_low[:, _DIAG] *= expit(p.lower[:, _DIAG])
    grad[:, 4:] = g_low
    return loss, grad.reshape(-1)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, config: FitConfig, lr: float | None = None):
    """One bias-corrected Adam update; returns new parameters and state."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    lr = config.lr if lr is None else lr
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return theta, AdamState(m, v, t)


def fit(
    mol: Molecule,
    ref: DensityGrid,
    config: FitConfig = FitConfig(),
    k_per_atom=None,
    init: FitParams | None = None,
    threads: int = 1,
) -> tuple[Mixture, FitReport]:
    """Fit a mixture to ``ref``; returns the lowest-loss mixture seen and a report.

    The returned mixture carries the normalization constant as its ``scale``,
    so rasterizing it on ``ref``'s grid reproduces the fitted prediction.
    """
    start = time.perf_counter()
    n_elec = float(mol.n_valence)
    p = init if init is not None else init_fit(mol, k_per_atom, config)
    theta = p.to_vector()
    state = AdamState.zeros(theta.size)
    report = FitReport()
    best_loss, best_theta, best_step = np.inf, theta, 0
    lr = config.lr

    for step in range(config.steps + 1):
        cur = FitParams.from_vector(theta)
        last = step == config.steps
        loss, grad = loss_and_grad(cur, ref, config, n_elec, threads, with_grad=not last)
        if loss < best_loss:
            best_loss, best_theta, best_step = loss, theta, step
        if step % config.log_every == 0 or step == config.steps:
            report.history.append((step, loss))
            log.info("step %d loss %.6e", step, loss)
        if last or (config.target_loss is not None and loss <= config.target_loss):
            report.steps = step
            break
        theta, state = adam_step(theta, grad, state, config, lr)
        lr *= config.lr_decay

    bp = FitParams.from_vector(best_theta)
    _, scale = loss_and_grad(bp, ref, config, n_elec, threads, with_grad=False)
    report.final_nmae = 100.0 * best_loss
    report.best_step = best_step
    report.wall_time = time.perf_counter() - start
    if report.history[-1][0] != report.steps:
        report.history.append((report.steps, loss))
    return bp.to_mixture(scale=scale, clamp_negative=config.clamp_negative), report
