"""Toy-scale equivariant network that turns a molecule into a Gaussian mixture.

Pipeline: descriptor embedding -> inertia-frame initialization of the
vector channels -> Cartesian message passing (ranks 0, 1, 2), each layer
followed by a debiasing step -> three readout heads -> per-atom Gaussians.

Only polar operations are used (no cross products), so without the
symmetry-breaking frames the network is equivariant under the full O(3);
the frames are what lets outputs leave local mirror planes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from . import elements
from .geometry import (
    DEFAULT_CUTOFF,
    Molecule,
    NeighborGraph,
    build_neighbor_graph,
    symmetry_breaking_frame,
)
from .mixture import Mixture
from .tensors import (
    DenseBlock,
    RadialBasis,
    TensorFeatures,
    dense_forward,
    radial_basis_eval,
)

N_GATES = 7
JITTER = 1e-8
DEBIAS_EPS = 1e-12
ZERO_VECTOR_TOL = 1e-10  # relative to the largest vector feature
DEGENERACY_TOL = 1e-8  # relative gap below which leading eigenvalues tie
FILTER_GAIN = 1.0


@dataclass(frozen=True)
class NetworkConfig:
    m_e: int = 4
    n_layers: int = 2
    cutoff: float = DEFAULT_CUTOFF
    n_basis: int = 16
    symmetry_breaking: bool = True
    debias: bool = True
    floating: bool = True
    raw_projection: bool = False  # debias with (v . u) u instead of (v_hat . u) u
    jitter: float = JITTER
    debias_eps: float = DEBIAS_EPS

    @property
    def width(self) -> int:
        return 8 * self.m_e


@dataclass(frozen=True)
class LayerParams:
    filters: np.ndarray  # (n_basis, N_GATES, D)
    scalar_update: DenseBlock  # [s, m_s] -> ds
    vector_mix: np.ndarray  # (D, D)
    matrix_mix: np.ndarray  # (D, D)
    gate: DenseBlock  # s -> w in [0, 1]^D


@dataclass(frozen=True)
class HeadParams:
    scalar: DenseBlock  # s -> per-channel scalar
    vector_mix: np.ndarray  # (D, D)
    matrix_mix: np.ndarray  # (D, D)
    outer_mix: np.ndarray  # (D, D), acts on v v^T
    iso: np.ndarray  # (D, D), scalars -> multiples of I


@dataclass(frozen=True)
class NetworkParams:
    config: NetworkConfig
    embedding: DenseBlock
    layers: tuple[LayerParams, ...]
    heads: tuple[HeadParams, HeadParams, HeadParams]
    mlp_p: DenseBlock
    mlp_m: DenseBlock
    mlp_w: DenseBlock
    seed: int = 0

    @property
    def width(self) -> int:
        return self.config.width


def _mix(rng, d):
    a = 1.0 / np.sqrt(d)
    return rng.uniform(-a, a, size=(d, d))


def init_params(seed: int = 0, config: NetworkConfig = NetworkConfig()) -> NetworkParams:
    """Deterministic parameters from ``seed``.

    Dense weights are uniform with ``a = 1/sqrt(fan_in)``. Radial filters use
    unit gain (``a = 1``): the basis values are already O(1) and a fan-in
    rule leaves messages an order of magnitude below the unit frame vectors.
    """
    rng = np.random.default_rng(seed)
    d = config.width
    embedding = DenseBlock.init([elements.DESCRIPTOR_SIZE, d, d], rng)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                filters=rng.uniform(-FILTER_GAIN, FILTER_GAIN, size=(config.n_basis, N_GATES, d)),
                scalar_update=DenseBlock.init([2 * d, d, d], rng),
                vector_mix=_mix(rng, d),
                matrix_mix=_mix(rng, d),
                gate=DenseBlock.init([d, d, d], rng, output="sigmoid"),
            )
        )
    heads = tuple(
        HeadParams(
            scalar=DenseBlock.init([d, d, d], rng),
            vector_mix=_mix(rng, d),
            matrix_mix=_mix(rng, d),
            outer_mix=_mix(rng, d),
            iso=_mix(rng, d),
        )
        for _ in range(3)
    )
    return NetworkParams(
        config=config,
        embedding=embedding,
        layers=tuple(layers),
        heads=heads,
        mlp_p=DenseBlock.init([d + 3, d, 3], rng),
        mlp_m=DenseBlock.init([d + 3, d, 3], rng),
        mlp_w=DenseBlock.init([d + 3, d, 1], rng),
        seed=seed,
    )


def atomic_embedding(z: int, params: NetworkParams) -> np.ndarray:
    return dense_forward(params.embedding, elements.descriptor(z))


def init_features(mol: Molecule, graph: NeighborGraph, params: NetworkParams, frames=None):
    """Scalars from the embedding; vector channels 0-2 hold the inertia frame."""
    f = TensorFeatures.zeros(len(mol), params.width)
    s = np.stack([atomic_embedding(z, params) for z in mol.numbers])
    v = f.v
    if params.config.symmetry_breaking:
        if frames is None:
            frames = [symmetry_breaking_frame(mol, graph, a) for a in range(len(mol))]
        v[:, :3] = np.stack([fr.vectors for fr in frames])
    return f.replace(s=s, v=v)


def _sym(x):
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def message_pass(
    f: TensorFeatures, graph: NeighborGraph, layer: LayerParams, rb: RadialBasis
) -> TensorFeatures:
    """One Cartesian message-passing update (messages flow ``j -> i`` along ``r_ij``)."""
    d = f.width
    m_s = np.zeros_like(f.s)
    m_v = np.zeros_like(f.v)
    m_M = np.zeros_like(f.M)
    if len(graph):
        i, j = graph.senders, graph.receivers
        u = graph.vectors / graph.distances[:, None]
        gates = np.einsum("eb,bgd->egd", radial_basis_eval(rb, graph.distances), layer.filters)
        sj, vj, Mj = f.s[j], f.v[j], f.M[j]
        vu = np.einsum("edk,ek->ed", vj, u)
        uu = np.einsum("ek,el->ekl", u, u) - np.eye(3) / 3.0
        vu_outer = _sym(np.einsum("edk,el->edkl", vj, u))

        e_s = gates[:, 0] * sj + gates[:, 1] * vu
        e_v = (gates[:, 2] * sj)[..., None] * u[:, None, :] + gates[:, 3, :, None] * vj
        e_M = (
            (gates[:, 4] * sj)[..., None, None] * uu[:, None]
            + gates[:, 5, :, None, None] * vu_outer
            + gates[:, 6, :, None, None] * Mj
        )
        np.add.at(m_s, i, e_s)
        np.add.at(m_v, i, e_v)
        np.add.at(m_M, i, e_M)

    s = f.s + dense_forward(layer.scalar_update, np.concatenate([f.s, m_s], axis=1))
    v = f.v + np.einsum("adk,dc->ack", m_v, layer.vector_mix)
    M = f.M + np.einsum("adkl,dc->ackl", m_M, layer.matrix_mix)
    return TensorFeatures(s, v, M)


def _principal_projector(C: np.ndarray) -> np.ndarray:
    """Projector onto the top eigenspace of each ``C``; tied leading eigenvalues share it.

    A single leading eigenvalue gives ``u u^T``. When site symmetry makes the leading
    eigenvalue degenerate, any one eigenvector would be an arbitrary pick, so the
    whole tied eigenspace is used instead, which keeps the map equivariant.
    """
    val, vec = np.linalg.eigh(C)
    top = val[..., -1:]
    tied = val >= top - DEGENERACY_TOL * np.abs(top)
    return np.einsum("...ki,...i,...li->...kl", vec, tied.astype(float), vec)


def vector_covariance(v: np.ndarray) -> np.ndarray:
    """``C_A = (1/D) sum_j v_Aj v_Aj^T`` for ``v`` of shape ``(A, D, 3)``."""
    return np.einsum("adk,adl->akl", v, v) / v.shape[1]


def debias(
    f: TensorFeatures,
    gate: DenseBlock | None = None,
    *,
    weights: np.ndarray | None = None,
    raw_projection: bool = False,
    eps: float = DEBIAS_EPS,
) -> TensorFeatures:
    """Remove a gated share of each atom's principal vector direction and renormalize.

    ``weights`` (shape ``(A, D)``) overrides the gate network.
    """
    if f.width < 2:
        raise ValueError("debiasing needs at least two channels")
    v = f.v
    # vectors that vanish by symmetry survive only as rounding noise; zero them so
    # the normalization below cannot blow the noise up to unit length
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(norm > ZERO_VECTOR_TOL * norm.max(initial=0.0), v, 0.0)
    P = _principal_projector(vector_covariance(v))  # (A, 3, 3)
    if raw_projection:
        src = v
    else:
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        src = np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)
    par = np.einsum("akl,adl->adk", P, src)
    w = dense_forward(gate, f.s) if weights is None else np.asarray(weights, dtype=float)
    out = v - w[..., None] * par
    out = out / (np.linalg.norm(out, axis=-1, keepdims=True) + eps)
    return f.replace(v=out)


def bias_metric(f: TensorFeatures, atom_index: int) -> float:
    """Share of the vector-feature variance along the principal axis, in ``[1/3, 1]``."""
    C = vector_covariance(f.v[atom_index : atom_index + 1])[0]
    tr = np.trace(C)
    if not tr > 0:
        raise ValueError(f"atom {atom_index} has only zero vector features")
    return float(np.linalg.eigvalsh(C)[-1] / tr)


@dataclass(frozen=True)
class ReadoutTriple:
    """Head outputs for every atom and channel, plus the per-atom channel budget."""

    s: np.ndarray  # (3, A, D)
    v: np.ndarray  # (3, A, D, 3)
    M: np.ndarray  # (3, A, D, 3, 3)
    s_p: np.ndarray  # (A, D, 3)
    s_m: np.ndarray  # (A, D, 3)
    w: np.ndarray  # (A, D)
    counts: np.ndarray  # (A,) channels used per atom

    def mask(self) -> np.ndarray:
        d = self.w.shape[1]
        return np.arange(d)[None, :] < self.counts[:, None]


def channel_counts(mol: Molecule, m_e: int) -> np.ndarray:
    return mol.valence_counts * int(m_e)


def readout(
    f: TensorFeatures, embeddings: np.ndarray, params: NetworkParams, mol: Molecule
) -> ReadoutTriple:
    counts = channel_counts(mol, params.config.m_e)
    if counts.max() > f.width:
        raise ValueError(f"an atom needs {counts.max()} channels, width is {f.width}")
    s_out, v_out, M_out = [], [], []
    outer = np.einsum("adk,adl->adkl", f.v, f.v)
    for head in params.heads:
        s_out.append(dense_forward(head.scalar, f.s))
        v_out.append(np.einsum("adk,dc->ack", f.v, head.vector_mix))
        iso = (f.s @ head.iso)[..., None, None] * np.eye(3)
        M_out.append(
            np.einsum("adkl,dc->ackl", f.M, head.matrix_mix)
            + np.einsum("adkl,dc->ackl", outer, head.outer_mix)
            + iso
        )
    s = np.stack(s_out)
    a, d = f.s.shape
    s_inp = np.concatenate(
        [np.broadcast_to(embeddings[:, None, :], (a, d, d)), np.moveaxis(s, 0, -1)], axis=-1
    )
    return ReadoutTriple(
        s=s,
        v=np.stack(v_out),
        M=np.stack(M_out),
        s_p=dense_forward(params.mlp_p, s_inp),
        s_m=dense_forward(params.mlp_m, s_inp),
        w=dense_forward(params.mlp_w, s_inp)[..., 0],
        counts=counts,
    )


def build_gaussians(
    r: ReadoutTriple,
    mol: Molecule,
    jitter: float = JITTER,
    floating: bool = True,
    clamp_negative: bool = True,
) -> tuple[Mixture, np.ndarray]:
    """Gaussians of the used channels, atom by atom; also returns each one's atom index."""
    mask = r.mask()
    atom_idx, chan_idx = np.nonzero(mask)
    sp = r.s_p[atom_idx, chan_idx]
    v1, v2, v3 = (r.v[h, atom_idx, chan_idx] for h in range(3))
    mu = mol.positions[atom_idx].copy()
    if floating:
        mu = mu + np.exp(sp[:, :1]) * v1 + sp[:, 1:2] ** 2 * v2 + sp[:, 2:3] * v3

    s_g = softmax(r.s_m[atom_idx, chan_idx], axis=-1)
    cov = np.zeros((len(atom_idx), 3, 3))
    for h in range(3):
        Mh = r.M[h, atom_idx, chan_idx]
        fro = np.linalg.norm(Mh, axis=(1, 2))
        gram = _sym(Mh @ np.swapaxes(Mh, 1, 2))
        safe = np.where(fro > 0, fro, 1.0)
        cov += np.where(fro > 0, s_g[:, h], 0.0)[:, None, None] * gram / safe[:, None, None]
    cov += jitter * np.eye(3)
    mix = Mixture(r.w[atom_idx, chan_idx], mu, cov, clamp_negative=clamp_negative)
    return mix, atom_idx


@dataclass
class ForwardResult:
    mixture: Mixture
    owners: np.ndarray  # atom index of each Gaussian
    features: TensorFeatures
    initial: TensorFeatures
    readout: ReadoutTriple
    frames: list = field(default_factory=list)

    @property
    def ties(self) -> list[int]:
        return [a for a, fr in enumerate(self.frames) if fr.tie]


def forward(mol: Molecule, params: NetworkParams, clamp_negative: bool = True) -> ForwardResult:
    cfg = params.config
    graph = build_neighbor_graph(mol, cfg.cutoff)
    rb = RadialBasis(cfg.n_basis, cfg.cutoff)
    frames = [symmetry_breaking_frame(mol, graph, a) for a in range(len(mol))]
    f0 = init_features(mol, graph, params, frames)
    f = f0
    for layer in params.layers:
        f = message_pass(f, graph, layer, rb)
        if cfg.debias:
            f = debias(f, layer.gate, raw_projection=cfg.raw_projection, eps=cfg.debias_eps)
    r = readout(f, f0.s, params, mol)
    mix, owners = build_gaussians(
        r, mol, cfg.jitter, floating=cfg.floating, clamp_negative=clamp_negative
    )
    return ForwardResult(mix, owners, f, f0, r, frames if cfg.symmetry_breaking else [])
