"""Molecules, cutoff neighbor graphs and per-atom moment-of-inertia frames.

The symmetry-breaking frame of an atom is the eigenbasis of the inertia
tensor of its cutoff neighborhood, ordered from largest to smallest
eigenvalue, with each eigenvector's sign fixed so that it points towards
the molecular center of mass. Frames rotate with the molecule, so vectors
built from them keep the whole pipeline rotation equivariant while breaking
local reflection symmetries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import elements

DEFAULT_CUTOFF = 8.0

# relative eigenvalue gap below which eigenvectors are treated as degenerate
DEGENERACY_TOL = 1e-8
# relative |v . r_com| below which the sign convention is a tie
TIE_TOL = 1e-10


@dataclass(frozen=True)
class Molecule:
    numbers: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None

    def __post_init__(self):
        numbers = np.asarray(self.numbers, dtype=int).reshape(-1)
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(numbers) == 0:
            raise ValueError("a molecule needs at least one atom")
        if len(numbers) != len(positions):
            raise ValueError(
                f"{len(numbers)} atomic numbers but {len(positions)} positions"
            )
        if not np.all(np.isfinite(positions)):
            raise ValueError("atomic positions must be finite")
        for z in numbers:
            elements.check_supported(z)
        numbers.setflags(write=False)
        positions.setflags(write=False)
        object.__setattr__(self, "numbers", numbers)
        object.__setattr__(self, "positions", positions)
        if self.cell is not None:
            cell = np.array(self.cell, dtype=float).reshape(3, 3)
            cell.setflags(write=False)
            object.__setattr__(self, "cell", cell)

    def __len__(self) -> int:
        return len(self.numbers)

    @classmethod
    def from_symbols(cls, symbols, positions, cell=None) -> Molecule:
        return cls([elements.atomic_number(s) for s in symbols], positions, cell)

    @property
    def symbols(self) -> list[str]:
        return [elements.SYMBOLS[z] for z in self.numbers]

    @property
    def masses(self) -> np.ndarray:
        return np.array([elements.MASSES[z] for z in self.numbers])

    @property
    def center_of_mass(self) -> np.ndarray:
        m = self.masses
        return m @ self.positions / m.sum()

    @property
    def valence_counts(self) -> np.ndarray:
        return np.array([elements.valence_electrons(z) for z in self.numbers])

    @property
    def n_valence(self) -> int:
        return int(self.valence_counts.sum())

    def transformed(self, rotation=None, translation=None) -> Molecule:
        """Copy with positions mapped to ``R @ r + t``."""
        pos = self.positions
        if rotation is not None:
            pos = pos @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            pos = pos + np.asarray(translation, dtype=float)
        return Molecule(self.numbers, pos, self.cell)


@dataclass(frozen=True)
class NeighborGraph:
    """Directed cutoff graph; edge ``(i, j)`` carries ``r_ij = r_j - r_i``."""

    cutoff: float
    n_atoms: int
    senders: np.ndarray  # i
    receivers: np.ndarray  # j
    vectors: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.senders)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))

    def neighbors_of(self, atom: int) -> np.ndarray:
        return self.receivers[self.senders == atom]

    def vectors_of(self, atom: int) -> np.ndarray:
        return self.vectors[self.senders == atom]


def build_neighbor_graph(mol: Molecule, cutoff: float = DEFAULT_CUTOFF) -> NeighborGraph:
    """All ordered pairs ``(i, j)`` with ``0 < |r_j - r_i| <= cutoff``, sorted by ``(i, j)``."""
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    pos = mol.positions
    diff = pos[None, :, :] - pos[:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    mask = (dist <= cutoff) & (dist > 0)
    # np.nonzero walks row-major, which is exactly (i, j) order
    i, j = np.nonzero(mask)
    return NeighborGraph(
        cutoff=float(cutoff),
        n_atoms=len(mol),
        senders=i,
        receivers=j,
        vectors=diff[i, j],
        distances=dist[i, j],
    )


def local_moi(mol: Molecule, graph: NeighborGraph, atom_index: int) -> np.ndarray:
    """Inertia tensor of the neighbors of one atom, positions taken relative to it."""
    if not 0 <= atom_index < len(mol):
        raise IndexError(f"atom index {atom_index} out of range for {len(mol)} atoms")
    sel = graph.senders == atom_index
    r = graph.vectors[sel]
    m = mol.masses[graph.receivers[sel]]
    r2 = np.einsum("ki,ki->k", r, r)
    inertia = np.eye(3) * (m @ r2) - np.einsum("k,ki,kj->ij", m, r, r)
    return 0.5 * (inertia + inertia.T)


def _fallback_sign(v: np.ndarray) -> np.ndarray:
    for x in v:
        if abs(x) > TIE_TOL * np.linalg.norm(v):
            return v if x > 0 else -v
    return v


def canonicalize(v, r_com, return_tie: bool = False):
    """Flip ``v`` so that it has a non-negative dot product with ``r_com``.

    When the dot product vanishes (or ``r_com`` does) the sign is chosen so
    that the first nonzero component of ``v`` is positive.
    """
    v = np.asarray(v, dtype=float)
    r_com = np.asarray(r_com, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("cannot canonicalize a zero vector")
    nr = np.linalg.norm(r_com)
    dot = float(v @ r_com)
    tie = nr < TIE_TOL or abs(dot) < TIE_TOL * nv * nr
    if tie:
        out = _fallback_sign(v)
    else:
        out = v if dot >= 0 else -v
    return (out, tie) if return_tie else out


@dataclass(frozen=True)
class Frame:
    vectors: np.ndarray  # rows, largest eigenvalue first
    eigenvalues: np.ndarray
    tie: bool = False  # degenerate spectrum or sign-convention tie
    notes: tuple[str, ...] = field(default_factory=tuple)


def _complete_subspace(basis: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic orthonormal basis of a ``dim``-dimensional eigenspace.

    ``basis`` holds any orthonormal basis of the eigenspace as rows; the
    result is obtained by projecting the x axis, then the y axis (then z)
    into the space and orthonormalizing.
    """
    proj = basis.T @ basis
    out: list[np.ndarray] = []
    for axis in np.eye(3):
        if len(out) == dim:
            break
        u = proj @ axis
        for w in out:
            u = u - (w @ u) * w
        n = np.linalg.norm(u)
        if n > 1e-6:
            out.append(u / n)
    return np.array(out)


def symmetry_breaking_frame(mol: Molecule, graph: NeighborGraph, atom_index: int) -> Frame:
    """Canonicalized inertia eigenframe of one atom's neighborhood."""
    inertia = local_moi(mol, graph, atom_index)
    lam, vec = np.linalg.eigh(inertia)
    lam, vec = lam[::-1], vec[:, ::-1].T
    scale = np.abs(lam).max()
    if scale == 0:
        return Frame(np.eye(3), np.zeros(3), tie=True, notes=("isolated atom",))

    notes = []
    # group eigenvalues into clusters of (near-)degenerate values
    groups = [[0]]
    for k in (1, 2):
        if lam[groups[-1][-1]] - lam[k] < DEGENERACY_TOL * scale:
            groups[-1].append(k)
        else:
            groups.append([k])
    vectors = vec.copy()
    degenerate = any(len(g) > 1 for g in groups)
    if degenerate:
        notes.append("degenerate inertia spectrum")
        for g in groups:
            if len(g) > 1:
                vectors[g] = _complete_subspace(vec[g], len(g))

    r_com = mol.center_of_mass - mol.positions[atom_index]
    tie = degenerate
    for k in range(3):
        vectors[k], t = canonicalize(vectors[k], r_com, return_tie=True)
        if t:
            tie = True
            notes.append(f"sign tie on eigenvector {k}")
    return Frame(vectors, lam, tie=tie, notes=tuple(notes))


def molecule_frames(mol: Molecule, graph: NeighborGraph) -> list[Frame]:
    return [symmetry_breaking_frame(mol, graph, a) for a in range(len(mol))]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation matrix."""
    return Rotation.random(random_state=rng).as_matrix()
