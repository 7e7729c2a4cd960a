import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from floatorb.geometry import (
    Molecule,
    build_neighbor_graph,
    canonicalize,
    local_moi,
    molecule_frames,
    random_rotation,
    symmetry_breaking_frame,
)
from oracles import brute_neighbors

H = 1.008


def test_molecule_validation():
    with pytest.raises(ValueError, match="at least one atom"):
        Molecule([], np.zeros((0, 3)))
    with pytest.raises(ValueError, match="positions"):
        Molecule([1, 1], [[0, 0, 0]])
    with pytest.raises(ValueError, match="finite"):
        Molecule([1], [[0, np.nan, 0]])
    with pytest.raises(ValueError, match="not supported"):
        Molecule([2], [[0, 0, 0]])


def test_molecule_is_read_only(water):
    with pytest.raises(ValueError):
        water.positions[0, 0] = 1.0


def test_water_fixture(water):
    assert water.symbols == ["O", "H", "H"]
    assert water.n_valence == 8


def test_pair_inside_and_outside_cutoff():
    g = build_neighbor_graph(Molecule([1, 1], [[0, 0, 0], [1, 0, 0]]), 8.0)
    assert g.edges == [(0, 1), (1, 0)]
    np.testing.assert_allclose(g.vectors, [[1, 0, 0], [-1, 0, 0]])
    assert len(build_neighbor_graph(Molecule([1, 1], [[0, 0, 0], [9, 0, 0]]), 8.0)) == 0


def test_water_edges():
    mol = Molecule.from_symbols("OHH", [[0, 0, 0], [0.7572, 0, 0.5864], [-0.7572, 0, 0.5864]])
    g = build_neighbor_graph(mol)
    assert g.edges == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    assert np.all(g.distances > 0)
    np.testing.assert_allclose(g.distances, np.linalg.norm(g.vectors, axis=1))


def test_cutoff_must_be_positive(water):
    with pytest.raises(ValueError):
        build_neighbor_graph(water, 0.0)


def test_cutoff_boundary_is_inclusive():
    g = build_neighbor_graph(Molecule([1, 1], [[0, 0, 0], [2.0, 0, 0]]), 2.0)
    assert len(g) == 2


@pytest.mark.parametrize("n,cutoff", [(2, 1.0), (30, 2.5), (200, 4.0)])
def test_graph_matches_brute_force(n, cutoff):
    rng = np.random.default_rng(n)
    mol = Molecule(rng.choice([1, 6, 7, 8, 9], n), rng.uniform(0, 10, (n, 3)))
    g = build_neighbor_graph(mol, cutoff)
    assert g.edges == brute_neighbors(mol.positions, cutoff)


def test_moi_two_masses_on_x_axis():
    mol = Molecule([6, 1, 1], [[0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    g = build_neighbor_graph(mol, 1.5)
    np.testing.assert_allclose(local_moi(mol, g, 0), np.diag([0, 2 * H, 2 * H]), atol=1e-14)


def test_moi_isolated_atom_is_zero():
    mol = Molecule([1, 1], [[0, 0, 0], [20, 0, 0]])
    g = build_neighbor_graph(mol)
    np.testing.assert_array_equal(local_moi(mol, g, 0), np.zeros((3, 3)))


def test_moi_water_oxygen_by_direct_summation():
    mol = Molecule.from_symbols("OHH", [[0, 0, 0], [0.7572, 0, 0.5864], [-0.7572, 0, 0.5864]])
    g = build_neighbor_graph(mol)
    x, z = 0.7572, 0.5864
    # two hydrogens at (+-x, 0, z): Ixx = 2m z^2, Iyy = 2m (x^2 + z^2), Izz = 2m x^2, Ixz = 0
    expected = 2 * H * np.diag([z * z, x * x + z * z, x * x])
    np.testing.assert_allclose(local_moi(mol, g, 0), expected, atol=1e-13)


def test_moi_bad_index(water):
    with pytest.raises(IndexError):
        local_moi(water, build_neighbor_graph(water), 3)


@pytest.mark.parametrize(
    "v,com,expected",
    [
        ((0, 0, 1), (0, 0, -1), (0, 0, -1)),
        ((0, 0, 1), (0, 0, 2), (0, 0, 1)),
        ((0, 1, 0), (1, 0, 0), (0, 1, 0)),
        ((0, -1, 0), (1, 0, 0), (0, 1, 0)),
        ((0, -1, 0), (0, 0, 0), (0, 1, 0)),
    ],
)
def test_canonicalize_examples(v, com, expected):
    np.testing.assert_array_equal(canonicalize(v, com), expected)


def test_canonicalize_reports_ties():
    assert canonicalize((0, 1, 0), (1, 0, 0), return_tie=True)[1]
    assert not canonicalize((0, 1, 0), (0, 1, 0), return_tie=True)[1]
    with pytest.raises(ValueError, match="zero vector"):
        canonicalize((0, 0, 0), (1, 0, 0))


@given(arrays(float, 3, elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(-5, 5)))
def test_canonicalize_properties(v, com):
    if np.linalg.norm(v) < 1e-6:
        return
    out, tie = canonicalize(v, com, return_tie=True)
    assert np.allclose(np.abs(out), np.abs(v))
    if not tie:
        assert out @ com >= 0
    else:
        first = out[np.abs(out) > 1e-10 * np.linalg.norm(v)][0]
        assert first > 0


def test_frame_of_degenerate_pair_with_offset_com():
    # far atom only shifts the center of mass; it is outside the cutoff
    mol = Molecule([6, 1, 1, 8], [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 5, 5]])
    g = build_neighbor_graph(mol, 1.5)
    fr = symmetry_breaking_frame(mol, g, 0)
    np.testing.assert_allclose(fr.eigenvalues, [2 * H, 2 * H, 0], atol=1e-12)
    np.testing.assert_allclose(fr.vectors, [[0, 1, 0], [0, 0, 1], [1, 0, 0]], atol=1e-12)
    assert fr.tie


def test_isolated_atom_frame():
    mol = Molecule([8], [[1, 2, 3]])
    fr = symmetry_breaking_frame(mol, build_neighbor_graph(mol), 0)
    np.testing.assert_array_equal(fr.vectors, np.eye(3))
    assert fr.tie


def _generic_molecule(rng, n=6):
    return Molecule(rng.choice([1, 6, 7, 8], n), rng.normal(0, 1.3, (n, 3)))


def test_frame_invariants(rng):
    for _ in range(10):
        mol = _generic_molecule(rng)
        for fr in molecule_frames(mol, build_neighbor_graph(mol)):
            V = fr.vectors
            assert np.abs(V @ V.T - np.eye(3)).max() <= 1e-10
            assert np.abs(np.linalg.norm(V, axis=1) - 1).max() <= 1e-12
            assert np.all(np.diff(fr.eigenvalues) <= 0)


def test_frames_rotate_with_molecule(rng):
    checked = 0
    for _ in range(10):
        mol = _generic_molecule(rng)
        frames = molecule_frames(mol, build_neighbor_graph(mol))
        if any(f.tie for f in frames):
            continue
        R = random_rotation(rng)
        rot = mol.transformed(R)
        frames_r = molecule_frames(rot, build_neighbor_graph(rot))
        for a, b in zip(frames, frames_r):
            np.testing.assert_allclose(b.vectors, a.vectors @ R.T, atol=1e-8)
        checked += 1
    assert checked >= 5


def test_frames_translation_invariant(rng):
    mol = _generic_molecule(rng)
    moved = mol.transformed(translation=[3.0, -7.0, 11.0])
    g0, g1 = build_neighbor_graph(mol), build_neighbor_graph(moved)
    for a in range(len(mol)):
        np.testing.assert_allclose(local_moi(moved, g1, a), local_moi(mol, g0, a), atol=1e-10)
        np.testing.assert_allclose(
            symmetry_breaking_frame(moved, g1, a).vectors,
            symmetry_breaking_frame(mol, g0, a).vectors,
            atol=1e-10,
        )


@given(st.integers(0, 2**32 - 1))
def test_moi_is_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    mol = _generic_molecule(rng, int(rng.integers(1, 9)))
    g = build_neighbor_graph(mol, 3.0)
    for a in range(len(mol)):
        I = local_moi(mol, g, a)
        np.testing.assert_array_equal(I, I.T)
        assert np.linalg.eigvalsh(I).min() >= -1e-10


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
