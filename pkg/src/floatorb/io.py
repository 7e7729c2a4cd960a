"""Text formats: XYZ molecules, VASP CHGCAR grids and a JSON mixture document.

CHGCAR files store ``rho * V_cell`` per grid point with the first index
varying fastest. Everything is converted to electrons per cubic Angstrom at
the boundary, so in-memory grids never carry the volume factor.
"""
from __future__ import annotations

import json
import math

import numpy as np

from . import elements
from .geometry import Molecule
from .mixture import DensityGrid, GridSpec, Mixture, NotPositiveDefiniteError

MIXTURE_SCHEMA = "floatorb.mixture/1"
_UPPER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class FormatError(ValueError):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _floats(tokens, line: int, what: str) -> list[float]:
    try:
        out = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"malformed number in {what}: {' '.join(tokens)!r}", line) from None
    if not all(math.isfinite(x) for x in out):
        raise FormatError(f"non-finite number in {what}", line)
    return out


def _ints(tokens, line: int, what: str) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise FormatError(f"expected integers in {what}: {' '.join(tokens)!r}", line) from None


def _symbol(token: str, line: int) -> int:
    try:
        return elements.atomic_number(token)
    except ValueError as exc:
        raise FormatError(str(exc), line) from None


# --- XYZ -------------------------------------------------------------------


def parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise FormatError("missing atom count", 1)
    n = _ints(lines[0].split()[:1], 1, "atom count")[0]
    if n < 1:
        raise FormatError(f"atom count must be positive, got {n}", 1)
    body = [(k + 3, ln) for k, ln in enumerate(lines[2:]) if ln.strip()]
    if len(body) != n:
        where = body[-1][0] if body else 2
        raise FormatError(f"count line says {n} atoms, found {len(body)}", where)
    numbers, positions = [], []
    for lineno, ln in body:
        tok = ln.split()
        if len(tok) < 4:
            raise FormatError("expected 'Symbol x y z'", lineno)
        numbers.append(_symbol(tok[0], lineno))
        positions.append(_floats(tok[1:4], lineno, "coordinates"))
    return Molecule(numbers, positions)


def write_xyz(mol: Molecule, comment: str = "") -> str:
    out = [str(len(mol)), comment.replace("\n", " ")]
    for s, (x, y, z) in zip(mol.symbols, mol.positions):
        out.append(f"{s:<2s} {x:18.10f} {y:18.10f} {z:18.10f}")
    return "\n".join(out) + "\n"


# --- CHGCAR ----------------------------------------------------------------


class _Lines:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of file while reading {what}", self.pos + 1)
        self.pos += 1
        return self.pos, self.lines[self.pos - 1]

    def next_nonblank(self, what: str) -> tuple[int, str]:
        while True:
            lineno, ln = self.next(what)
            if ln.strip():
                return lineno, ln


def parse_chgcar(text: str) -> tuple[Molecule, DensityGrid]:
    """Read a VASP 5 CHGCAR; only the first (total) density block is used."""
    src = _Lines(text)
    src.next("comment")
    lineno, ln = src.next("scale factor")
    scale = _floats(ln.split()[:1], lineno, "scale factor")
    if not scale:
        raise FormatError("missing scale factor", lineno)
    rows = []
    for _ in range(3):
        lineno, ln = src.next("lattice")
        vals = _floats(ln.split()[:3], lineno, "lattice vector")
        if len(vals) != 3:
            raise FormatError("lattice vector needs three components", lineno)
        rows.append(vals)
    cell = np.array(rows)
    factor = scale[0]
    if factor < 0:
        # negative scale is the target cell volume
        factor = (-factor / abs(np.linalg.det(cell))) ** (1.0 / 3.0)
    cell *= factor

    lineno, ln = src.next("species")
    symbols = ln.split()
    if not symbols or symbols[0].lstrip("+-").replace(".", "", 1).isdigit():
        raise FormatError("expected a species line (VASP 5 layout)", lineno)
    numbers_of = [_symbol(s, lineno) for s in symbols]
    lineno, ln = src.next("counts")
    counts = _ints(ln.split(), lineno, "species counts")
    if len(counts) != len(symbols) or min(counts) < 0:
        raise FormatError("species and counts lines disagree", lineno)

    lineno, ln = src.next("coordinate mode")
    if ln.strip()[:1] in "sS":  # selective dynamics
        lineno, ln = src.next("coordinate mode")
    mode = ln.strip()[:1].lower()
    if mode not in ("d", "c", "k"):
        raise FormatError(f"unknown coordinate mode {ln.strip()!r}", lineno)
    coords = []
    for _ in range(sum(counts)):
        lineno, ln = src.next("atom coordinates")
        vals = _floats(ln.split()[:3], lineno, "atom coordinates")
        if len(vals) != 3:
            raise FormatError("atom line needs three coordinates", lineno)
        coords.append(vals)
    coords = np.array(coords).reshape(-1, 3)
    positions = coords @ cell if mode == "d" else coords * factor

    lineno, ln = src.next_nonblank("grid shape")
    shape = _ints(ln.split(), lineno, "grid shape")
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"grid shape must be three positive integers, got {ln.strip()!r}", lineno)
    n_total = shape[0] * shape[1] * shape[2]
    values: list[float] = []
    while len(values) < n_total:
        lineno, ln = src.next("grid values")
        tok = ln.split()
        if not tok:
            continue
        values.extend(_floats(tok, lineno, "grid values"))
    if len(values) != n_total:
        raise FormatError(f"expected {n_total} grid values, line ends with {len(values)}", lineno)

    numbers = np.repeat(numbers_of, counts)
    mol = Molecule(numbers, positions, cell)
    spec = GridSpec(cell, tuple(shape))
    grid = np.array(values).reshape(shape, order="F") / spec.volume
    return mol, DensityGrid(spec, grid)


def _species(mol: Molecule) -> tuple[list[str], list[int], np.ndarray]:
    # contiguous runs of equal species, in order of first appearance
    order = []
    for z in mol.numbers:
        if z not in order:
            order.append(z)
    perm = np.concatenate([np.flatnonzero(mol.numbers == z) for z in order])
    counts = [int((mol.numbers == z).sum()) for z in order]
    return [elements.SYMBOLS[z] for z in order], counts, perm


def write_chgcar(mol: Molecule, grid: DensityGrid, comment: str = "floatorb density") -> str:
    """CHGCAR text for ``grid``; atoms are grouped by species as VASP requires."""
    spec = grid.spec
    if np.abs(spec.origin).max() > 0 or spec.offset != 0:
        raise ValueError("CHGCAR grids must start at the cell corner (origin 0, offset 0)")
    cell = spec.cell
    syms, counts, perm = _species(mol)
    frac = (mol.positions[perm] - spec.origin) @ np.linalg.inv(cell)
    out = [comment.replace("\n", " "), "1.0"]
    out += [f"  {a:20.12f} {b:20.12f} {c:20.12f}" for a, b, c in cell]
    out.append("   " + "   ".join(f"{s:>2s}" for s in syms))
    out.append("   " + "   ".join(f"{c:>2d}" for c in counts))
    out.append("Direct")
    out += [f"  {a:18.12f} {b:18.12f} {c:18.12f}" for a, b, c in frac]
    out.append("")
    out.append(" ".join(f"{n:5d}" for n in spec.shape))
    flat = (grid.values * spec.volume).reshape(-1, order="F")
    for k in range(0, len(flat), 5):
        out.append(" ".join(f"{x:.10E}" for x in flat[k : k + 5]))
    return "\n".join(out) + "\n"


# --- mixture document --------------------------------------------------------


def write_mixture(
    m: Mixture, n_elec: float | None = None, mol: Molecule | None = None, meta=None
) -> str:
    """JSON document; floats are written in shortest round-trip form (<= 17 digits)."""
    doc = {
        "schema": MIXTURE_SCHEMA,
        "n_elec": None if n_elec is None else float(n_elec),
        "scale": float(m.scale),
        "clamp_negative": bool(m.clamp_negative),
        "gaussians": [
            {
                "w": float(w),
                "mu": [float(x) for x in mu],
                "sigma": [float(s[i, j]) for i, j in _UPPER],
            }
            for w, mu, s in zip(m.weights, m.means, m.covariances)
        ],
    }
    if mol is not None:
        doc["atoms"] = {
            "symbols": mol.symbols,
            "positions": [[float(x) for x in p] for p in mol.positions],
        }
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=1) + "\n"


def _sigma(vals, k: int) -> np.ndarray:
    if len(vals) != 6:
        raise FormatError(f"gaussian {k}: sigma needs 6 upper-triangle entries")
    s = np.empty((3, 3))
    for v, (i, j) in zip(vals, _UPPER):
        s[i, j] = s[j, i] = float(v)
    return s


def read_mixture(text: str) -> tuple[Mixture, dict]:
    """Parse a mixture document; returns the mixture and the remaining header fields."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("schema") != MIXTURE_SCHEMA:
        got = doc.get("schema") if isinstance(doc, dict) else None
        raise FormatError(f"unsupported mixture schema {got!r}, expected {MIXTURE_SCHEMA!r}")
    try:
        gs = doc["gaussians"]
        w = np.array([float(g["w"]) for g in gs])
        if any(len(g["mu"]) != 3 for g in gs):
            raise FormatError("every gaussian needs a 3-component mu")
        mu = np.array([[float(x) for x in g["mu"]] for g in gs]).reshape(-1, 3)
        cov = np.array([_sigma(g["sigma"], k) for k, g in enumerate(gs)]).reshape(-1, 3, 3)
        for k, s in enumerate(cov):
            eig = np.linalg.eigvalsh(s)
            if eig.min() <= 0:
                raise NotPositiveDefiniteError(
                    f"gaussian {k}: sigma is not positive definite (eigenvalues {eig})"
                )
        mix = Mixture(
            w, mu, cov,
            scale=float(doc.get("scale", 1.0)),
            clamp_negative=bool(doc.get("clamp_negative", True)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (FormatError, NotPositiveDefiniteError)):
            raise
        raise FormatError(f"malformed mixture document: {exc!r}") from None
    header = {k: v for k, v in doc.items() if k not in ("schema", "gaussians")}
    return mix, header


def mixture_molecule(header: dict) -> Molecule | None:
    atoms = header.get("atoms")
    if not atoms:
        return None
    return Molecule.from_symbols(atoms["symbols"], atoms["positions"])
