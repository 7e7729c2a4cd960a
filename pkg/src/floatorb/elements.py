"""Element data for the supported first-row organic elements (H, C, N, O, F)."""
from __future__ import annotations

import numpy as np

SYMBOLS = {1: "H", 6: "C", 7: "N", 8: "O", 9: "F"}
NUMBERS = {s: z for z, s in SYMBOLS.items()}

# standard atomic weights, amu
MASSES = {1: 1.008, 6: 12.011, 7: 14.007, 8: 15.999, 9: 18.998}

# subshells in Aufbau order with their capacities; enough for Z <= 10
SUBSHELLS = (("1s", 2), ("2s", 2), ("2p", 6))


class UnsupportedElementError(ValueError):
    pass


def check_supported(z: int) -> int:
    z = int(z)
    if z not in SYMBOLS:
        raise UnsupportedElementError(
            f"atomic number {z} is not supported (allowed: {sorted(SYMBOLS)})"
        )
    return z


def atomic_number(symbol: str) -> int:
    key = symbol.strip().capitalize()
    if key not in NUMBERS:
        raise UnsupportedElementError(f"unknown or unsupported element symbol {symbol!r}")
    return NUMBERS[key]


def occupancies(z: int) -> list[int]:
    """Ground-state subshell occupancies filled in Aufbau order."""
    left = check_supported(z)
    occ = []
    for _, cap in SUBSHELLS:
        n = min(cap, left)
        occ.append(n)
        left -= n
    return occ


def valence_electrons(z: int) -> int:
    """Electrons in the outermost principal shell (H: 1s, otherwise 2s + 2p)."""
    occ = occupancies(z)
    if z <= 2:
        return occ[0]
    return occ[1] + occ[2]


def descriptor(z: int) -> np.ndarray:
    """Nuclear/electronic descriptor ``[P, N, V, E_1..E_n, F_1..F_n]``.

    ``N`` is the neutron count of the most common rounding of the standard
    atomic weight, ``E_i`` the subshell occupancies and ``F_i`` the number of
    free slots left in each subshell.
    """
    z = check_supported(z)
    occ = occupancies(z)
    free = [cap - e for (_, cap), e in zip(SUBSHELLS, occ)]
    neutrons = int(round(MASSES[z])) - z
    return np.array([z, neutrons, valence_electrons(z), *occ, *free], dtype=float)


DESCRIPTOR_SIZE = 3 + 2 * len(SUBSHELLS)
