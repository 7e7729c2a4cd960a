"""Compiled inner loops for pruned Gaussian evaluation on voxel grids.

Grids are handled internally as C arrays indexed ``[k, j, i]`` so that the
first lattice index ``i`` is contiguous. Work is split into slabs of whole
``k`` planes; each plane is written (or accumulated into its own partial
buffer) by exactly one call, which keeps results independent of how the
planes are distributed over threads.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _line_range(bx, by, bz, ex, ey, ez, P, thr, lo, hi):
    # q(i) = a i^2 + b i + c along the line base + i * e
    px = P[0, 0] * ex + P[0, 1] * ey + P[0, 2] * ez
    py = P[1, 0] * ex + P[1, 1] * ey + P[1, 2] * ez
    pz = P[2, 0] * ex + P[2, 1] * ey + P[2, 2] * ez
    a = ex * px + ey * py + ez * pz
    b = 2.0 * (bx * px + by * py + bz * pz)
    qx = P[0, 0] * bx + P[0, 1] * by + P[0, 2] * bz
    qy = P[1, 0] * bx + P[1, 1] * by + P[1, 2] * bz
    qz = P[2, 0] * bx + P[2, 1] * by + P[2, 2] * bz
    c = bx * qx + by * qy + bz * qz
    disc = b * b - 4.0 * a * (c - thr)
    if disc < 0.0:
        return 1, 0
    sq = math.sqrt(disc)
    # widen by one voxel; the exact q <= thr test happens per voxel
    i0 = int(math.floor((-b - sq) / (2.0 * a))) - 1
    i1 = int(math.ceil((-b + sq) / (2.0 * a))) + 1
    return max(i0, lo), min(i1, hi)


@njit(cache=True, nogil=True)
def raster_planes(k0, k1, origin, steps, offset, means, precs, coefs, boxes, thr, out):
    """Accumulate ``coefs[g] * exp(-q/2)`` into ``out[k, j, i]`` for planes ``k0 <= k < k1``."""
    n_g = means.shape[0]
    ex = steps[0, 0]
    ey = steps[0, 1]
    ez = steps[0, 2]
    for k in range(k0, k1):
        for g in range(n_g):
            if k < boxes[g, 4] or k > boxes[g, 5]:
                continue
            P = precs[g]
            cg = coefs[g]
            for j in range(boxes[g, 2], boxes[g, 3] + 1):
                fj = j + offset
                fk = k + offset
                bx = origin[0] + offset * ex + fj * steps[1, 0] + fk * steps[2, 0] - means[g, 0]
                by = origin[1] + offset * ey + fj * steps[1, 1] + fk * steps[2, 1] - means[g, 1]
                bz = origin[2] + offset * ez + fj * steps[1, 2] + fk * steps[2, 2] - means[g, 2]
                i0, i1 = _line_range(bx, by, bz, ex, ey, ez, P, thr, boxes[g, 0], boxes[g, 1])
                for i in range(i0, i1 + 1):
                    dx = bx + i * ex
                    dy = by + i * ey
                    dz = bz + i * ez
                    q = (
                        P[0, 0] * dx * dx
                        + P[1, 1] * dy * dy
                        + P[2, 2] * dz * dz
                        + 2.0 * (P[0, 1] * dx * dy + P[0, 2] * dx * dz + P[1, 2] * dy * dz)
                    )
                    if q <= thr:
                        out[k, j, i] += cg * math.exp(-0.5 * q)


@njit(cache=True, nogil=True)
def moment_planes(k0, k1, origin, steps, offset, means, precs, norms, boxes, thr, weight, partial):
    """Per-plane sums of ``t = weight * N_g`` times ``1``, ``y`` and ``y y^T``.

    ``y = P_g (r - mu_g)``; the 10 slots per Gaussian hold
    ``[t, t y_x, t y_y, t y_z, t y_x y_x, t y_x y_y, t y_x y_z, t y_y y_y, t y_y y_z, t y_z y_z]``.
    """
    n_g = means.shape[0]
    ex = steps[0, 0]
    ey = steps[0, 1]
    ez = steps[0, 2]
    for k in range(k0, k1):
        for g in range(n_g):
            if k < boxes[g, 4] or k > boxes[g, 5]:
                continue
            P = precs[g]
            ng = norms[g]
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            acc3 = 0.0
            acc4 = 0.0
            acc5 = 0.0
            acc6 = 0.0
            acc7 = 0.0
            acc8 = 0.0
            acc9 = 0.0
            for j in range(boxes[g, 2], boxes[g, 3] + 1):
                fj = j + offset
                fk = k + offset
                bx = origin[0] + offset * ex + fj * steps[1, 0] + fk * steps[2, 0] - means[g, 0]
                by = origin[1] + offset * ey + fj * steps[1, 1] + fk * steps[2, 1] - means[g, 1]
                bz = origin[2] + offset * ez + fj * steps[1, 2] + fk * steps[2, 2] - means[g, 2]
                i0, i1 = _line_range(bx, by, bz, ex, ey, ez, P, thr, boxes[g, 0], boxes[g, 1])
                for i in range(i0, i1 + 1):
                    wv = weight[k, j, i]
                    if wv == 0.0:
                        continue
                    dx = bx + i * ex
                    dy = by + i * ey
                    dz = bz + i * ez
                    yx = P[0, 0] * dx + P[0, 1] * dy + P[0, 2] * dz
                    yy = P[1, 0] * dx + P[1, 1] * dy + P[1, 2] * dz
                    yz = P[2, 0] * dx + P[2, 1] * dy + P[2, 2] * dz
                    q = dx * yx + dy * yy + dz * yz
                    if q > thr:
                        continue
                    t = wv * ng * math.exp(-0.5 * q)
                    acc0 += t
                    acc1 += t * yx
                    acc2 += t * yy
                    acc3 += t * yz
                    acc4 += t * yx * yx
                    acc5 += t * yx * yy
                    acc6 += t * yx * yz
                    acc7 += t * yy * yy
                    acc8 += t * yy * yz
                    acc9 += t * yz * yz
            partial[k, g, 0] = acc0
            partial[k, g, 1] = acc1
            partial[k, g, 2] = acc2
            partial[k, g, 3] = acc3
            partial[k, g, 4] = acc4
            partial[k, g, 5] = acc5
            partial[k, g, 6] = acc6
            partial[k, g, 7] = acc7
            partial[k, g, 8] = acc8
            partial[k, g, 9] = acc9


def plane_chunks(n_planes: int, threads: int) -> list[tuple[int, int]]:
    threads = max(1, min(int(threads), n_planes))
    bounds = np.linspace(0, n_planes, threads + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
