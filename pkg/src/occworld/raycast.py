"""Exact voxel traversal (Amanatides-Woo DDA) against semantic grids.

``cast_rays`` runs the traversal for many rays at once; every ray advances
one voxel per iteration until it hits an occupied voxel or leaves the grid.
Returned depths are the entry distance (meters along the unit direction)
of the first occupied voxel.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .geometry import GridGeometry, SemanticGrid


def ray_box(geometry: GridGeometry, origins: np.ndarray, dirs: np.ndarray,
            lo=None, hi=None) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection of rays with an axis-aligned box (default: the grid volume).

    Returns (t_enter, t_exit) clipped to t >= 0; a miss has t_enter >= t_exit.
    """
    lo = np.asarray(geometry.origin if lo is None else lo, dtype=float)
    hi = np.asarray(geometry.upper if hi is None else hi, dtype=float)
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    parallel = dirs == 0
    inside = (origins >= lo) & (origins < hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    return t_enter, t_exit


def _setup(geometry: GridGeometry, origins: np.ndarray, dirs: np.ndarray):
    res = geometry.resolution
    dims = np.asarray(geometry.dims)
    t_enter, t_exit = ray_box(geometry, origins, dirs)
    hit = t_enter < t_exit
    g = (origins - np.asarray(geometry.origin)) / res + t_enter[:, None] * dirs / res
    idx = np.clip(np.floor(g).astype(np.int64), 0, dims - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        o_g = (origins - np.asarray(geometry.origin)) / res
        nxt = np.where(step > 0, idx + 1, idx).astype(float)
        t_max = np.where(step != 0, (nxt - o_g) * res / dirs, np.inf)
        t_delta = np.where(step != 0, res / np.abs(dirs), np.inf)
    return idx, step, t_max, t_delta, t_enter, t_exit, hit


def cast_rays(grid: SemanticGrid, origins, dirs, max_depth: float = np.inf,
              occupied: np.ndarray | None = None,
              visited: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """First-hit (depth, category) for each ray; misses give (nan, -1).

    ``dirs`` must be unit vectors. ``occupied`` overrides the non-free test.
    If ``visited`` (bool, grid-shaped) is given, every traversed voxel up to
    and including the first hit is marked in it.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    geometry = grid.geometry
    dims = np.asarray(geometry.dims)
    occ = grid.occupied() if occupied is None else occupied
    n = origins.shape[0]
    depth = np.full(n, np.nan)
    cat = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return depth, cat

    idx, step, t_max, t_delta, t_cur, t_exit, active = _setup(geometry, origins, dirs)
    active &= t_cur <= max_depth
    rows = np.arange(n)
    for _ in range(int(dims.sum()) + 3):
        a = rows[active]
        if a.size == 0:
            break
        i, j, k = idx[a, 0], idx[a, 1], idx[a, 2]
        if visited is not None:
            visited[i, j, k] = True
        occ_a = occ[i, j, k]
        hit = a[occ_a]
        depth[hit] = t_cur[hit]
        cat[hit] = grid.categories[i[occ_a], j[occ_a], k[occ_a]]
        active[hit] = False
        a = a[~occ_a]
        if a.size == 0:
            break
        axis = np.argmin(t_max[a], axis=1)
        t_cur[a] = t_max[a, axis]
        idx[a, axis] += step[a, axis]
        t_max[a, axis] += t_delta[a, axis]
        ia = idx[a, axis]
        leave = (ia < 0) | (ia >= dims[axis]) | (t_cur[a] >= t_exit[a]) | (t_cur[a] > max_depth)
        active[a[leave]] = False
    return depth, cat


def ray_cast_first_hit(grid: SemanticGrid, ray) -> tuple[float, int] | None:
    """Single-ray convenience wrapper; ``ray`` needs ``origin`` and ``direction``."""
    depth, cat = cast_rays(grid, ray.origin[None], ray.direction[None])
    if cat[0] < 0:
        return None
    return float(depth[0]), int(cat[0])


def traverse(geometry: GridGeometry, origin, direction) -> Iterator[tuple[tuple[int, int, int], float]]:
    """Yield every voxel the ray passes through with its entry depth, in order."""
    origin = np.asarray(origin, dtype=float)[None]
    direction = np.asarray(direction, dtype=float)[None]
    idx, step, t_max, t_delta, t_enter, t_exit, hit = _setup(geometry, origin, direction)
    if not hit[0]:
        return
    dims = geometry.dims
    idx, step, t_max, t_delta = idx[0].tolist(), step[0].tolist(), t_max[0].tolist(), t_delta[0].tolist()
    t = float(t_enter[0])
    exit_t = float(t_exit[0])
    while True:
        yield (idx[0], idx[1], idx[2]), t
        axis = min(range(3), key=lambda a: t_max[a])
        t = t_max[axis]
        idx[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        if not 0 <= idx[axis] < dims[axis] or t >= exit_t:
            return
