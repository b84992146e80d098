"""Exact shortest paths on occupancy grids and the scripted expert built on them.

Distances are in meters over 8-connected cells (orthogonal step = res,
diagonal = sqrt(2)*res); diagonal moves through blocked corners are forbidden.
Planning happens on a clearance-eroded copy of the grid so that every planned
cell center admits the agent's disc footprint.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numba import njit

from .world import (
    AGENT_RADIUS_M,
    FORWARD_STEP_M,
    OVERLAP_EPS,
    TURN_INCREMENT_RAD,
    Action,
    OccupancyGrid,
    Pose,
    WorldError,
    sweep_clear,
)

SUCCESS_RADIUS_M = 0.2


class GeodesyError(WorldError):
    """Unreachable target, blocked source, or similar planning failure."""


def clearance_offsets(clearance: float, resolution: float) -> list[tuple[int, int]]:
    """Relative cells whose area lies strictly within `clearance` of a cell center."""
    if clearance <= 0:
        return [(0, 0)]
    reach = int(math.ceil(clearance / resolution)) + 1
    offs = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            dx = max(0.0, (abs(dc) - 0.5)) * resolution
            dy = max(0.0, (abs(dr) - 0.5)) * resolution
            # Same tangency slack as the footprint overlap test.
            if dx * dx + dy * dy < clearance * clearance - 1e-12:
                offs.append((dr, dc))
    return offs


def traversable_mask(cells: np.ndarray, clearance: float, resolution: float) -> np.ndarray:
    """Cells where a disc of radius `clearance` centered on the cell fits."""
    if clearance <= 0:
        return cells.copy()
    out = cells.copy()
    h, w = cells.shape
    for dr, dc in clearance_offsets(clearance, resolution):
        if dr == 0 and dc == 0:
            continue
        shifted = np.zeros_like(cells)
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        shifted[r0:r1, c0:c1] = cells[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        out &= shifted
    return out


@njit(cache=True)
def _heap_push(hc, hi, size, cost, idx):
    hc[size] = cost
    hi[size] = idx
    i = size
    while i > 0:
        p = (i - 1) >> 1
        if hc[p] > hc[i] or (hc[p] == hc[i] and hi[p] > hi[i]):
            hc[p], hc[i] = hc[i], hc[p]
            hi[p], hi[i] = hi[i], hi[p]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(hc, hi, size):
    cost = hc[0]
    idx = hi[0]
    size -= 1
    hc[0] = hc[size]
    hi[0] = hi[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        best = i
        if l < size and (hc[l] < hc[best] or (hc[l] == hc[best] and hi[l] < hi[best])):
            best = l
        if r < size and (hc[r] < hc[best] or (hc[r] == hc[best] and hi[r] < hi[best])):
            best = r
        if best == i:
            break
        hc[best], hc[i] = hc[i], hc[best]
        hi[best], hi[i] = hi[i], hi[best]
        i = best
    return cost, idx, size


@njit(cache=True)
def _dijkstra_kernel(trav, src_r, src_c, orth_cost, diag_cost, use_diag):
    h, w = trav.shape
    n = h * w
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, np.int64)
    cap = 8 * n + 8
    hc = np.empty(cap)
    hi = np.empty(cap, np.int64)
    size = 0
    src = src_r * w + src_c
    dist[src] = 0.0
    size = _heap_push(hc, hi, size, 0.0, src)
    while size > 0:
        cost, idx, size = _heap_pop(hc, hi, size)
        if cost > dist[idx]:
            continue
        r = idx // w
        c = idx % w
        for dr in range(-1, 2):
            for dc in range(-1, 2):
                if dr == 0 and dc == 0:
                    continue
                diagonal = dr != 0 and dc != 0
                if diagonal and not use_diag:
                    continue
                nr = r + dr
                nc = c + dc
                if nr < 0 or nr >= h or nc < 0 or nc >= w:
                    continue
                if not trav[nr, nc]:
                    continue
                if diagonal and not (trav[r + dr, c] and trav[r, c + dc]):
                    continue  # no cutting blocked corners
                ncost = cost + (diag_cost if diagonal else orth_cost)
                nidx = nr * w + nc
                if ncost < dist[nidx]:
                    dist[nidx] = ncost
                    parent[nidx] = idx
                    size = _heap_push(hc, hi, size, ncost, nidx)
    return dist, parent


@dataclass
class DistanceField:
    """Geodesic distances (meters) from a single source; immutable once built."""

    source: tuple[float, float]
    source_cell: tuple[int, int]
    dist: np.ndarray      # (H, W) float64, +inf where unreachable
    parent: np.ndarray    # (H, W) int64 flat predecessor index, -1 at source/unreachable
    traversable: np.ndarray
    resolution: float
    grid: OccupancyGrid | None = None
    clearance: float = AGENT_RADIUS_M
    connectivity: int = 8
    # Zero-clearance companion distances on the raw grid; finite wherever the
    # raw map is navigable, so near-wall poses read an honest lower bound.
    dist_raw: np.ndarray | None = None

    def distance_at(self, point: tuple[float, float]) -> float:
        r = int(math.floor(point[1] / self.resolution))
        c = int(math.floor(point[0] / self.resolution))
        h, w = self.dist.shape
        if not (0 <= r < h and 0 <= c < w):
            return math.inf
        return float(self.dist[r, c])

    def reachable(self, point: tuple[float, float]) -> bool:
        return math.isfinite(self.distance_at(point))


def distance_field_raw(
    trav: np.ndarray,
    source_cell: tuple[int, int],
    resolution: float,
    connectivity: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Dijkstra on an already-eroded traversability mask; returns (dist, parent)."""
    r, c = source_cell
    if not trav[r, c]:
        raise GeodesyError(f"source cell {source_cell} is not traversable")
    dist, parent = _dijkstra_kernel(
        np.ascontiguousarray(trav, dtype=np.bool_),
        r, c, resolution, resolution * math.sqrt(2.0), connectivity == 8,
    )
    h, w = trav.shape
    return dist.reshape(h, w), parent.reshape(h, w)


def distance_field(
    grid: OccupancyGrid,
    source: tuple[float, float],
    clearance: float = AGENT_RADIUS_M,
    connectivity: int = 8,
) -> DistanceField:
    """Exact geodesic field sourced at a world point."""
    trav = cached_traversable(grid, clearance)
    cell = grid.cell_of(source[0], source[1])
    if not grid.in_bounds(*cell) or not trav[cell]:
        raise GeodesyError(f"source {source} maps to blocked/cleared cell {cell}")
    dist, parent = distance_field_raw(trav, cell, grid.resolution, connectivity)
    raw = None
    if clearance > 0:
        raw, _ = distance_field_raw(grid.cells, cell, grid.resolution, connectivity)
    return DistanceField(
        source=(float(source[0]), float(source[1])), source_cell=cell,
        dist=dist, parent=parent, traversable=trav,
        resolution=grid.resolution, grid=grid,
        clearance=clearance, connectivity=connectivity, dist_raw=raw,
    )


# One process-wide LRU across all grids; fields are ~100 KB each, so this
# caps planner memory near 15 MB no matter how many maps a run touches.
_CACHE_MAX = 128
_FIELD_CACHE: OrderedDict = OrderedDict()

# Erosion masks are pure functions of (grid, clearance); keep one per grid.
_TRAV_CACHE_MAX = 256
_TRAV_CACHE: OrderedDict = OrderedDict()


def cached_traversable(grid: OccupancyGrid, clearance: float = AGENT_RADIUS_M) -> np.ndarray:
    """traversable_mask behind a per-grid LRU; treat the result as read-only."""
    key = (id(grid), clearance)
    hit = _TRAV_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        _TRAV_CACHE.move_to_end(key)
        return hit[1]
    mask = traversable_mask(grid.cells, clearance, grid.resolution)
    _TRAV_CACHE[key] = (grid, mask)
    if len(_TRAV_CACHE) > _TRAV_CACHE_MAX:
        _TRAV_CACHE.popitem(last=False)
    return mask


def cached_field(
    grid: OccupancyGrid,
    source: tuple[float, float],
    clearance: float = AGENT_RADIUS_M,
    connectivity: int = 8,
) -> DistanceField:
    """distance_field behind a global LRU keyed by (grid, source cell)."""
    key = (id(grid), grid.cell_of(source[0], source[1]), clearance, connectivity)
    hit = _FIELD_CACHE.get(key)
    if hit is not None and hit.grid is grid:
        _FIELD_CACHE.move_to_end(key)
        return hit
    field = distance_field(grid, source, clearance, connectivity)
    _FIELD_CACHE[key] = field
    if len(_FIELD_CACHE) > _CACHE_MAX:
        _FIELD_CACHE.popitem(last=False)
    return field


@dataclass
class Path:
    cells: list[tuple[int, int]]      # source .. target
    points: list[tuple[float, float]]  # cell centers, world frame
    length: float


def shortest_path(field: DistanceField, target: tuple[float, float]) -> Path:
    """Parent-chain extraction from the field's source to a world point."""
    h, w = field.dist.shape
    r = int(math.floor(target[1] / field.resolution))
    c = int(math.floor(target[0] / field.resolution))
    if not (0 <= r < h and 0 <= c < w) or not math.isfinite(field.dist[r, c]):
        raise GeodesyError(f"target {target} unreachable from {field.source}")
    cells = [(r, c)]
    while (r, c) != field.source_cell:
        p = int(field.parent[r, c])
        r, c = p // w, p % w
        cells.append((r, c))
    cells.reverse()
    half = field.resolution / 2.0
    points = [(cc * field.resolution + half, rr * field.resolution + half) for rr, cc in cells]
    return Path(cells=cells, points=points, length=float(field.dist[cells[-1]]))


def _locate_on_field(field: DistanceField, pose: Pose) -> tuple[int, int]:
    """Pose's cell, or the nearest finite-distance cell in a small window."""
    h, w = field.dist.shape
    r = int(math.floor(pose.y / field.resolution))
    c = int(math.floor(pose.x / field.resolution))
    r = min(max(r, 0), h - 1)
    c = min(max(c, 0), w - 1)
    if math.isfinite(field.dist[r, c]):
        return r, c
    best = None
    for rad in (1, 2):
        for rr in range(max(0, r - rad), min(h, r + rad + 1)):
            for cc in range(max(0, c - rad), min(w, c + rad + 1)):
                if math.isfinite(field.dist[rr, cc]):
                    d = (rr - r) ** 2 + (cc - c) ** 2
                    if best is None or d < best[0]:
                        best = (d, rr, cc)
        if best is not None:
            return best[1], best[2]
    raise GeodesyError(f"pose ({pose.x:.2f},{pose.y:.2f}) has no reachable cell nearby")


def geodesic_at(field: DistanceField, x: float, y: float) -> float:
    """Public read of the field distance at a world point."""
    return _landing_distance(field, x, y)


def _landing_distance(field: DistanceField, x: float, y: float) -> float:
    """Field distance at a point, tolerating a landing cell the erosion removed.

    Off-tube landings read the cheapest neighbor plus the straight-line hop to
    its center, an estimate that cannot undercut honest routes by much.
    """
    h, w = field.dist.shape
    r = min(max(int(math.floor(y / field.resolution)), 0), h - 1)
    c = min(max(int(math.floor(x / field.resolution)), 0), w - 1)
    d = field.dist[r, c]
    if math.isfinite(d):
        return float(d)
    half = field.resolution / 2.0
    best = math.inf
    for rr in range(max(0, r - 1), min(h, r + 2)):
        for cc in range(max(0, c - 1), min(w, c + 2)):
            dn = field.dist[rr, cc]
            if math.isfinite(dn):
                hop = math.hypot(cc * field.resolution + half - x,
                                 rr * field.resolution + half - y)
                best = min(best, dn + hop)
    return float(best)


# Per-turn surcharge (meters-equivalent) when scoring rotate-then-advance
# candidates. Small enough that real path-length differences dominate, large
# enough to commit to one rotation direction.
_TURN_PENALTY_M = 0.02
_HALF_TURNS = 18
# Within this geodesic range of the goal, steer by the exact point distance;
# the last few cells are too coarse to aim with.
_NEAR_GOAL_M = 0.45


# Candidate heading offsets scanned by the expert: 0, then +-1..18 turns.
_SCAN_KS = np.concatenate([[0], np.arange(1, _HALF_TURNS + 1), -np.arange(1, _HALF_TURNS + 1)])
# Turn count and tie preference (FORWARD < LEFT < RIGHT) per candidate.
_SCAN_TURNS = np.abs(_SCAN_KS)
_SCAN_PREF = np.where(_SCAN_KS == 0, 0, np.where(_SCAN_KS > 0, 1, 2))
_SWEEP_FRAC = np.arange(1, 7) / 6.0


def expert_action(
    pose: Pose,
    goal: tuple[float, float],
    field: DistanceField,
    success_radius: float = SUCCESS_RADIUS_M,
) -> Action:
    """Shortest-path-following teacher. Field must be sourced at `goal`.

    STOP inside the success radius. Otherwise score every reachable heading by
    the field distance of the point one FORWARD step lands on, plus a small
    per-turn surcharge, and emit the first action toward the best candidate.
    Ties prefer FORWARD, then TURN_LEFT. The surcharge makes the not-chosen
    side strictly worse after each turn, so the policy cannot oscillate.
    """
    if math.hypot(goal[0] - pose.x, goal[1] - pose.y) <= success_radius:
        return Action.STOP
    grid = field.grid
    res = field.resolution
    h_cells, w_cells = field.dist.shape

    headings = pose.heading + _SCAN_KS * TURN_INCREMENT_RAD
    dx = np.cos(headings) * FORWARD_STEP_M
    dy = np.sin(headings) * FORWARD_STEP_M

    ok = np.ones(len(headings), dtype=bool)
    if grid is not None:
        px = pose.x + _SWEEP_FRAC[None, :] * dx[:, None]   # (37, 6)
        py = pose.y + _SWEEP_FRAC[None, :] * dy[:, None]
        ex, ey = grid.extent
        rad = AGENT_RADIUS_M
        ok = (
            (px.min(axis=1) - rad >= 0) & (py.min(axis=1) - rad >= 0)
            & (px.max(axis=1) + rad <= ex) & (py.max(axis=1) + rad <= ey)
        )
        r0 = max(0, int(math.floor((pose.y - FORWARD_STEP_M - rad) / res)))
        r1 = min(h_cells - 1, int(math.floor((pose.y + FORWARD_STEP_M + rad) / res)))
        c0 = max(0, int(math.floor((pose.x - FORWARD_STEP_M - rad) / res)))
        c1 = min(w_cells - 1, int(math.floor((pose.x + FORWARD_STEP_M + rad) / res)))
        br, bc = np.nonzero(~grid.cells[r0 : r1 + 1, c0 : c1 + 1])
        if br.size:
            by = (br + r0) * res
            bx = (bc + c0) * res
            cx = np.clip(px[:, :, None], bx[None, None, :], bx[None, None, :] + res)
            cy = np.clip(py[:, :, None], by[None, None, :], by[None, None, :] + res)
            hit = (cx - px[:, :, None]) ** 2 + (cy - py[:, :, None]) ** 2 \
                < AGENT_RADIUS_M ** 2 - OVERLAP_EPS
            ok &= ~hit.any(axis=(1, 2))
    if not ok.any():
        return Action.TURN_LEFT  # boxed in; rotate until the budget expires

    lx = pose.x + dx[ok]
    ly = pose.y + dy[ok]
    lr = np.clip(np.floor(ly / res).astype(np.int64), 0, h_cells - 1)
    lc = np.clip(np.floor(lx / res).astype(np.int64), 0, w_cells - 1)
    d = field.dist[lr, lc].copy()
    for i in np.nonzero(np.isinf(d))[0]:
        d[i] = _landing_distance(field, lx[i], ly[i])
    if field.dist_raw is not None:
        # Raw distances cannot leak through walls, so they cap how optimistic
        # the neighbor-hop estimate may get near thin walls.
        finite = np.isfinite(d)
        d[finite] = np.maximum(d[finite], field.dist_raw[lr, lc][finite])
    near = d <= _NEAR_GOAL_M
    if near.any():
        eu = np.hypot(goal[0] - lx[near], goal[1] - ly[near])
        d[near] = np.minimum(d[near], eu)

    score = d + _TURN_PENALTY_M * _SCAN_TURNS[ok]
    pref = _SCAN_PREF[ok]
    ks = _SCAN_KS[ok]
    order = np.lexsort((pref, score))
    j = order[0]
    if not math.isfinite(score[j]):
        return Action.TURN_LEFT
    if ks[j] == 0:
        return Action.FORWARD
    return Action.TURN_LEFT if ks[j] > 0 else Action.TURN_RIGHT
