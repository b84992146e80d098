"""Shortest-path and expert-oracle tests against brute-force references."""

import math

import numpy as np
import pytest

from blindnav.geodesy import (
    GeodesyError,
    cached_field,
    distance_field,
    distance_field_raw,
    expert_action,
    shortest_path,
    traversable_mask,
)
from blindnav.mapgen import MapGenParams, generate_map
from blindnav.world import Action, NoiseConfig, OccupancyGrid, Pose, footprint_clear, step

from oracles import bellman_ford_distances


def open_grid(h, w, res=1.0):
    cells = np.ones((h, w), dtype=bool)
    return OccupancyGrid(cells=cells, resolution=res)


class TestDistanceField:
    def test_three_by_three_diagonal(self):
        g = open_grid(3, 3)
        dist, _ = distance_field_raw(g.cells, (0, 0), 1.0)
        assert dist[2, 2] == pytest.approx(2 * math.sqrt(2), abs=1e-12)
        assert dist[0, 0] == 0.0
        assert dist[0, 2] == 2.0

    def test_four_connectivity_option(self):
        g = open_grid(3, 3)
        dist, _ = distance_field_raw(g.cells, (0, 0), 1.0, connectivity=4)
        assert dist[2, 2] == 4.0

    def test_corner_cutting_forbidden(self):
        cells = np.ones((3, 3), dtype=bool)
        cells[0, 1] = cells[1, 0] = False
        dist, _ = distance_field_raw(cells, (0, 0), 1.0)
        # (1,1) only reachable around the long way? both orth neighbors of the
        # diagonal move are blocked, and they are the only other exits.
        assert not math.isfinite(dist[1, 1])

    def test_unreachable_is_inf_and_source_zero(self):
        cells = np.ones((5, 5), dtype=bool)
        cells[:, 2] = False
        dist, parent = distance_field_raw(cells, (2, 0), 1.0)
        assert dist[2, 0] == 0.0
        assert parent[2, 0] == -1
        assert np.all(np.isinf(dist[:, 3:]))

    def test_blocked_source_raises(self):
        cells = np.ones((4, 4), dtype=bool)
        cells[1, 1] = False
        with pytest.raises(GeodesyError):
            distance_field_raw(cells, (1, 1), 1.0)

    def test_matches_bellman_ford_exactly_on_random_maps(self):
        for seed in range(8):
            g = generate_map(seed, MapGenParams(height=32, width=32))
            trav = traversable_mask(g.cells, 0.15, g.resolution)
            free = np.argwhere(trav)
            src = tuple(free[np.random.default_rng(seed).integers(len(free))])
            dist, _ = distance_field_raw(trav, src, g.resolution)
            ref = bellman_ford_distances(trav, src, g.resolution)
            assert np.array_equal(dist, ref, equal_nan=True), f"seed {seed} mismatch"

    def test_clearance_erosion_matches_footprint_test(self):
        g = generate_map(2)
        trav = traversable_mask(g.cells, 0.15, g.resolution)
        rng = np.random.default_rng(0)
        cells = np.argwhere(g.cells)
        for r, c in cells[rng.permutation(len(cells))[:200]]:
            x, y = g.cell_center(r, c)
            assert trav[r, c] == footprint_clear(g, x, y, 0.15)


class TestFieldProperties:
    def _random_field(self, seed):
        g = generate_map(seed)
        f0 = None
        free = None
        trav = traversable_mask(g.cells, 0.15, g.resolution)
        free = np.argwhere(trav)
        rng = np.random.default_rng(seed + 1)
        r, c = free[rng.integers(len(free))]
        f0 = distance_field(g, g.cell_center(r, c))
        return g, trav, free, f0, rng

    def test_euclidean_lower_bound(self):
        g, trav, free, field, rng = self._random_field(5)
        diag = g.resolution * math.sqrt(2)
        sx, sy = field.source
        for r, c in free[rng.permutation(len(free))[:300]]:
            d = field.dist[r, c]
            if math.isfinite(d):
                x, y = g.cell_center(r, c)
                assert d >= math.hypot(x - sx, y - sy) - diag

    def test_symmetry_within_tolerance(self):
        g, trav, free, field, rng = self._random_field(6)
        diag = g.resolution * math.sqrt(2)
        for _ in range(40):
            (r1, c1), (r2, c2) = free[rng.integers(len(free), size=2)]
            fa = distance_field(g, g.cell_center(r1, c1))
            d_ab = fa.dist[r2, c2]
            fb = distance_field(g, g.cell_center(r2, c2))
            d_ba = fb.dist[r1, c1]
            if math.isfinite(d_ab) or math.isfinite(d_ba):
                assert abs(d_ab - d_ba) <= diag + 1e-9

    def test_triangle_inequality(self):
        g, trav, free, field, rng = self._random_field(7)
        diag = g.resolution * math.sqrt(2)
        pts = free[rng.permutation(len(free))[:12]]
        fields = {tuple(p): distance_field(g, g.cell_center(*p)) for p in pts}
        for a in map(tuple, pts[:4]):
            for b in map(tuple, pts[4:8]):
                for c in map(tuple, pts[8:]):
                    dab = fields[a].dist[b]
                    dbc = fields[b].dist[c]
                    dac = fields[a].dist[c]
                    if all(map(math.isfinite, (dab, dbc, dac))):
                        assert dac <= dab + dbc + diag + 1e-9

    def test_cached_field_reuses_instance(self):
        g = generate_map(1)
        trav = traversable_mask(g.cells, 0.15, g.resolution)
        r, c = np.argwhere(trav)[0]
        p = g.cell_center(r, c)
        f1 = cached_field(g, p)
        f2 = cached_field(g, (p[0] + 0.01, p[1] + 0.01))  # same cell
        assert f1 is f2


class TestShortestPath:
    def test_identity_path(self):
        g = open_grid(3, 3)
        trav = g.cells
        f = distance_field(g, (0.5, 0.5), clearance=0.0)
        p = shortest_path(f, (0.5, 0.5))
        assert p.cells == [(0, 0)]
        assert p.length == 0.0

    def test_corner_to_corner_length(self):
        g = open_grid(3, 3)
        f = distance_field(g, (0.5, 0.5), clearance=0.0)
        p = shortest_path(f, (2.5, 2.5))
        assert p.length == pytest.approx(2 * math.sqrt(2))
        assert p.cells[0] == (0, 0) and p.cells[-1] == (2, 2)
        for (r1, c1), (r2, c2) in zip(p.cells, p.cells[1:]):
            assert max(abs(r1 - r2), abs(c1 - c2)) == 1

    def test_path_length_equals_field_distance(self):
        g = generate_map(11)
        trav = traversable_mask(g.cells, 0.15, g.resolution)
        free = np.argwhere(trav)
        rng = np.random.default_rng(3)
        r, c = free[rng.integers(len(free))]
        f = distance_field(g, g.cell_center(r, c))
        for rr, cc in free[rng.permutation(len(free))[:250]]:
            if math.isfinite(f.dist[rr, cc]):
                p = shortest_path(f, g.cell_center(rr, cc))
                assert p.length == f.dist[rr, cc]

    def test_unreachable_target_raises(self):
        cells = np.ones((5, 5), dtype=bool)
        cells[:, 2] = False
        g = OccupancyGrid(cells=cells, resolution=1.0)
        f = distance_field(g, (0.5, 0.5), clearance=0.0)
        with pytest.raises(GeodesyError):
            shortest_path(f, (4.5, 4.5))


def expert_rollout(grid, start_pose, goal, max_steps=600):
    """Noiseless closed-loop expert run; returns (success, steps, length)."""
    field = cached_field(grid, goal)
    pose = start_pose.copy()
    rng = np.random.default_rng(0)
    travelled = 0.0
    for t in range(max_steps):
        act = expert_action(pose, goal, field)
        if act == Action.STOP:
            ok = math.hypot(goal[0] - pose.x, goal[1] - pose.y) <= 0.2
            return ok, t + 1, travelled
        new, collided, _ = step(grid, pose, act, NoiseConfig.zero(), rng)
        travelled += math.hypot(new.x - pose.x, new.y - pose.y)
        pose = new
    return False, max_steps, travelled


class TestExpert:
    def test_forward_in_open_corridor(self):
        cells = np.zeros((7, 40), dtype=bool)
        cells[2:5, :] = True
        g = OccupancyGrid(cells=cells, resolution=0.1)
        goal = (3.0, 0.35)
        f = distance_field(g, goal, clearance=0.0)
        act = expert_action(Pose(0.5, 0.35, 0.0), goal, f)
        assert act == Action.FORWARD

    def test_goal_directly_behind_turns_left(self):
        cells = np.zeros((7, 40), dtype=bool)
        cells[2:5, :] = True
        g = OccupancyGrid(cells=cells, resolution=0.1)
        goal = (0.5, 0.35)
        f = distance_field(g, goal, clearance=0.0)
        act = expert_action(Pose(3.0, 0.35, 0.0), goal, f)
        assert act == Action.TURN_LEFT

    def test_stop_inside_success_radius(self):
        g = open_grid(30, 30, res=0.1)
        goal = (1.5, 1.5)
        f = distance_field(g, goal, clearance=0.0)
        assert expert_action(Pose(1.4, 1.5, 2.0), goal, f) == Action.STOP
        assert expert_action(Pose(1.2, 1.5, 0.0), goal, f) != Action.STOP

    def test_closure_and_near_optimality_on_random_maps(self):
        total = 0
        succ = 0
        spl_terms = []
        for seed in range(10):
            g = generate_map(seed)
            trav = traversable_mask(g.cells, 0.15, g.resolution)
            free = np.argwhere(trav)
            rng = np.random.default_rng(seed + 100)
            tries = 0
            while tries < 20:
                (r1, c1), (r2, c2) = free[rng.integers(len(free), size=2)]
                start = g.cell_center(r1, c1)
                goal = g.cell_center(r2, c2)
                f = cached_field(g, goal)
                d = f.dist[r1, c1]
                if not math.isfinite(d) or not 0.5 <= d <= 5.0:
                    tries += 1
                    continue
                tries += 1
                total += 1
                budget = int(math.ceil(d / 0.25) + math.ceil(2 * math.pi / math.radians(10)) * 3)
                pose = Pose(start[0], start[1], rng.uniform(0, 2 * math.pi))
                ok, steps, travelled = expert_rollout(g, pose, goal, max_steps=budget)
                if ok:
                    succ += 1
                    spl_terms.append(d / max(travelled, d))
        assert total >= 50
        assert succ / total >= 0.99
        assert np.mean(spl_terms) >= 0.90
