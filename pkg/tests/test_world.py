"""World model tests: kinematics, collision, ray sensor, noise, map I/O."""

import math

import numpy as np
import pytest

from blindnav.mapgen import MapGenParams, generate_map
from blindnav.world import (
    AGENT_RADIUS_M,
    Action,
    NoiseConfig,
    OccupancyGrid,
    Pose,
    SeenMask,
    SensorConfig,
    footprint_cells,
    footprint_clear,
    load_pgm,
    observe,
    raycast,
    save_pgm,
    step,
    wrap_to_pi,
)


def open_grid(h=40, w=40, res=0.1):
    cells = np.ones((h, w), dtype=bool)
    cells[0, :] = cells[-1, :] = False
    cells[:, 0] = cells[:, -1] = False
    return OccupancyGrid(cells=cells, resolution=res)


def rng():
    return np.random.default_rng(1234)


class TestKinematics:
    def test_forward_advances_quarter_meter_along_heading(self):
        g = open_grid()
        p = Pose(2.0, 2.0, math.radians(30))
        q, collided, stopped = step(g, p, Action.FORWARD, NoiseConfig.zero(), rng())
        assert not collided and not stopped
        assert q.x == pytest.approx(2.0 + 0.25 * math.cos(math.radians(30)))
        assert q.y == pytest.approx(2.0 + 0.25 * math.sin(math.radians(30)))
        assert q.heading == p.heading

    def test_turns_are_ten_degrees_and_wrap(self):
        g = open_grid()
        p = Pose(2.0, 2.0, math.radians(355))
        left, _, _ = step(g, p, Action.TURN_LEFT, NoiseConfig.zero(), rng())
        right, _, _ = step(g, p, Action.TURN_RIGHT, NoiseConfig.zero(), rng())
        assert left.heading == pytest.approx(math.radians(5))
        assert right.heading == pytest.approx(math.radians(345))
        assert (left.x, left.y) == (p.x, p.y)

    def test_stop_sets_flag_and_freezes_pose(self):
        g = open_grid()
        p = Pose(1.0, 1.5, 0.2)
        q, collided, stopped = step(g, p, Action.STOP, NoiseConfig.zero(), rng())
        assert stopped and not collided
        assert (q.x, q.y, q.heading) == (p.x, p.y, p.heading)

    def test_blocked_forward_keeps_pose_and_reports_collision(self):
        g = open_grid()
        # Wall column at x in [2.0, 2.1); agent just in front of it, facing it.
        g.cells[:, 20] = False
        p = Pose(1.80, 2.0, 0.0)
        q, collided, stopped = step(g, p, Action.FORWARD, NoiseConfig.zero(), rng())
        assert collided and not stopped
        assert (q.x, q.y, q.heading) == (p.x, p.y, p.heading)

    def test_no_sliding_partial_motion(self):
        g = open_grid()
        g.cells[:, 20] = False
        p = Pose(1.80, 2.0, math.radians(40))  # oblique approach still fully rejected
        q, collided, _ = step(g, p, Action.FORWARD, NoiseConfig.zero(), rng())
        assert collided
        assert (q.x, q.y) == (p.x, p.y)


class TestFootprint:
    def test_disc_at_cell_center_covers_three_by_three(self):
        g = open_grid()
        x, y = g.cell_center(10, 10)
        rows, cols = footprint_cells(g, x, y, AGENT_RADIUS_M)
        got = set(zip(rows.tolist(), cols.tolist()))
        want = {(r, c) for r in range(9, 12) for c in range(9, 12)}
        assert got == want

    def test_touching_boundary_is_not_overlap(self):
        g = open_grid()
        x, y = g.cell_center(10, 10)
        g.cells[10, 12] = False  # nearest point exactly 0.15 m away
        assert footprint_clear(g, x, y)
        g.cells[10, 11] = False  # 0.05 m away
        assert not footprint_clear(g, x, y)

    def test_outside_world_is_blocked(self):
        g = open_grid()
        assert not footprint_clear(g, 0.05, 2.0)
        assert not footprint_clear(g, g.extent[0] - 0.05, 2.0)


class TestRaycast:
    def test_wall_hit_distance_is_exact(self):
        g = open_grid()
        g.cells[:, 30] = False  # wall face at x = 3.0
        d = raycast(g.cells, g.resolution, (2.0, 2.0), np.array([0.0]), 5.0)
        assert d[0] == pytest.approx(1.0, abs=1e-12)

    def test_max_range_cap(self):
        g = open_grid(80, 80)
        d = raycast(g.cells, g.resolution, (4.0, 4.0), np.array([0.0]), 5.0)
        assert d[0] <= 5.0
        # nearest wall along +x is at 7.9 - 4.0 = 3.9 > max range if world bigger
        g2 = open_grid(200, 200)
        d2 = raycast(g2.cells, g2.resolution, (4.0, 4.0), np.array([0.0]), 5.0)
        assert d2[0] == 5.0

    def test_diagonal_hit_through_corner(self):
        g = open_grid()
        g.cells[25, 25] = False
        # Ray from the corner point of that cell's diagonal neighbour, at 45 deg.
        d = raycast(g.cells, g.resolution, (2.3, 2.3), np.array([math.pi / 4]), 5.0)
        assert d[0] == pytest.approx(math.sqrt(2) * 0.2, abs=1e-9)

    def test_matches_dense_sampling_oracle_on_random_maps(self):
        sensor = SensorConfig()
        for seed in range(6):
            g = generate_map(seed, MapGenParams(height=48, width=48))
            free = np.argwhere(g.cells)
            r = np.random.default_rng(seed)
            row, col = free[r.integers(len(free))]
            x, y = g.cell_center(row, col)
            angles = r.uniform(0, 2 * math.pi, size=32)
            fast = raycast(g.cells, g.resolution, (x, y), angles, sensor.max_range)
            # Walk each ray in 1 mm increments until a blocked cell is entered.
            for a, dref in zip(angles, fast):
                t = 0.0
                hit = sensor.max_range
                while t < sensor.max_range:
                    t += 0.001
                    rr = int((y + t * math.sin(a)) // g.resolution)
                    cc = int((x + t * math.cos(a)) // g.resolution)
                    if not (0 <= rr < g.height and 0 <= cc < g.width) or not g.cells[rr, cc]:
                        hit = t
                        break
                assert abs(dref - min(hit, sensor.max_range)) <= 2e-3

    def test_ray_fan_spans_fov_left_to_right(self):
        s = SensorConfig()
        offs = s.ray_offsets()
        assert len(offs) == 64
        assert offs[0] == pytest.approx(math.pi / 4)
        assert offs[-1] == pytest.approx(-math.pi / 4)
        assert np.all(np.diff(offs) < 0)

    def test_compiled_batch_matches_reference_bit_exactly(self):
        from blindnav.world import _raycast_batch_reference, raycast_batch

        rng = np.random.default_rng(5)
        maps = [generate_map(s) for s in range(3)]
        nav = np.stack([m.cells for m in maps])
        res = maps[0].resolution
        for trial in range(10):
            n = int(rng.integers(1, 150))
            origins = rng.uniform(0.0, 6.4, size=(n, 2))
            env_idx = rng.integers(0, 3, size=n)
            angles = rng.uniform(0, 2 * math.pi, size=n)
            k = min(8, n)
            axis = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2,
                    math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4]
            angles[:k] = axis[:k]
            origins[: k // 2] = np.floor(origins[: k // 2] / res) * res
            seen_a = np.zeros_like(nav)
            seen_b = np.zeros_like(nav)
            a = raycast_batch(nav, res, origins, env_idx, angles, 5.0, seen_a)
            b = _raycast_batch_reference(nav, res, origins, env_idx, angles, 5.0, seen_b)
            assert np.array_equal(a, b)
            assert np.array_equal(seen_a, seen_b)


class TestObserve:
    def test_goal_vector_distance_and_bearing(self):
        g = open_grid()
        p = Pose(1.0, 1.0, math.pi / 2)
        obs = observe(g, p, (1.0, 3.0), SensorConfig(), NoiseConfig.zero(), rng())
        assert obs.goal_vector[0] == pytest.approx(2.0)
        assert obs.goal_vector[1] == pytest.approx(0.0)
        obs2 = observe(g, p, (2.0, 1.0), SensorConfig(), NoiseConfig.zero(), rng())
        assert obs2.goal_vector[1] == pytest.approx(-math.pi / 2)

    def test_truncation_clamps_far_ranges_high_not_zero(self):
        g = open_grid(80, 80)
        p = Pose(4.0, 4.0, 0.0)
        clean = observe(g, p, (5.0, 5.0), SensorConfig(), NoiseConfig.zero(), rng())
        trunc = observe(g, p, (5.0, 5.0), SensorConfig(),
                        NoiseConfig(range_trunc=3.0), rng())
        far = clean.ranges > 3.0
        assert far.any()
        assert np.all(trunc.ranges[far] == 3.0)
        assert np.array_equal(trunc.ranges[~far], clean.ranges[~far])

    def test_zero_noise_is_bit_exact_and_draws_nothing(self):
        g = generate_map(3)
        free = np.argwhere(g.cells)
        x, y = g.cell_center(*free[len(free) // 2])
        p = Pose(x, y, 1.1)
        r1, r2 = np.random.default_rng(7), np.random.default_rng(99)
        o1 = observe(g, p, (1.0, 1.0), SensorConfig(), NoiseConfig.zero(), r1)
        o2 = observe(g, p, (1.0, 1.0), SensorConfig(), NoiseConfig.zero(), r2)
        assert np.array_equal(o1.ranges, o2.ranges)
        # generator untouched: next draws agree with fresh generators
        assert np.random.default_rng(7).random() == r1.random()
        q1, _, _ = step(g, p, Action.FORWARD, NoiseConfig.zero(), r2)
        assert np.random.default_rng(99).random() == r2.random()

    def test_noise_is_seed_deterministic(self):
        g = generate_map(3)
        free = np.argwhere(g.cells)
        x, y = g.cell_center(*free[0])
        p = Pose(x, y, 0.3)
        nc = NoiseConfig.noisy()
        a = observe(g, p, (1.0, 1.0), SensorConfig(), nc, np.random.default_rng(5))
        b = observe(g, p, (1.0, 1.0), SensorConfig(), nc, np.random.default_rng(5))
        assert np.array_equal(a.ranges, b.ranges)
        assert np.all((a.ranges >= 0) & (a.ranges <= 5.0))

    def test_seen_mask_monotone_and_marks_footprint(self):
        g = generate_map(4)
        free = np.argwhere(g.cells)
        x, y = g.cell_center(*free[len(free) // 3])
        seen = SeenMask(g)
        p = Pose(x, y, 0.0)
        observe(g, p, (1.0, 1.0), SensorConfig(), NoiseConfig.zero(), rng(), seen)
        first = seen.cells.copy()
        assert first[g.cell_of(x, y)]
        p2 = Pose(x, y, 2.0)
        observe(g, p2, (1.0, 1.0), SensorConfig(), NoiseConfig.zero(), rng(), seen)
        assert np.all(seen.cells[first])  # never un-sees
        assert seen.count() >= first.sum()


class TestActuationNoise:
    def test_forward_length_scales_with_draw(self):
        g = open_grid()
        p = Pose(2.0, 2.0, 0.0)
        nc = NoiseConfig(act_noise_intensity=0.5)
        r = np.random.default_rng(11)
        expected = 0.25 * (1.0 + np.random.default_rng(11).normal(0.0, 0.2 * 0.5))
        q, _, _ = step(g, p, Action.FORWARD, nc, r)
        assert q.x - p.x == pytest.approx(expected)

    def test_turn_angle_noise_applied_same_way(self):
        g = open_grid()
        p = Pose(2.0, 2.0, 0.0)
        nc = NoiseConfig(act_noise_intensity=1.0)
        draw = np.random.default_rng(21).normal(0.0, 0.2)
        q, _, _ = step(g, p, Action.TURN_RIGHT, nc, np.random.default_rng(21))
        assert wrap_to_pi(q.heading - p.heading) == pytest.approx(-math.radians(10) * (1 + draw))


class TestCollisionSoundness:
    def test_random_walk_never_overlaps_walls(self):
        for seed in range(4):
            g = generate_map(seed)
            free = np.argwhere(g.cells)
            r = np.random.default_rng(seed + 50)
            pose = None
            for row, col in free[r.permutation(len(free))]:
                x, y = g.cell_center(row, col)
                if footprint_clear(g, x, y):
                    pose = Pose(x, y, r.uniform(0, 2 * math.pi))
                    break
            assert pose is not None
            for _ in range(300):
                act = Action(int(r.integers(0, 3)))
                pose, collided, _ = step(g, pose, act, NoiseConfig(act_noise_intensity=0.5), r)
                assert footprint_clear(g, pose.x, pose.y), "agent footprint entered a wall"


class TestMapGen:
    def test_deterministic_and_valid(self):
        a = generate_map(17)
        b = generate_map(17)
        assert np.array_equal(a.cells, b.cells)
        a.validate()
        assert 0.2 <= a.navigable_fraction() <= 0.7
        c = generate_map(18)
        assert not np.array_equal(a.cells, c.cells)

    def test_many_seeds_produce_valid_maps(self):
        for seed in range(30):
            g = generate_map(seed)
            g.validate()


class TestMapIO:
    def test_pgm_roundtrip_bit_exact(self, tmp_path):
        g = generate_map(9)
        path = tmp_path / "m.pgm"
        save_pgm(g, path)
        h = load_pgm(path)
        assert np.array_equal(g.cells, h.cells)
        assert h.resolution == g.resolution
        assert h.seed == g.seed
        assert h.params == g.params

    def test_pgm_bytes_use_zero_and_255(self, tmp_path):
        g = generate_map(9)
        path = tmp_path / "m.pgm"
        save_pgm(g, path)
        raw = path.read_bytes()
        body = raw.split(b"255\n", 1)[1]
        vals = set(body)
        assert vals <= {0, 255}
