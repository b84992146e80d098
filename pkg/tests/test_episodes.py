import json
import math

import numpy as np
import pytest

from blindnav.episodes import (
    EpisodeConstraints,
    EpisodeError,
    LongEpisode,
    LongSegment,
    MiningConfig,
    ShortSegment,
    Subgoal,
    Waypoint,
    episode_to_dict,
    flatten,
    load_episodes,
    mine_subgoals,
    sample_long_episode,
    save_episodes,
)
from blindnav.geodesy import cached_field
from blindnav.mapgen import generate_map
from blindnav.world import OccupancyGrid, Pose


def _toy_episode(n_waypoints, subgoals_per):
    wps = []
    for i in range(n_waypoints):
        sgs = [Subgoal(position=(float(i), float(j)), d_e=3.0, d_g=4.8)
               for j in range(subgoals_per)]
        wps.append(Waypoint(position=(1.0 + i, 1.0), arc_length=3.0 * (i + 1), subgoals=sgs))
    return LongEpisode(map_id="toy", seed=0, start=Pose(0.5, 0.5, 0.0),
                       goal=(9.0, 9.0), gt_path_length=12.0, waypoints=wps)


class TestFlatten:
    def test_one_waypoint_two_subgoals(self):
        plan = flatten(_toy_episode(1, 2))
        kinds = [(type(s).__name__, getattr(s, "index", None),
                  getattr(s, "waypoint_index", None), getattr(s, "subgoal_index", None))
                 for s in plan.segments]
        assert kinds == [
            ("LongSegment", 0, None, None),
            ("ShortSegment", None, 0, 0),
            ("ShortSegment", None, 0, 1),
            ("LongSegment", 1, None, None),
        ]
        assert plan.segments[-1].is_final and not plan.segments[0].is_final

    def test_no_waypoints_single_leg(self):
        plan = flatten(_toy_episode(0, 0))
        assert len(plan.segments) == 1
        assert isinstance(plan.segments[0], LongSegment)
        assert plan.segments[0].is_final
        assert plan.segments[0].target == (9.0, 9.0)

    def test_two_waypoints_one_subgoal_each(self):
        plan = flatten(_toy_episode(2, 1))
        pattern = [type(s).__name__ for s in plan.segments]
        assert pattern == ["LongSegment", "ShortSegment", "LongSegment",
                           "ShortSegment", "LongSegment"]
        assert [s.index for s in plan.segments if isinstance(s, LongSegment)] == [0, 1, 2]

    def test_short_segments_teleport_back(self):
        plan = flatten(_toy_episode(2, 3))
        assert all(s.teleport_back for s in plan.segments if isinstance(s, ShortSegment))

    def test_stripping_shorts_leaves_long_chain(self):
        ep = _toy_episode(3, 4)
        plan = flatten(ep)
        longs = [s for s in plan.segments if isinstance(s, LongSegment)]
        assert [s.target for s in longs] == [w.position for w in ep.waypoints] + [ep.goal]


class TestMining:
    def setup_method(self):
        self.grid = generate_map(7)
        self.cfg = MiningConfig()

    def _pick_waypoint(self):
        from blindnav.geodesy import traversable_mask
        trav = np.argwhere(traversable_mask(self.grid.cells, 0.15, self.grid.resolution))
        r, c = trav[len(trav) // 2]
        return self.grid.cell_center(r, c)

    def test_constraints_hold(self):
        wp = self._pick_waypoint()
        rng = np.random.default_rng(3)
        subgoals, shortfall = mine_subgoals(self.grid, wp, self.cfg, rng)
        assert len(subgoals) + shortfall == self.cfg.subgoals_per_waypoint
        fld = cached_field(self.grid, wp)
        for sg in subgoals:
            d_e = math.hypot(sg.position[0] - wp[0], sg.position[1] - wp[1])
            assert self.cfg.band[0] <= d_e <= self.cfg.band[1]
            assert sg.d_e == pytest.approx(d_e)
            assert sg.ratio >= self.cfg.ratio_threshold
            r, c = self.grid.cell_of(*sg.position)
            assert sg.d_g == fld.dist[r, c]

    def test_no_duplicate_cells(self):
        wp = self._pick_waypoint()
        subgoals, _ = mine_subgoals(self.grid, wp, self.cfg, np.random.default_rng(5))
        cells = [self.grid.cell_of(*s.position) for s in subgoals]
        assert len(cells) == len(set(cells))

    def test_deterministic_per_stream(self):
        wp = self._pick_waypoint()
        a, _ = mine_subgoals(self.grid, wp, self.cfg, np.random.default_rng(11))
        b, _ = mine_subgoals(self.grid, wp, self.cfg, np.random.default_rng(11))
        assert a == b

    def test_empty_band_reports_full_shortfall(self):
        cells = np.zeros((16, 16), dtype=bool)
        cells[1:-1, 1:-1] = True
        tiny = OccupancyGrid(cells=cells, resolution=0.1, seed=0, params={})
        subgoals, shortfall = mine_subgoals(tiny, (0.8, 0.8), self.cfg,
                                            np.random.default_rng(0))
        assert subgoals == [] and shortfall == self.cfg.subgoals_per_waypoint

    def test_open_map_has_no_detours(self):
        cells = np.zeros((64, 64), dtype=bool)
        cells[1:-1, 1:-1] = True
        open_grid = OccupancyGrid(cells=cells, resolution=0.1, seed=0, params={})
        subgoals, shortfall = mine_subgoals(open_grid, (3.2, 3.2), self.cfg,
                                            np.random.default_rng(0))
        assert subgoals == [] and shortfall == self.cfg.subgoals_per_waypoint


class TestSampling:
    def setup_method(self):
        self.grid = generate_map(12)

    def test_constraints_and_fields(self):
        ep = sample_long_episode(self.grid, episode_seed=100, map_id="m12")
        con = EpisodeConstraints()
        assert con.geodesic_band[0] <= ep.gt_path_length <= con.geodesic_band[1]
        d_e = math.hypot(ep.goal[0] - ep.start.x, ep.goal[1] - ep.start.y)
        assert ep.gt_path_length / d_e >= con.min_detour_ratio
        fld = cached_field(self.grid, (ep.start.x, ep.start.y))
        gr, gc = self.grid.cell_of(*ep.goal)
        assert ep.gt_path_length == pytest.approx(fld.dist[gr, gc])

    def test_waypoint_spacing(self):
        spacing = MiningConfig().waypoint_spacing
        quantum = self.grid.resolution * math.sqrt(2.0)
        found = 0
        for seed in range(40):
            try:
                ep = sample_long_episode(self.grid, episode_seed=seed)
            except EpisodeError:
                continue
            found += 1
            arcs = [w.arc_length for w in ep.waypoints]
            assert arcs == sorted(arcs)
            for arc in arcs:
                k = round(arc / spacing)
                assert k >= 1
                assert abs(arc - k * spacing) <= quantum + 1e-9
                assert arc < ep.gt_path_length
        assert found >= 20

    def test_waypoints_lie_on_path(self):
        ep = sample_long_episode(self.grid, episode_seed=100)
        fld = cached_field(self.grid, (ep.start.x, ep.start.y))
        from blindnav.geodesy import shortest_path
        points = set(shortest_path(fld, ep.goal).points)
        for w in ep.waypoints:
            assert w.position in points

    def test_deterministic(self):
        a = sample_long_episode(self.grid, episode_seed=77, map_id="m")
        b = sample_long_episode(self.grid, episode_seed=77, map_id="m")
        assert episode_to_dict(a) == episode_to_dict(b)

    def test_unsatisfiable_raises(self):
        con = EpisodeConstraints(geodesic_band=(14.9, 15.0), max_tries=30)
        with pytest.raises(EpisodeError):
            sample_long_episode(self.grid, episode_seed=0, constraints=con)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        grid = generate_map(12)
        eps = [sample_long_episode(grid, episode_seed=s, map_id="m12")
               for s in (100, 101)]
        p = tmp_path / "eps.jsonl"
        save_episodes(p, eps)
        loaded = load_episodes(p)
        assert [episode_to_dict(e) for e in loaded] == [episode_to_dict(e) for e in eps]

    def test_byte_identical(self, tmp_path):
        grid = generate_map(12)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (pa, pb):
            save_episodes(p, [sample_long_episode(grid, episode_seed=9, map_id="m12")])
        assert pa.read_bytes() == pb.read_bytes()

    def test_schema_mismatch_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        ep = sample_long_episode(generate_map(12), episode_seed=100)
        d = episode_to_dict(ep)
        d["schema"] = 999
        p.write_text(json.dumps(d) + "\n")
        with pytest.raises(EpisodeError):
            load_episodes(p)
