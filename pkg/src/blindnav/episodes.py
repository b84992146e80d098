"""Episode sampling: long point-goal runs, waypoints, and mined detour subgoals.

A long episode walks start -> goal. Along its shortest path, waypoints are
dropped every ``waypoint_spacing`` meters of arc length; each waypoint carries
up to B mined subgoals whose geodesic distance exceeds their Euclidean
distance by a ratio threshold (targets you cannot reach by walking straight).
The flattened plan interleaves: long leg to a waypoint, all of its short
segments (each teleporting back), next long leg, and so on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .geodesy import (
    DistanceField,
    GeodesyError,
    cached_field,
    cached_traversable,
    shortest_path,
)
from .world import OccupancyGrid, Pose, WorldError

EPISODE_SCHEMA_VERSION = 1


class EpisodeError(WorldError):
    """Constraint-satisfying episode could not be sampled."""


@dataclass
class MiningConfig:
    waypoint_spacing: float = 3.0
    subgoals_per_waypoint: int = 20
    band: tuple[float, float] = (3.0, 5.0)
    ratio_threshold: float = 1.5
    oversample: int = 10

    def __post_init__(self):
        if self.band[0] <= 0 or self.band[1] < self.band[0]:
            raise EpisodeError(f"bad Euclidean band {self.band}")
        if self.ratio_threshold < 1.0:
            raise EpisodeError("ratio threshold must be >= 1")
        if self.subgoals_per_waypoint < 1 or self.oversample < 1:
            raise EpisodeError("need at least one subgoal and oversample >= 1")


@dataclass
class EpisodeConstraints:
    geodesic_band: tuple[float, float] = (2.0, 15.0)
    min_detour_ratio: float = 1.1   # geodesic / Euclidean for start-goal
    max_tries: int = 200


@dataclass
class Subgoal:
    position: tuple[float, float]
    d_e: float   # Euclidean distance from the waypoint, meters
    d_g: float   # geodesic distance from the waypoint, meters

    @property
    def ratio(self) -> float:
        return self.d_g / self.d_e


@dataclass
class Waypoint:
    position: tuple[float, float]
    arc_length: float
    subgoals: list[Subgoal] = field(default_factory=list)
    shortfall: int = 0   # how many of the B requested subgoals were not found


@dataclass
class LongEpisode:
    map_id: str
    seed: int
    start: Pose
    goal: tuple[float, float]
    gt_path_length: float
    waypoints: list[Waypoint] = field(default_factory=list)


@dataclass
class LongSegment:
    """Leg of the long path: previous waypoint (or start) to the next (or goal)."""

    index: int            # 0 = start->wp0; last = final wp -> goal
    target: tuple[float, float]
    is_final: bool        # only the final leg ends with an expert STOP at the goal


@dataclass
class ShortSegment:
    waypoint_index: int
    subgoal_index: int
    target: tuple[float, float]
    teleport_back: bool = True


@dataclass
class StepPlan:
    episode: LongEpisode
    segments: list    # LongSegment | ShortSegment, execution order
    continuity: str = "continue"


def mine_subgoals(
    grid: OccupancyGrid,
    waypoint: tuple[float, float],
    config: MiningConfig,
    rng: np.random.Generator,
) -> tuple[list[Subgoal], int]:
    """Mined subgoals for one waypoint plus the shortfall count.

    Candidates are drawn uniformly (with replacement) from traversable cells
    inside the Euclidean band; one distance field at the waypoint scores them
    all. Survivors need d_g/d_e >= threshold and reachability; the best ratios
    win, ties resolved by draw order, duplicates of a cell dropped.
    """
    try:
        fld = cached_field(grid, waypoint)
    except GeodesyError as e:
        raise EpisodeError(f"waypoint {waypoint} is blocked: {e}") from e
    rows, cols = np.nonzero(fld.traversable)
    half = grid.resolution / 2.0
    cx = cols * grid.resolution + half
    cy = rows * grid.resolution + half
    d_e = np.hypot(cx - waypoint[0], cy - waypoint[1])
    in_band = (d_e >= config.band[0]) & (d_e <= config.band[1])
    band_idx = np.nonzero(in_band)[0]
    want = config.subgoals_per_waypoint
    if band_idx.size == 0:
        return [], want
    n_cand = want * config.oversample
    picks = rng.integers(0, band_idx.size, size=n_cand)
    chosen = band_idx[picks]
    d_g = fld.dist[rows[chosen], cols[chosen]]
    d_e_c = d_e[chosen]
    ratio = d_g / d_e_c
    keep = np.isfinite(d_g) & (ratio >= config.ratio_threshold)
    # Highest ratio first; stable sort keeps draw order among exact ties.
    order = np.argsort(-ratio[keep], kind="stable")
    survivors: list[Subgoal] = []
    seen_cells = set()
    kept_idx = np.nonzero(keep)[0]
    for j in order:
        i = kept_idx[j]
        cell = (int(rows[chosen[i]]), int(cols[chosen[i]]))
        if cell in seen_cells:
            continue
        seen_cells.add(cell)
        survivors.append(
            Subgoal(position=(float(cx[chosen[i]]), float(cy[chosen[i]])),
                    d_e=float(d_e_c[i]), d_g=float(d_g[i]))
        )
        if len(survivors) == want:
            break
    return survivors, want - len(survivors)


def _place_waypoints(field_at_start: DistanceField, goal, spacing: float) -> list[tuple[tuple[float, float], float]]:
    """(position, arc_length) pairs at every `spacing` meters along the path."""
    path = shortest_path(field_at_start, goal)
    cum = [0.0]
    for (r1, c1), (r2, c2) in zip(path.cells, path.cells[1:]):
        step_len = field_at_start.resolution * (math.sqrt(2.0) if (r1 != r2 and c1 != c2) else 1.0)
        cum.append(cum[-1] + step_len)
    total = cum[-1]
    out = []
    target = spacing
    used = set()
    while target < total:
        j = int(np.argmin([abs(c - target) for c in cum]))
        if j not in used and 0 < j < len(cum) - 1:
            used.add(j)
            out.append((path.points[j], cum[j]))
        target += spacing
    return out


def sample_long_episode(
    grid: OccupancyGrid,
    episode_seed: int,
    constraints: EpisodeConstraints | None = None,
    mining: MiningConfig | None = None,
    map_id: str = "",
    with_waypoints: bool = True,
) -> LongEpisode:
    """Rejection-sample a start/goal pair, place waypoints, mine subgoals.

    Each try draws the goal uniformly over traversable cells, computes one
    distance field there, and picks the start uniformly among the cells that
    satisfy the geodesic band and detour ratio (the metric is symmetric, so
    the goal-sourced field scores every candidate start at once). Waypoint i
    mines with its own stream derived from (episode_seed, i), so mining is
    order-independent. Passing with_waypoints=False skips placement and
    mining entirely, which is what plain point-goal sampling wants.
    """
    constraints = constraints or EpisodeConstraints()
    mining = mining or MiningConfig()
    rng = np.random.default_rng(np.random.SeedSequence((episode_seed,)))
    lo, hi = constraints.geodesic_band

    trav = cached_traversable(grid)
    rows, cols = np.nonzero(trav)
    if rows.size < 2:
        raise EpisodeError("map has too little traversable space")
    half = grid.resolution / 2.0
    cx = cols * grid.resolution + half
    cy = rows * grid.resolution + half

    for _ in range(constraints.max_tries):
        j = int(rng.integers(rows.size))
        goal_xy = (float(cx[j]), float(cy[j]))
        fld_g = cached_field(grid, goal_xy)
        d_g = fld_g.dist[rows, cols]
        d_e = np.hypot(cx - goal_xy[0], cy - goal_xy[1])
        with np.errstate(invalid="ignore", divide="ignore"):
            valid = (np.isfinite(d_g) & (d_g >= lo) & (d_g <= hi) & (d_e > 0)
                     & (d_g / d_e >= constraints.min_detour_ratio))
        valid[j] = False
        cand = np.nonzero(valid)[0]
        if cand.size == 0:
            continue
        i = int(cand[rng.integers(cand.size)])
        start_xy = (float(cx[i]), float(cy[i]))
        heading = rng.uniform(0.0, 2.0 * math.pi)
        waypoints = []
        if with_waypoints:
            fld_s = cached_field(grid, start_xy)
            wp_specs = _place_waypoints(fld_s, goal_xy, mining.waypoint_spacing)
            for w_idx, (pos, arc) in enumerate(wp_specs):
                stream = np.random.default_rng(np.random.SeedSequence((episode_seed, w_idx)))
                subgoals, shortfall = mine_subgoals(grid, pos, mining, stream)
                waypoints.append(Waypoint(position=pos, arc_length=arc,
                                          subgoals=subgoals, shortfall=shortfall))
        return LongEpisode(
            map_id=map_id, seed=episode_seed,
            start=Pose(start_xy[0], start_xy[1], heading),
            goal=goal_xy, gt_path_length=float(d_g[i]), waypoints=waypoints,
        )
    raise EpisodeError(
        f"no start/goal with geodesic in [{lo}, {hi}] m and detour ratio >= "
        f"{constraints.min_detour_ratio} after {constraints.max_tries} tries"
    )


def flatten(episode: LongEpisode, continuity: str = "continue") -> StepPlan:
    """Execution order: long leg to each waypoint, its shorts, then onward."""
    segments: list = []
    for w_idx, wp in enumerate(episode.waypoints):
        segments.append(LongSegment(index=w_idx, target=wp.position, is_final=False))
        for s_idx in range(len(wp.subgoals)):
            segments.append(ShortSegment(
                waypoint_index=w_idx, subgoal_index=s_idx,
                target=wp.subgoals[s_idx].position,
            ))
    segments.append(LongSegment(index=len(episode.waypoints), target=episode.goal,
                                is_final=True))
    return StepPlan(episode=episode, segments=segments, continuity=continuity)


def episode_to_dict(ep: LongEpisode) -> dict:
    return {
        "schema": EPISODE_SCHEMA_VERSION,
        "map_id": ep.map_id,
        "seed": ep.seed,
        "start": [ep.start.x, ep.start.y, ep.start.heading],
        "goal": list(ep.goal),
        "gt_path_length": ep.gt_path_length,
        "waypoints": [
            {
                "position": list(w.position),
                "arc_length": w.arc_length,
                "shortfall": w.shortfall,
                "subgoals": [
                    {"position": list(s.position), "d_e": s.d_e, "d_g": s.d_g}
                    for s in w.subgoals
                ],
            }
            for w in ep.waypoints
        ],
    }


def episode_from_dict(d: dict) -> LongEpisode:
    if d.get("schema") != EPISODE_SCHEMA_VERSION:
        raise EpisodeError(f"unsupported episode schema {d.get('schema')!r}")
    return LongEpisode(
        map_id=d["map_id"], seed=d["seed"],
        start=Pose(*d["start"]), goal=tuple(d["goal"]),
        gt_path_length=d["gt_path_length"],
        waypoints=[
            Waypoint(
                position=tuple(w["position"]), arc_length=w["arc_length"],
                shortfall=w["shortfall"],
                subgoals=[Subgoal(position=tuple(s["position"]), d_e=s["d_e"], d_g=s["d_g"])
                          for s in w["subgoals"]],
            )
            for w in d["waypoints"]
        ],
    )


def save_episodes(path: str | FsPath, episodes: list[LongEpisode]) -> None:
    """JSON-lines, one episode per line; byte-stable for fixed inputs."""
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")


def load_episodes(path: str | FsPath) -> list[LongEpisode]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(episode_from_dict(json.loads(line)))
    return out
