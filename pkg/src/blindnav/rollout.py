"""Vectorized rollout collection over parallel environment lanes.

Lanes are fixed-role (ppo or bc) for a whole run and step in lockstep, one
buffer slot at a time. Observations for all lanes are ray-cast in a single
batched call per slot, which is several times faster than per-lane casting
and bit-identical to it. Teacher-driven bc lanes never touch the networks
here; their recurrent states are produced later, at update time, by replay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agents import START_ACTION, MainAgent, goal_feature, sample_actions
from .episodes import (
    EpisodeConstraints,
    EpisodeError,
    LongEpisode,
    LongSegment,
    MiningConfig,
    ShortSegment,
    flatten,
    sample_long_episode,
)
from .geodesy import SUCCESS_RADIUS_M, cached_field, expert_action, geodesic_at
from .world import (
    Action,
    NoiseConfig,
    OccupancyGrid,
    Pose,
    SensorConfig,
    WorldError,
    apply_range_noise,
    raycast_batch,
    step,
    wrap_heading,
)

ROLE_PPO = "ppo"
ROLE_BC = "bc"

# A teacher-driven segment that runs this long has a broken expert; real
# segments finish in well under a thousand steps on desk-scale maps.
_SEGMENT_STEP_GUARD = 4000
_EPISODE_SAMPLE_TRIES = 50


@dataclass
class CollectorConfig:
    rollout_len: int = 128
    max_episode_steps: int = 500          # ppo lanes only; teacher plans run to completion
    success_radius: float = SUCCESS_RADIUS_M
    reward_success: float = 2.5
    reward_slack: float = 0.01
    sensor: SensorConfig = field(default_factory=SensorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    constraints: EpisodeConstraints = field(default_factory=EpisodeConstraints)
    mining: MiningConfig = field(default_factory=MiningConfig)
    use_shorts: bool = True               # bc lanes mine waypoints/subgoals when True


@dataclass
class RolloutBuffer:
    """Fixed-length slot storage for every lane, plus replay entry context.

    Event flags describe what happened just before the slot's observation:
    `episode_start` marks a fresh episode, `wp_arrival` a waypoint arrival
    (state snapshot point), `short_start` a short-segment begin, and
    `short_end_before` a teleport back from a finished short. `states` holds
    the recurrent state at each slot start; collection fills ppo rows, replay
    fills bc rows.
    """

    ranges: np.ndarray          # (E, L, K) f32, meters
    goal_feat: np.ndarray       # (E, L, 3) f32: distance, sin/cos bearing of slot goal
    poses: np.ndarray           # (E, L, 3) f64: x, y, heading at the slot start
    target_xy: np.ndarray       # (E, L, 2) f64: current segment target (bc), episode goal (ppo)
    actions: np.ndarray         # (E, L) i8, executed action
    expert_actions: np.ndarray  # (E, L) i8, teacher label; -1 on ppo lanes
    long_prev: np.ndarray       # (E, L) i8, previous long-slot action token (START at episode start)
    seg_prev: np.ndarray        # (E, L) i8, previous same-segment action token (START at segment start)
    is_short: np.ndarray        # (E, L) bool
    episode_start: np.ndarray   # (E, L) bool
    wp_arrival: np.ndarray      # (E, L) bool
    short_start: np.ndarray     # (E, L) bool
    short_end_before: np.ndarray  # (E, L) bool
    dones: np.ndarray           # (E, L) bool, set on the slot whose action ended the episode
    waypoint_idx: np.ndarray    # (E, L) i16, -1 outside shorts
    subgoal_idx: np.ndarray     # (E, L) i16, -1 outside shorts
    rewards: np.ndarray         # (E, L) f32, ppo lanes only
    values: np.ndarray          # (E, L) f32, ppo lanes only
    logps: np.ndarray           # (E, L) f32, ppo lanes only
    states: np.ndarray          # (E, L + 1, H) f32, recurrent state at slot starts
    bootstrap: np.ndarray       # (E,) f32, value after the last slot; 0 where done
    is_ppo: np.ndarray          # (E,) bool

    @property
    def n_envs(self) -> int:
        return self.ranges.shape[0]

    @property
    def length(self) -> int:
        return self.ranges.shape[1]

    @classmethod
    def empty(cls, n_envs: int, length: int, n_rays: int, hidden: int) -> "RolloutBuffer":
        e, l = n_envs, length
        return cls(
            ranges=np.zeros((e, l, n_rays), dtype=np.float32),
            goal_feat=np.zeros((e, l, 3), dtype=np.float32),
            poses=np.zeros((e, l, 3), dtype=np.float64),
            target_xy=np.zeros((e, l, 2), dtype=np.float64),
            actions=np.full((e, l), -1, dtype=np.int8),
            expert_actions=np.full((e, l), -1, dtype=np.int8),
            long_prev=np.full((e, l), START_ACTION, dtype=np.int8),
            seg_prev=np.full((e, l), START_ACTION, dtype=np.int8),
            is_short=np.zeros((e, l), dtype=bool),
            episode_start=np.zeros((e, l), dtype=bool),
            wp_arrival=np.zeros((e, l), dtype=bool),
            short_start=np.zeros((e, l), dtype=bool),
            short_end_before=np.zeros((e, l), dtype=bool),
            dones=np.zeros((e, l), dtype=bool),
            waypoint_idx=np.full((e, l), -1, dtype=np.int16),
            subgoal_idx=np.full((e, l), -1, dtype=np.int16),
            rewards=np.zeros((e, l), dtype=np.float32),
            values=np.zeros((e, l), dtype=np.float32),
            logps=np.zeros((e, l), dtype=np.float32),
            states=np.zeros((e, l + 1, hidden), dtype=np.float32),
            bootstrap=np.zeros(e, dtype=np.float32),
            is_ppo=np.zeros(e, dtype=bool),
        )


class _Lane:
    """One environment's episode state machine."""

    def __init__(self, index: int, role: str, maps: list[OccupancyGrid],
                 map_ids: list[str], cfg: CollectorConfig, rng: np.random.Generator):
        if role not in (ROLE_PPO, ROLE_BC):
            raise WorldError(f"unknown lane role {role!r}")
        self.index = index
        self.role = role
        self.maps = maps
        self.map_ids = map_ids
        self.cfg = cfg
        self.rng = rng
        self.grid: OccupancyGrid | None = None
        self.episode: LongEpisode | None = None
        self.plan = None
        self.seg_ptr = 0
        self.pose: Pose | None = None
        self.target: tuple[float, float] | None = None
        self.field = None
        self.goal_field = None          # ppo: field sourced at the episode goal
        self.wp_pose: Pose | None = None
        self.d_last = 0.0
        self.steps_in_episode = 0
        self.steps_in_segment = 0
        # Events produced by the previous slot's execution, consumed by the
        # next slot's prepare().
        self.pending_episode_start = True
        self.pending_short_end = False
        self.prev_long = START_ACTION
        self.prev_seg = START_ACTION

    # -- episode/segment plumbing ------------------------------------------

    def _sample_episode(self) -> None:
        want_shorts = self.role == ROLE_BC and self.cfg.use_shorts
        for _ in range(_EPISODE_SAMPLE_TRIES):
            map_i = int(self.rng.integers(len(self.maps)))
            ep_seed = int(self.rng.integers(2 ** 31))
            try:
                ep = sample_long_episode(
                    self.maps[map_i], ep_seed, self.cfg.constraints,
                    self.cfg.mining, map_id=self.map_ids[map_i],
                    with_waypoints=want_shorts,
                )
            except EpisodeError:
                continue
            self.grid = self.maps[map_i]
            self.episode = ep
            self.plan = flatten(ep)
            self.seg_ptr = 0
            self.pose = ep.start.copy()
            self.wp_pose = None
            self.steps_in_episode = 0
            self.prev_long = START_ACTION
            self._enter_segment()
            if self.role == ROLE_PPO:
                self.goal_field = cached_field(self.grid, ep.goal)
                self.d_last = geodesic_at(self.goal_field, self.pose.x, self.pose.y)
            return
        raise EpisodeError(
            f"lane {self.index}: no satisfiable episode in {_EPISODE_SAMPLE_TRIES} tries"
        )

    def _enter_segment(self) -> None:
        seg = self.plan.segments[self.seg_ptr]
        self.target = seg.target
        self.field = cached_field(self.grid, seg.target)
        self.steps_in_segment = 0
        self.prev_seg = START_ACTION

    def _at(self, target: tuple[float, float]) -> bool:
        return math.hypot(target[0] - self.pose.x, target[1] - self.pose.y) \
            <= self.cfg.success_radius

    # -- slot lifecycle ----------------------------------------------------

    def prepare(self, buf: RolloutBuffer, t: int) -> None:
        """Resolve segment events, then stamp the slot's static fields."""
        e = self.index
        if self.pending_episode_start:
            self._sample_episode()
            buf.episode_start[e, t] = True
            self.pending_episode_start = False
        if self.pending_short_end:
            buf.short_end_before[e, t] = True
            self.pending_short_end = False

        if self.role == ROLE_BC:
            # A non-final long segment ends by proximity, without a recorded
            # STOP; fire the arrival events and move on within the same slot.
            while True:
                seg = self.plan.segments[self.seg_ptr]
                if isinstance(seg, LongSegment) and not seg.is_final and self._at(seg.target):
                    buf.wp_arrival[e, t] = True
                    self.wp_pose = self.pose.copy()
                    self.seg_ptr += 1
                    self._enter_segment()
                    if isinstance(self.plan.segments[self.seg_ptr], ShortSegment):
                        buf.short_start[e, t] = True
                    continue
                break
            seg = self.plan.segments[self.seg_ptr]
            if isinstance(seg, ShortSegment):
                buf.is_short[e, t] = True
                buf.waypoint_idx[e, t] = seg.waypoint_index
                buf.subgoal_idx[e, t] = seg.subgoal_index
            goal_xy = self.target if buf.is_short[e, t] else self.episode.goal
        else:
            goal_xy = self.episode.goal
            self.target = goal_xy

        dx, dy = goal_xy[0] - self.pose.x, goal_xy[1] - self.pose.y
        bearing = math.atan2(dy, dx) - self.pose.heading
        bearing = (bearing + math.pi) % (2.0 * math.pi) - math.pi
        buf.goal_feat[e, t] = goal_feature(np.array(math.hypot(dx, dy)), np.array(bearing))
        buf.poses[e, t] = (self.pose.x, self.pose.y, self.pose.heading)
        buf.target_xy[e, t] = self.target
        buf.long_prev[e, t] = self.prev_long
        buf.seg_prev[e, t] = self.prev_seg
        if self.role == ROLE_BC:
            label = int(expert_action(self.pose, self.target, self.field,
                                      self.cfg.success_radius))
            buf.expert_actions[e, t] = label
            buf.actions[e, t] = label

    def execute(self, buf: RolloutBuffer, t: int) -> None:
        """Apply the slot's action and queue events for the next slot."""
        e = self.index
        action = Action(int(buf.actions[e, t]))
        new_pose, _collided, stopped = step(self.grid, self.pose, action,
                                            self.cfg.noise, self.rng)
        self.steps_in_episode += 1
        self.steps_in_segment += 1
        if self.steps_in_segment > _SEGMENT_STEP_GUARD:
            raise WorldError(
                f"lane {e}: segment exceeded {_SEGMENT_STEP_GUARD} steps toward "
                f"{self.target}; the teacher should have terminated"
            )

        if self.role == ROLE_PPO:
            d_new = geodesic_at(self.goal_field, new_pose.x, new_pose.y)
            success = stopped and self._at(self.episode.goal)
            buf.rewards[e, t] = (self.cfg.reward_success * float(success)
                                 - (d_new - self.d_last) - self.cfg.reward_slack)
            self.d_last = d_new
            self.pose = new_pose
            self.prev_long = int(action)
            if stopped or self.steps_in_episode >= self.cfg.max_episode_steps:
                buf.dones[e, t] = True
                self.pending_episode_start = True
            return

        self.pose = new_pose
        if buf.is_short[e, t]:
            self.prev_seg = int(action)
        else:
            self.prev_long = int(action)
            self.prev_seg = int(action)
        if not stopped:
            return
        seg = self.plan.segments[self.seg_ptr]
        if isinstance(seg, ShortSegment):
            if seg.teleport_back:
                self.pose = self.wp_pose.copy()
            self.pending_short_end = True
            self.seg_ptr += 1
            self._enter_segment()
        else:
            buf.dones[e, t] = True
            self.pending_episode_start = True


class Collector:
    """Lockstep slot-major collection across all lanes.

    For ppo lanes the main agent is forwarded (without building a graph) to
    sample actions and record values/log-probs; its recurrent state is carried
    across buffers. bc lanes record teacher actions only.
    """

    def __init__(self, maps: list[OccupancyGrid], map_ids: list[str],
                 roles: list[str], cfg: CollectorConfig, seed: int,
                 main: MainAgent | None = None):
        if not maps:
            raise WorldError("collector needs at least one map")
        shapes = {g.cells.shape for g in maps}
        if len(shapes) != 1:
            raise WorldError(f"maps must share one shape for batched raycasts, got {shapes}")
        resolutions = {g.resolution for g in maps}
        if len(resolutions) != 1:
            raise WorldError("maps must share one resolution")
        if any(r == ROLE_PPO for r in roles) and main is None:
            raise WorldError("ppo lanes need a main agent")
        self.maps = maps
        self.cfg = cfg
        self.main = main
        self.roles = list(roles)
        self.lanes = [
            _Lane(i, role, maps, map_ids, cfg,
                  np.random.default_rng(np.random.SeedSequence((seed, i))))
            for i, role in enumerate(roles)
        ]
        self.act_rng = np.random.default_rng(np.random.SeedSequence((seed, len(roles))))
        self.ppo_idx = np.array([i for i, r in enumerate(roles) if r == ROLE_PPO], dtype=np.intp)
        self.is_ppo = np.array([r == ROLE_PPO for r in roles], dtype=bool)
        self._nav_stack = np.zeros((len(roles),) + maps[0].cells.shape, dtype=bool)
        self._resolution = maps[0].resolution
        self._ray_offsets = cfg.sensor.ray_offsets()
        k = cfg.sensor.n_rays
        self._env_per_ray = np.repeat(np.arange(len(roles), dtype=np.intp), k)
        hidden = main.config.hidden if main is not None else 1
        self._r = np.zeros((len(roles), hidden), dtype=np.float32)
        self.env_steps = 0

    def _observe_all(self, buf: RolloutBuffer, t: int) -> None:
        e, k = len(self.lanes), self.cfg.sensor.n_rays
        origins = np.array([[lane.pose.x, lane.pose.y] for lane in self.lanes],
                           dtype=np.float64)
        origins = np.repeat(origins, k, axis=0)
        angles = (np.repeat([wrap_heading(lane.pose.heading) for lane in self.lanes], k)
                  + np.tile(self._ray_offsets, e))
        ranges = raycast_batch(self._nav_stack, self._resolution, origins,
                               self._env_per_ray, angles,
                               self.cfg.sensor.max_range).reshape(e, k)
        if self.cfg.noise.obs_sigma > 0 or self.cfg.noise.range_trunc > 0:
            for lane in self.lanes:
                ranges[lane.index] = apply_range_noise(
                    ranges[lane.index], self.cfg.sensor, self.cfg.noise, lane.rng)
        buf.ranges[:, t] = ranges

    def _forward_ppo(self, buf: RolloutBuffer, t: int) -> None:
        idx = self.ppo_idx
        starts = idx[buf.episode_start[idx, t]]
        self._r[starts] = 0.0
        buf.states[idx, t] = self._r[idx]
        with ad.no_grad():
            r, logits, value = self.main.step(
                buf.ranges[idx, t], buf.goal_feat[idx, t],
                buf.long_prev[idx, t].astype(np.int64), self._r[idx])
        actions, logps = sample_actions(logits.data, self.act_rng)
        self._r[idx] = r.data
        buf.actions[idx, t] = actions
        buf.logps[idx, t] = logps
        buf.values[idx, t] = value.data[:, 0]

    def _bootstrap(self, buf: RolloutBuffer) -> None:
        live = [lane for lane in self.lanes
                if lane.role == ROLE_PPO and not lane.pending_episode_start]
        if not live:
            return
        idx = np.array([lane.index for lane in live], dtype=np.intp)
        k = self.cfg.sensor.n_rays
        origins = np.array([[lane.pose.x, lane.pose.y] for lane in live], dtype=np.float64)
        angles = (np.repeat([wrap_heading(lane.pose.heading) for lane in live], k)
                  + np.tile(self._ray_offsets, len(live)))
        ranges = raycast_batch(self._nav_stack, self._resolution,
                               np.repeat(origins, k, axis=0),
                               np.repeat(idx, k), angles,
                               self.cfg.sensor.max_range).reshape(len(live), k)
        if self.cfg.noise.obs_sigma > 0 or self.cfg.noise.range_trunc > 0:
            for j, lane in enumerate(live):
                ranges[j] = apply_range_noise(ranges[j], self.cfg.sensor,
                                              self.cfg.noise, lane.rng)
        feats = np.zeros((len(live), 3), dtype=np.float32)
        for j, lane in enumerate(live):
            dx = lane.episode.goal[0] - lane.pose.x
            dy = lane.episode.goal[1] - lane.pose.y
            b = math.atan2(dy, dx) - lane.pose.heading
            b = (b + math.pi) % (2.0 * math.pi) - math.pi
            feats[j] = (math.hypot(dx, dy), math.sin(b), math.cos(b))
        prev = np.array([lane.prev_long for lane in live], dtype=np.int64)
        with ad.no_grad():
            _, _, value = self.main.step(ranges, feats, prev, self._r[idx])
        buf.bootstrap[idx] = value.data[:, 0]

    def collect(self) -> RolloutBuffer:
        cfg = self.cfg
        hidden = self.main.config.hidden if self.main is not None else 1
        buf = RolloutBuffer.empty(len(self.lanes), cfg.rollout_len,
                                  cfg.sensor.n_rays, hidden)
        buf.is_ppo[:] = self.is_ppo
        for t in range(cfg.rollout_len):
            for lane in self.lanes:
                lane.prepare(buf, t)
                self._nav_stack[lane.index] = lane.grid.cells
            self._observe_all(buf, t)
            if self.ppo_idx.size:
                self._forward_ppo(buf, t)
            for lane in self.lanes:
                lane.execute(buf, t)
        if self.ppo_idx.size:
            buf.states[self.ppo_idx, cfg.rollout_len] = self._r[self.ppo_idx]
            self._bootstrap(buf)
        self.env_steps += len(self.lanes) * cfg.rollout_len
        return buf
