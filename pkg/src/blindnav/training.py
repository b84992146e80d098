"""Losses, PPO, and the two-phase schedule over experiment presets.

Phase 1 mixes ppo lanes (clipped PPO on PointGoal) with teacher-driven bc
lanes whose buffers are replayed through the networks at update time. Replay
is where the mole's blindness is structural: its inputs are the subgoal
vector, its own previous action, and (as_observation variant) the main
agent's r snapshotted at the waypoint. Short-slot observation arrays never
reach it, under any preset.

Phase 2 drops the mole, reinitializes only the policy/value heads, and
trains pure PPO, keeping the checkpoint with the best validation success.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agents import AgentError, MainAgent, MainConfig, MoleAgent, MoleConfig
from .autodiff import AdamW, OptimConfig, ParamStore, Tensor, clip_grad_norm
from .episodes import EpisodeConstraints, MiningConfig
from .evalkit import aggregate, evaluate_policy
from .geodesy import DistanceField, geodesic_at
from .rollout import ROLE_BC, ROLE_PPO, Collector, CollectorConfig, RolloutBuffer
from .world import NoiseConfig, OccupancyGrid, Pose, SensorConfig

log = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


# ---------------------------------------------------------------------------
# Experiment presets (rows a-g): lane split and which losses are active.


@dataclass(frozen=True)
class ExperimentPreset:
    """One training recipe: env-role split plus the active loss mix."""

    name: str
    ppo_lanes: int
    bc_lanes: int
    use_shorts: bool      # teacher plans include mined short detours
    bc_long: bool         # main policy imitates the expert on long slots
    bc_short: bool        # main policy imitates on short slots (subgoal as goal)
    mole_nav: bool        # mole imitates the expert on short slots

    @property
    def total_lanes(self) -> int:
        return self.ppo_lanes + self.bc_lanes


PRESETS: dict[str, ExperimentPreset] = {
    "a": ExperimentPreset("a", 12, 0, False, False, False, False),
    "b": ExperimentPreset("b", 0, 12, False, True, False, False),
    "c": ExperimentPreset("c", 0, 12, True, True, True, False),
    "d": ExperimentPreset("d", 0, 12, True, False, False, True),
    "e": ExperimentPreset("e", 0, 12, True, True, False, True),
    "f": ExperimentPreset("f", 6, 6, True, False, False, True),
    "g": ExperimentPreset("g", 6, 6, True, False, True, True),
}


def lane_roles(preset: ExperimentPreset, n_envs: int) -> list[str]:
    """Role list for n_envs lanes, keeping the preset's ppo/bc proportions."""
    if n_envs < 1:
        raise TrainingError("need at least one environment lane")
    n_ppo = int(round(n_envs * preset.ppo_lanes / preset.total_lanes))
    if preset.ppo_lanes and n_ppo == 0:
        n_ppo = 1
    if preset.bc_lanes and n_envs - n_ppo == 0:
        n_ppo -= 1
    n_bc = n_envs - n_ppo
    if (preset.ppo_lanes and n_ppo < 1) or (preset.bc_lanes and n_bc < 1):
        raise TrainingError(
            f"preset {preset.name!r} needs both roles; n_envs={n_envs} is too small"
        )
    return [ROLE_PPO] * n_ppo + [ROLE_BC] * n_bc


@dataclass
class TrainConfig:
    preset: str = "e"
    seed: int = 0
    n_envs: int = 12
    rollout_len: int = 128
    phase1_steps: int = 2_000_000
    phase2_steps: int = 2_000_000
    continuity: str = "continue"
    communication: str = "as_observation"
    # ppo
    lr: float = 2.5e-4
    clip_ratio: float = 0.2
    ppo_epochs: int = 4
    minibatches: int = 2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    max_grad_norm: float = 0.5
    # environment
    max_episode_steps: int = 500
    sensor: SensorConfig = field(default_factory=SensorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    constraints: EpisodeConstraints = field(default_factory=EpisodeConstraints)
    mining: MiningConfig = field(default_factory=MiningConfig)
    main: MainConfig = field(default_factory=MainConfig)
    mole: MoleConfig = field(default_factory=MoleConfig)
    # phase-2 checkpoint selection
    eval_every: int = 100_000
    eval_episodes: int = 32

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise TrainingError(f"unknown preset {self.preset!r}")
        if self.continuity not in ("zero", "restore", "continue"):
            raise TrainingError(f"unknown continuity variant {self.continuity!r}")


# ---------------------------------------------------------------------------
# Reward


@dataclass
class RewardConfig:
    success_bonus: float = 2.5
    slack: float = 0.01


def compute_reward(goal_field: DistanceField, prev_pose: Pose, pose: Pose,
                   success: bool, cfg: RewardConfig | None = None) -> float:
    """success bonus minus geodesic-distance gain minus a per-step slack."""
    cfg = cfg or RewardConfig()
    d_prev = geodesic_at(goal_field, prev_pose.x, prev_pose.y)
    d_new = geodesic_at(goal_field, pose.x, pose.y)
    return cfg.success_bonus * float(success) - (d_new - d_prev) - cfg.slack


# ---------------------------------------------------------------------------
# Teacher-buffer replay: the bc and navigability losses.


@dataclass
class ReplayCarry:
    """Recurrent context carried across consecutive buffers of one run.

    Detached between buffers, so backpropagation truncates at buffer edges.
    """

    r: np.ndarray          # (B, H_main) main state per bc lane
    mole_h: np.ndarray     # (B, H_mole)
    r_wp: np.ndarray       # (B, H_main) main state snapshotted at the waypoint
    wp_valid: np.ndarray   # (B,) bool, whether r_wp holds a live snapshot

    @classmethod
    def fresh(cls, n_lanes: int, main_hidden: int, mole_hidden: int) -> "ReplayCarry":
        return cls(
            r=np.zeros((n_lanes, main_hidden), dtype=np.float32),
            mole_h=np.zeros((n_lanes, mole_hidden), dtype=np.float32),
            r_wp=np.zeros((n_lanes, main_hidden), dtype=np.float32),
            wp_valid=np.zeros(n_lanes, dtype=bool),
        )


@dataclass
class BcReplay:
    """Losses plus enough replay output to audit blindness and continuity."""

    losses: dict           # name -> scalar Tensor, keys among bc_long/bc_short/nav
    counts: dict           # name -> number of slots pooled into that loss
    mole_logits: np.ndarray | None   # (Ns, A) detached, slot-major
    mole_env: np.ndarray | None      # global env index per mole row
    mole_slot: np.ndarray | None


def _zero_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    keep = np.ones(x.shape, dtype=x.data.dtype)
    keep[rows] = 0.0
    return ad.mul(x, Tensor(keep))


def _slot_major(x: np.ndarray) -> np.ndarray:
    """(B, L, ...) -> (L*B, ...) with slot-major row order."""
    if x.ndim == 2:
        return x.T.reshape(-1)
    return x.transpose(1, 0, 2).reshape(-1, x.shape[2])


def replay_bc(main: MainAgent, mole: MoleAgent | None, buf: RolloutBuffer, *,
              bc_long: bool, bc_short: bool, mole_nav: bool,
              continuity: str = "continue",
              carry: ReplayCarry | None = None) -> BcReplay:
    """Replay a teacher buffer through the networks and build the bc losses.

    Runs slot by slot in lockstep across bc lanes, applying boundary events
    in order (episode start, short end, waypoint arrival, short start) before
    each forward. The main agent runs on long slots always and on short slots
    only when bc_short; the mole runs on short slots only, and its inputs
    never include observation arrays. buf.states rows for bc lanes are filled
    with the main state entering each slot, after event transforms.
    """
    if mole_nav and mole is None:
        raise TrainingError("mole_nav requested without a mole agent")
    bc_idx = np.nonzero(~buf.is_ppo)[0]
    if bc_idx.size == 0:
        raise TrainingError("buffer has no bc lanes to replay")
    n_b, n_l = bc_idx.size, buf.length

    is_short = buf.is_short[bc_idx]
    ep_start = buf.episode_start[bc_idx]
    wp_arr = buf.wp_arrival[bc_idx]
    s_start = buf.short_start[bc_idx]
    s_end = buf.short_end_before[bc_idx]
    labels = buf.expert_actions[bc_idx].astype(np.int64)
    if (labels < 0).any():
        raise TrainingError("bc lane rows missing expert labels")
    goal_flat = _slot_major(buf.goal_feat[bc_idx])
    long_prev = buf.long_prev[bc_idx].astype(np.int64)
    seg_prev = buf.seg_prev[bc_idx].astype(np.int64)

    if carry is None:
        carry = ReplayCarry.fresh(n_b, main.config.hidden,
                                  mole.hidden if mole is not None else 1)
    r = Tensor(carry.r.copy())
    h = Tensor(carry.mole_h.copy())
    r_wp = Tensor(carry.r_wp.copy())
    wp_valid = carry.wp_valid.copy()

    # Batched input projections; only the state-dependent half of each GRU
    # step stays inside the slot loop.
    main_mask = np.ones_like(is_short) if bc_short else ~is_short
    mask_flat = _slot_major(main_mask)
    ranges_flat = _slot_major(buf.ranges[bc_idx])
    prev_main_flat = _slot_major(np.where(is_short, seg_prev, long_prev))
    gates_main = main.precompute_gates(ranges_flat[mask_flat],
                                       goal_flat[mask_flat],
                                       prev_main_flat[mask_flat])
    offs_m = np.concatenate([[0], np.cumsum(main_mask.sum(axis=0))])

    run_mole = mole_nav and bool(is_short.any())
    if run_mole:
        w_x, w_r = mole.input_split()
        mole_flat = _slot_major(is_short)
        gates_mole = mole.precompute_gates(goal_flat[mole_flat],
                                           _slot_major(seg_prev)[mole_flat],
                                           w_x=w_x)
        offs_o = np.concatenate([[0], np.cumsum(is_short.sum(axis=0))])

    pools: dict[str, list] = {"bc_long": [], "bc_short": [], "nav": []}
    pool_labels: dict[str, list] = {"bc_long": [], "bc_short": [], "nav": []}
    mole_env: list = []
    mole_slot: list = []

    for t in range(n_l):
        starts = np.nonzero(ep_start[:, t])[0]
        if starts.size:
            r = _zero_rows(r, starts)
            h = _zero_rows(h, starts)
            r_wp = _zero_rows(r_wp, starts)
            wp_valid[starts] = False
        ends = np.nonzero(s_end[:, t])[0]
        if ends.size:
            if continuity == "zero":
                r = _zero_rows(r, ends)
            elif continuity == "restore":
                if not wp_valid[ends].all():
                    raise TrainingError("restore continuity before any waypoint save")
                r = ad.scatter_rows(r, ends, ad.gather_rows(r_wp, ends))
        arrivals = np.nonzero(wp_arr[:, t])[0]
        if arrivals.size:
            # Snapshot before any transform: the mole sees the state the main
            # agent actually accumulated on the way in.
            r_wp = ad.scatter_rows(r_wp, arrivals, ad.gather_rows(r, arrivals))
            wp_valid[arrivals] = True
            if continuity == "zero":
                r = _zero_rows(r, arrivals)
        mole_starts = np.nonzero(is_short[:, t] & (s_start[:, t] | s_end[:, t]))[0]
        if mole_starts.size and mole is not None:
            init = mole.init_state(ad.gather_rows(r_wp, mole_starts))
            h = ad.scatter_rows(h, mole_starts, init)

        buf.states[bc_idx, t] = r.data

        rows = np.nonzero(main_mask[:, t])[0]
        if rows.size:
            g_t = ad.gather_rows(gates_main, np.arange(offs_m[t], offs_m[t + 1]))
            r_new = ad.gru_step_pre(main.gru, g_t, ad.gather_rows(r, rows))
            r = ad.scatter_rows(r, rows, r_new)
            if bc_long:
                pos = np.nonzero(~is_short[rows, t])[0]
                if pos.size:
                    pools["bc_long"].append(ad.gather_rows(r_new, pos))
                    pool_labels["bc_long"].append(labels[rows[pos], t])
            if bc_short:
                pos = np.nonzero(is_short[rows, t])[0]
                if pos.size:
                    pools["bc_short"].append(ad.gather_rows(r_new, pos))
                    pool_labels["bc_short"].append(labels[rows[pos], t])
        if run_mole:
            mrows = np.nonzero(is_short[:, t])[0]
            if mrows.size:
                g_t = ad.gather_rows(gates_mole, np.arange(offs_o[t], offs_o[t + 1]))
                if w_r is not None:
                    g_t = ad.add(g_t, ad.matmul(ad.gather_rows(r_wp, mrows), w_r))
                h_new = ad.gru_step_pre(mole.gru, g_t, ad.gather_rows(h, mrows))
                h = ad.scatter_rows(h, mrows, h_new)
                pools["nav"].append(h_new)
                pool_labels["nav"].append(labels[mrows, t])
                mole_env.extend(bc_idx[mrows])
                mole_slot.extend([t] * mrows.size)

    buf.states[bc_idx, n_l] = r.data
    carry.r = r.data.copy()
    carry.mole_h = h.data.copy()
    carry.r_wp = r_wp.data.copy()
    carry.wp_valid = wp_valid

    losses: dict[str, Tensor] = {}
    counts: dict[str, int] = {}
    mole_logits = None
    wanted = [name for name, on in
              (("bc_long", bc_long), ("bc_short", bc_short), ("nav", mole_nav)) if on]
    for name in wanted:
        if not pools[name]:
            log.warning("loss %s has no slots in scope; contributing zero", name)
            losses[name] = Tensor(np.float32(0.0))
            counts[name] = 0
            continue
        states = ad.concat(pools[name], axis=0)
        targets = np.concatenate(pool_labels[name])
        if name == "nav":
            logits = mole.head(states)
            mole_logits = logits.data.copy()
        else:
            logits = main.heads(states)[0]
        losses[name] = ad.mean(ad.cross_entropy(logits, targets))
        counts[name] = targets.size

    return BcReplay(
        losses=losses,
        counts=counts,
        mole_logits=mole_logits,
        mole_env=np.asarray(mole_env, dtype=np.int64) if mole_env else None,
        mole_slot=np.asarray(mole_slot, dtype=np.int64) if mole_slot else None,
    )


def nav_loss(main: MainAgent, mole: MoleAgent, buf: RolloutBuffer,
             continuity: str = "continue",
             carry: ReplayCarry | None = None) -> Tensor:
    """Mean cross-entropy of mole logits vs expert actions over short slots."""
    rep = replay_bc(main, mole, buf, bc_long=False, bc_short=False,
                    mole_nav=True, continuity=continuity, carry=carry)
    return rep.losses["nav"]


def bc_loss(main: MainAgent, buf: RolloutBuffer, scope: str = "long",
            continuity: str = "continue",
            carry: ReplayCarry | None = None) -> Tensor:
    """Mean cross-entropy of the main policy vs expert actions over `scope`.

    scope is "long" or "long+short"; on short slots the main agent is
    conditioned on the subgoal as its goal vector.
    """
    if scope not in ("long", "long+short"):
        raise TrainingError(f"unknown bc scope {scope!r}")
    both = scope == "long+short"
    rep = replay_bc(main, None, buf, bc_long=True, bc_short=both,
                    mole_nav=False, continuity=continuity, carry=carry)
    total = rep.losses["bc_long"]
    if both:
        n_l, n_s = rep.counts["bc_long"], rep.counts["bc_short"]
        if n_l + n_s:
            # Re-weight the per-scope means into one mean over all slots.
            w_l = np.float32(n_l / (n_l + n_s))
            w_s = np.float32(n_s / (n_l + n_s))
            total = ad.add(ad.mul(total, Tensor(w_l)),
                           ad.mul(rep.losses["bc_short"], Tensor(w_s)))
    return total


def bc_update(main: MainAgent, mole: MoleAgent | None, optim: AdamW,
              buf: RolloutBuffer, cfg: TrainConfig, preset: ExperimentPreset,
              carry: ReplayCarry) -> dict:
    """One gradient step on the preset's bc/nav loss mix."""
    rep = replay_bc(main, mole, buf, bc_long=preset.bc_long,
                    bc_short=preset.bc_short, mole_nav=preset.mole_nav,
                    continuity=cfg.continuity, carry=carry)
    stats = {}
    for name, loss in rep.losses.items():
        stats[f"loss_{name}"] = float(loss.item())
        stats[f"rows_{name}"] = float(rep.counts[name])
    # The main-policy scopes form one mean over all slots in scope; the nav
    # loss adds on top (hybrid loss is the sum of the two parts).
    parts = []
    n_long = rep.counts.get("bc_long", 0)
    n_short = rep.counts.get("bc_short", 0)
    if n_long and n_short:
        w_l = np.float32(n_long / (n_long + n_short))
        w_s = np.float32(n_short / (n_long + n_short))
        parts.append(ad.add(ad.mul(rep.losses["bc_long"], Tensor(w_l)),
                            ad.mul(rep.losses["bc_short"], Tensor(w_s))))
    elif n_long:
        parts.append(rep.losses["bc_long"])
    elif n_short:
        parts.append(rep.losses["bc_short"])
    if rep.counts.get("nav", 0):
        parts.append(rep.losses["nav"])
    total = None
    for p in parts:
        total = p if total is None else ad.add(total, p)
    if total is not None:
        optim.store.zero_grad()
        total.backward()
        stats["bc_grad_norm"] = clip_grad_norm(optim.store, cfg.max_grad_norm)
        optim.step()
    return stats


# ---------------------------------------------------------------------------
# PPO


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap: np.ndarray, gamma: float, lam: float) -> tuple:
    """(advantages, returns), both (E, L); returns are raw adv + values."""
    n_e, n_l = rewards.shape
    adv = np.zeros((n_e, n_l), dtype=np.float64)
    next_adv = np.zeros(n_e, dtype=np.float64)
    next_value = bootstrap.astype(np.float64)
    for t in range(n_l - 1, -1, -1):
        nonterm = 1.0 - dones[:, t].astype(np.float64)
        delta = rewards[:, t] + gamma * next_value * nonterm - values[:, t]
        next_adv = delta + gamma * lam * nonterm * next_adv
        adv[:, t] = next_adv
        next_value = values[:, t].astype(np.float64)
    returns = adv + values
    return adv.astype(np.float32), returns.astype(np.float32)


def _ppo_minibatch_loss(main: MainAgent, buf: RolloutBuffer, lanes: np.ndarray,
                        adv_rows: np.ndarray, ret_rows: np.ndarray,
                        cfg: TrainConfig) -> tuple:
    n_m, n_l = lanes.size, buf.length
    ranges_flat = _slot_major(buf.ranges[lanes])
    goal_flat = _slot_major(buf.goal_feat[lanes])
    prev_flat = _slot_major(buf.long_prev[lanes].astype(np.int64))
    gates = main.precompute_gates(ranges_flat, goal_flat, prev_flat)

    r = Tensor(buf.states[lanes, 0].copy())
    ep_start = buf.episode_start[lanes]
    hs = []
    for t in range(n_l):
        starts = np.nonzero(ep_start[:, t])[0]
        if starts.size:
            r = _zero_rows(r, starts)
        g_t = ad.gather_rows(gates, np.arange(t * n_m, (t + 1) * n_m))
        r = ad.gru_step_pre(main.gru, g_t, r)
        hs.append(r)

    states = ad.concat(hs, axis=0)
    logits, value = main.heads(states)
    logp = ad.log_softmax(logits)
    actions = _slot_major(buf.actions[lanes].astype(np.int64))
    lp_taken = ad.take_per_row(logp, actions)
    old_lp = _slot_major(buf.logps[lanes])
    ratio = ad.exp(ad.sub(lp_taken, Tensor(old_lp)))
    adv_flat = Tensor(_slot_major(adv_rows))
    surrogate = ad.minimum(
        ad.mul(ratio, adv_flat),
        ad.mul(ad.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), adv_flat),
    )
    policy_loss = ad.neg(ad.mean(surrogate))
    diff = ad.sub(ad.reshape(value, (n_l * n_m,)), Tensor(_slot_major(ret_rows)))
    value_loss = ad.mean(ad.mul(diff, diff))
    entropy = ad.neg(ad.mean(ad.reduce_sum(ad.mul(ad.softmax(logits), logp), axis=1)))
    loss = ad.add(policy_loss,
                  ad.sub(ad.mul(value_loss, Tensor(np.float32(cfg.value_coef))),
                         ad.mul(entropy, Tensor(np.float32(cfg.entropy_coef)))))
    clip_frac = float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_ratio))
    info = {
        "policy_loss": float(policy_loss.item()),
        "value_loss": float(value_loss.item()),
        "entropy": float(entropy.item()),
        "clip_frac": clip_frac,
    }
    return loss, info


def ppo_update(main: MainAgent, optim: AdamW, buf: RolloutBuffer,
               cfg: TrainConfig) -> dict:
    """Clipped-surrogate PPO epochs over lane minibatches of one buffer.

    Minibatches are contiguous lane groups replayed from slot-0 states, in a
    fixed order, so an update is a pure function of (params, buffer, config).
    """
    ppo_idx = np.nonzero(buf.is_ppo)[0]
    if ppo_idx.size == 0:
        raise TrainingError("buffer has no ppo lanes to update")
    adv, returns = compute_gae(buf.rewards[ppo_idx], buf.values[ppo_idx],
                               buf.dones[ppo_idx], buf.bootstrap[ppo_idx],
                               cfg.gamma, cfg.gae_lambda)
    if not np.all(np.isfinite(adv)):
        raise TrainingError("non-finite advantages in ppo update")
    adv_norm = (adv - adv.mean()) / (adv.std() + 1e-8)

    splits = [s for s in np.array_split(np.arange(ppo_idx.size), cfg.minibatches)
              if s.size]
    agg: dict[str, float] = {}
    passes = 0
    for _ in range(cfg.ppo_epochs):
        for mb in splits:
            loss, info = _ppo_minibatch_loss(main, buf, ppo_idx[mb],
                                             adv_norm[mb], returns[mb], cfg)
            optim.store.zero_grad()
            loss.backward()
            info["ppo_grad_norm"] = clip_grad_norm(optim.store, cfg.max_grad_norm)
            optim.step()
            passes += 1
            for k, v in info.items():
                agg[k] = agg.get(k, 0.0) + v
    stats = {k: v / passes for k, v in agg.items()}
    stats["mean_reward"] = float(buf.rewards[ppo_idx].mean())
    stats["episodes_done"] = float(buf.dones[ppo_idx].sum())
    return stats


# ---------------------------------------------------------------------------
# Two-phase schedule


@dataclass
class PhaseResult:
    history: list
    env_steps: int
    best_val_success: float | None = None


def make_agents(cfg: TrainConfig) -> tuple:
    """(main, mole); the mole exists only for presets with the nav loss."""
    preset = PRESETS[cfg.preset]
    main = MainAgent(cfg.main, seed=cfg.seed)
    mole = None
    if preset.mole_nav:
        mole = MoleAgent(cfg.mole, variant=cfg.communication,
                         main_hidden=cfg.main.hidden, seed=cfg.seed)
    return main, mole


def merged_store(main: MainAgent, mole: MoleAgent | None) -> ParamStore:
    store = ParamStore()
    for name, t in main.store.items():
        store.adopt(name, t)
    if mole is not None:
        for name, t in mole.store.items():
            store.adopt(name, t)
    return store


def _phase_seed(seed: int, phase: int) -> int:
    return int(np.random.SeedSequence((seed, phase)).generate_state(1)[0])


def _collector_config(cfg: TrainConfig, use_shorts: bool) -> CollectorConfig:
    return CollectorConfig(
        rollout_len=cfg.rollout_len,
        max_episode_steps=cfg.max_episode_steps,
        sensor=cfg.sensor,
        noise=cfg.noise,
        constraints=cfg.constraints,
        mining=cfg.mining,
        use_shorts=use_shorts,
    )


def run_phase1(cfg: TrainConfig, maps: list[OccupancyGrid], map_ids: list[str],
               main: MainAgent, mole: MoleAgent | None) -> PhaseResult:
    """Representation phase: the preset's loss mix over role-split lanes."""
    preset = PRESETS[cfg.preset]
    per_buffer = cfg.n_envs * cfg.rollout_len
    if cfg.phase1_steps < per_buffer:
        raise TrainingError(
            f"phase-1 budget {cfg.phase1_steps} is below one buffer ({per_buffer})"
        )
    if preset.mole_nav and mole is None:
        raise TrainingError(f"preset {preset.name!r} needs a mole agent")
    roles = lane_roles(preset, cfg.n_envs)
    collector = Collector(maps, map_ids, roles, _collector_config(cfg, preset.use_shorts),
                          seed=_phase_seed(cfg.seed, 1), main=main)
    has_bc = ROLE_BC in roles
    has_ppo = ROLE_PPO in roles
    optim = AdamW(merged_store(main, mole), OptimConfig(lr=cfg.lr))
    carry = ReplayCarry.fresh(roles.count(ROLE_BC), main.config.hidden,
                              mole.hidden if mole is not None else 1)
    history = []
    while collector.env_steps < cfg.phase1_steps:
        buf = collector.collect()
        rec = {"env_steps": float(collector.env_steps)}
        if has_bc:
            rec.update(bc_update(main, mole, optim, buf, cfg, preset, carry))
        if has_ppo:
            rec.update(ppo_update(main, optim, buf, cfg))
        history.append(rec)
    return PhaseResult(history=history, env_steps=collector.env_steps)


def run_phase2(cfg: TrainConfig, maps: list[OccupancyGrid], map_ids: list[str],
               main: MainAgent, val_grids: dict | None = None,
               val_episodes: list | None = None) -> PhaseResult:
    """PPO-only phase after reinitializing the policy and value heads.

    The mole is dropped. When validation episodes are provided, the
    checkpoint with the best validation success rate is restored at the end;
    otherwise the final parameters stand.
    """
    per_buffer = cfg.n_envs * cfg.rollout_len
    if cfg.phase2_steps < per_buffer:
        raise TrainingError(
            f"phase-2 budget {cfg.phase2_steps} is below one buffer ({per_buffer})"
        )
    if val_episodes and not val_grids:
        raise TrainingError("validation episodes given without their maps")
    main.reinit_heads(cfg.seed)
    roles = [ROLE_PPO] * cfg.n_envs
    collector = Collector(maps, map_ids, roles, _collector_config(cfg, False),
                          seed=_phase_seed(cfg.seed, 2), main=main)
    optim = AdamW(merged_store(main, None), OptimConfig(lr=cfg.lr))
    val_seed = _phase_seed(cfg.seed, 3)
    best_success = None
    best_state = None
    next_eval = cfg.eval_every
    history = []

    def validate() -> float:
        subset = val_episodes[:cfg.eval_episodes]
        results = evaluate_policy(main, val_grids, subset, cfg.sensor, cfg.noise,
                                  seed=val_seed, max_steps=cfg.max_episode_steps)
        return float(aggregate(results)["success"])

    while collector.env_steps < cfg.phase2_steps:
        buf = collector.collect()
        rec = {"env_steps": float(collector.env_steps)}
        rec.update(ppo_update(main, optim, buf, cfg))
        if val_episodes and collector.env_steps >= next_eval:
            while next_eval <= collector.env_steps:
                next_eval += cfg.eval_every
            succ = validate()
            rec["val_success"] = succ
            if best_success is None or succ >= best_success:
                best_success = succ
                best_state = main.store.state_dict()
        history.append(rec)
    if val_episodes:
        succ = validate()
        history.append({"env_steps": float(collector.env_steps), "val_success": succ})
        if best_success is None or succ >= best_success:
            best_success = succ
            best_state = main.store.state_dict()
        main.store.load_state_dict(best_state)
    return PhaseResult(history=history, env_steps=collector.env_steps,
                       best_val_success=best_success)


@dataclass
class ExperimentResult:
    main: MainAgent
    mole: MoleAgent | None
    phase1: PhaseResult
    phase2: PhaseResult


def run_experiment(cfg: TrainConfig, maps: list[OccupancyGrid],
                   map_ids: list[str], val_grids: dict | None = None,
                   val_episodes: list | None = None) -> ExperimentResult:
    """Phase 1 then phase 2 with fresh agents; the standard full run."""
    main, mole = make_agents(cfg)
    phase1 = run_phase1(cfg, maps, map_ids, main, mole)
    phase2 = run_phase2(cfg, maps, map_ids, main, val_grids, val_episodes)
    return ExperimentResult(main=main, mole=mole, phase1=phase1, phase2=phase2)
