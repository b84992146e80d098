"""Evaluation: episode metrics, ego-map rendering, probing, and Sym-SPL.

Navigation metrics follow the usual point-goal definitions (Success, SPL,
Soft-SPL). The probing pipeline renders ego-centric ground-truth navigability
maps gated by what the agent has actually seen, pairs them with the recurrent
representation r at the same step, trains a small read-out decoder, and scores
it by IoU and by Symmetric-SPL (path-ratio agreement between shortest paths on
the predicted and ground-truth ego maps).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import autodiff as ad
from .agents import MainAgent, goal_feature, greedy_actions, START_ACTION
from .autodiff import AdamW, OptimConfig, ParamStore, Tensor
from .episodes import LongEpisode
from .geodesy import GeodesyError, cached_field, distance_field_raw, geodesic_at
from .world import (
    Action,
    NoiseConfig,
    OccupancyGrid,
    Pose,
    SeenMask,
    SensorConfig,
    WorldError,
    observe,
    step,
)

log = logging.getLogger(__name__)


class EvalError(WorldError):
    """Invalid metric input or probing setup."""


# ---------------------------------------------------------------------------
# Episode metrics


@dataclass
class EpisodeResult:
    success: bool
    path_length: float      # meters actually walked
    shortest_length: float  # geodesic start->goal, meters
    steps: int
    d_init: float           # geodesic distance to goal at the start
    d_final: float          # geodesic distance to goal at the end

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        return self.shortest_length / max(self.path_length, self.shortest_length)

    @property
    def soft_spl(self) -> float:
        # Successful episodes keep the hard indicator; the soft progress term
        # only replaces the zero on failures, so soft_spl >= spl always.
        if self.success:
            soft = 1.0
        else:
            soft = max(0.0, 1.0 - self.d_final / self.d_init) if self.d_init > 0 else 0.0
        return soft * self.shortest_length / max(self.path_length, self.shortest_length)


@dataclass
class Trajectory:
    """One rollout: poses include the start, so len(poses) == steps + 1."""

    poses: np.ndarray       # (steps + 1, 3)
    actions: np.ndarray     # (steps,)
    success: bool
    d_init: float
    d_final: float


def score_episode(traj: Trajectory, episode: LongEpisode) -> EpisodeResult:
    if traj.poses.shape[0] < 1:
        raise EvalError("empty trajectory")
    xy = traj.poses[:, :2]
    length = float(np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1])).sum())
    return EpisodeResult(
        success=bool(traj.success),
        path_length=length,
        shortest_length=float(episode.gt_path_length),
        steps=int(traj.actions.shape[0]),
        d_init=float(traj.d_init),
        d_final=float(traj.d_final),
    )


def aggregate(results: list[EpisodeResult]) -> dict:
    if not results:
        raise EvalError("no episode results to aggregate")
    n = len(results)
    return {
        "episodes": n,
        "success": sum(r.success for r in results) / n,
        "spl": sum(r.spl for r in results) / n,
        "soft_spl": sum(r.soft_spl for r in results) / n,
        "mean_steps": sum(r.steps for r in results) / n,
    }


_CSV_COLUMNS = ["map_id", "episode_seed", "success", "steps", "path_length",
                "shortest_length", "d_init", "d_final", "spl", "soft_spl"]


def write_results_csv(path: str | FsPath, episodes: list[LongEpisode],
                      results: list[EpisodeResult]) -> dict:
    """One row per episode plus an aggregate row; float repr keeps it bit-stable."""
    if len(episodes) != len(results):
        raise EvalError("episode/result count mismatch")
    agg = aggregate(results)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_CSV_COLUMNS)
        for ep, r in zip(episodes, results):
            w.writerow([ep.map_id, ep.seed, int(r.success), r.steps,
                        repr(r.path_length), repr(r.shortest_length),
                        repr(r.d_init), repr(r.d_final),
                        repr(r.spl), repr(r.soft_spl)])
        w.writerow(["aggregate", len(results), repr(agg["success"]),
                    repr(agg["mean_steps"]), "", "", "", "",
                    repr(agg["spl"]), repr(agg["soft_spl"])])
    return agg


# ---------------------------------------------------------------------------
# Policy rollouts


def run_policy_episode(
    main: MainAgent,
    grid: OccupancyGrid,
    episode: LongEpisode,
    sensor: SensorConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
    max_steps: int = 500,
    success_radius: float = 0.2,
    seen: SeenMask | None = None,
    capture: list | None = None,
) -> Trajectory:
    """Greedy rollout of the main policy on one point-goal episode.

    When `capture` is a list, (r, pose, seen-copy) snapshots taken after each
    step are appended to it, which is what probe-dataset collection consumes.
    """
    goal_field = cached_field(grid, episode.goal)
    pose = episode.start.copy()
    r = main.initial_state(1)
    prev = np.array([START_ACTION], dtype=np.int64)
    poses = [(pose.x, pose.y, pose.heading)]
    actions = []
    success = False
    d_init = geodesic_at(goal_field, pose.x, pose.y)
    for _ in range(max_steps):
        obs = observe(grid, pose, episode.goal, sensor, noise, rng, seen=seen)
        feat = goal_feature(np.array([obs.goal_vector[0]]),
                            np.array([obs.goal_vector[1]]))
        with ad.no_grad():
            r_t, logits, _ = main.step(obs.ranges[None, :], feat, prev, r)
        r = r_t.data
        a = int(greedy_actions(logits.data)[0])
        if capture is not None:
            capture.append((r[0].copy(), pose.copy(),
                            None if seen is None else seen.cells.copy()))
        pose, _, stopped = step(grid, pose, Action(a), noise, rng)
        poses.append((pose.x, pose.y, pose.heading))
        actions.append(a)
        prev = np.array([a], dtype=np.int64)
        if stopped:
            d = math.hypot(episode.goal[0] - pose.x, episode.goal[1] - pose.y)
            success = d <= success_radius
            break
    return Trajectory(
        poses=np.array(poses, dtype=np.float64),
        actions=np.array(actions, dtype=np.int64),
        success=success,
        d_init=d_init,
        d_final=geodesic_at(goal_field, pose.x, pose.y),
    )


def evaluate_policy(
    main: MainAgent,
    grids: dict[str, OccupancyGrid],
    episodes: list[LongEpisode],
    sensor: SensorConfig,
    noise: NoiseConfig,
    seed: int,
    max_steps: int = 500,
    start_index: int = 0,
) -> list[EpisodeResult]:
    """Score a checkpoint over an episode list; per-episode rng streams keep
    results independent of evaluation order or worker count. `start_index`
    lets a caller score a slice of a larger list with unchanged streams."""
    results = []
    for i, ep in enumerate(episodes, start=start_index):
        if ep.map_id not in grids:
            raise EvalError(f"episode references unknown map {ep.map_id!r}")
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        traj = run_policy_episode(main, grids[ep.map_id], ep, sensor, noise,
                                  rng, max_steps=max_steps)
        results.append(score_episode(traj, ep))
    return results


# ---------------------------------------------------------------------------
# Ego-centric ground-truth maps


@dataclass
class EgoMap:
    nav: np.ndarray      # (W, W) bool, row 0 is farthest ahead
    cell_size: float

    @property
    def size(self) -> int:
        return self.nav.shape[0]


def render_ego_gt(grid: OccupancyGrid, pose: Pose, seen: np.ndarray,
                  size: int = 33, cell_size: float | None = None) -> EgoMap:
    """Ego navigability map: heading points up, center cell is the agent.

    A cell is navigable iff the world cell under it is navigable AND seen.
    Nearest-cell sampling, no interpolation.
    """
    cell_size = grid.resolution if cell_size is None else cell_size
    if size % 2 == 0:
        raise EvalError("ego map size must be odd so the agent sits on a cell")
    c = size // 2
    fwd = (c - np.arange(size))[:, None] * cell_size   # + ahead per ego row
    lat = (np.arange(size) - c)[None, :] * cell_size   # + to the right per col
    fx, fy = math.cos(pose.heading), math.sin(pose.heading)
    rx, ry = math.sin(pose.heading), -math.cos(pose.heading)
    wx = pose.x + fwd * fx + lat * rx
    wy = pose.y + fwd * fy + lat * ry
    cc = np.floor(wx / grid.resolution).astype(np.int64)
    rr = np.floor(wy / grid.resolution).astype(np.int64)
    h, w = grid.cells.shape
    inb = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    rr_c = np.clip(rr, 0, h - 1)
    cc_c = np.clip(cc, 0, w - 1)
    nav = inb & grid.cells[rr_c, cc_c] & seen[rr_c, cc_c]
    return EgoMap(nav=nav, cell_size=cell_size)


def save_ego_pgm(ego: np.ndarray, path: str | FsPath) -> None:
    """Binary PGM, navigable=255."""
    h, w = ego.shape
    body = np.where(ego, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(body.tobytes())


# ---------------------------------------------------------------------------
# Probing


@dataclass
class ProbeDataset:
    reps: np.ndarray     # (N, H) float32
    maps: np.ndarray     # (N, W, W) bool
    map_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.reps.shape[0]


def collect_probe_dataset(
    main: MainAgent,
    grids: dict[str, OccupancyGrid],
    episodes: list[LongEpisode],
    sensor: SensorConfig,
    seed: int,
    samples_per_episode: int = 20,
    ego_size: int = 33,
    max_steps: int = 500,
) -> ProbeDataset:
    """(r, ego GT map) pairs at evenly spaced steps of greedy clean rollouts."""
    noise = NoiseConfig.zero()
    reps, gts, ids = [], [], []
    for i, ep in enumerate(episodes):
        grid = grids[ep.map_id]
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        cap: list = []
        seen = SeenMask(grid)
        run_policy_episode(main, grid, ep, sensor, noise, rng,
                           max_steps=max_steps, seen=seen, capture=cap)
        if not cap:
            continue
        picks = np.unique(np.linspace(0, len(cap) - 1,
                                      min(samples_per_episode, len(cap))).round()
                          .astype(int))
        for j in picks:
            r, pose, seen_cells = cap[j]
            ego = render_ego_gt(grid, pose, seen_cells, size=ego_size)
            reps.append(r.astype(np.float32))
            gts.append(ego.nav)
            ids.append(ep.map_id)
    if not reps:
        raise EvalError("probe dataset is empty")
    return ProbeDataset(reps=np.stack(reps), maps=np.stack(gts), map_ids=ids)


def check_disjoint_splits(*id_sets: set[str]) -> None:
    for i in range(len(id_sets)):
        for j in range(i + 1, len(id_sets)):
            overlap = set(id_sets[i]) & set(id_sets[j])
            if overlap:
                raise EvalError(f"probe splits share maps: {sorted(overlap)}")


def _probe_coords(size: int) -> np.ndarray:
    """Per-cell (x, y) in [-1, 1], row-major."""
    lin = np.linspace(-1.0, 1.0, size)
    gy, gx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float32)


@dataclass
class ProbeParams:
    store: ParamStore
    ego_size: int
    hidden: int = 256


def make_probe(rep_dim: int, ego_size: int, seed: int, hidden: int = 256) -> ProbeParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9)))
    store = ParamStore()
    store.add("probe/w1", ad.glorot_uniform(rng, rep_dim, hidden))
    store.add("probe/b1", np.zeros(hidden, dtype=np.float32))
    store.add("probe/w2", ad.glorot_uniform(rng, hidden + 2, 2))
    store.add("probe/b2", np.zeros(2, dtype=np.float32))
    return ProbeParams(store=store, ego_size=ego_size, hidden=hidden)


def probe_logits(probe: ProbeParams, reps: np.ndarray) -> Tensor:
    """(B, H) representations -> (B * W * W, 2) per-cell logits."""
    n = reps.shape[0]
    ww = probe.ego_size * probe.ego_size
    h = ad.relu(ad.add(ad.matmul(Tensor(reps), probe.store["probe/w1"]),
                       probe.store["probe/b1"]))
    tiled = ad.gather_rows(h, np.repeat(np.arange(n), ww))
    coords = Tensor(np.tile(_probe_coords(probe.ego_size), (n, 1)))
    x = ad.concat([tiled, coords], axis=1)
    return ad.add(ad.matmul(x, probe.store["probe/w2"]), probe.store["probe/b2"])


def probe_predict(probe: ProbeParams, reps: np.ndarray) -> np.ndarray:
    """(B, H) -> (B, W, W) bool navigability predictions."""
    with ad.no_grad():
        logits = probe_logits(probe, reps)
    w = probe.ego_size
    return logits.data.argmax(axis=1).reshape(reps.shape[0], w, w).astype(bool)


def _probe_loss(probe: ProbeParams, reps: np.ndarray, gts: np.ndarray) -> Tensor:
    labels = gts.reshape(gts.shape[0], -1).astype(np.int64).ravel()
    return ad.mean(ad.cross_entropy(probe_logits(probe, reps), labels))


def train_probe(
    train: ProbeDataset,
    val: ProbeDataset,
    rep_dim: int,
    ego_size: int,
    seed: int,
    lr: float = 1e-3,
    weight_decay: float = 1e-5,
    batch_size: int = 64,
    max_epochs: int = 30,
    patience: int = 3,
) -> tuple[ProbeParams, dict]:
    """Per-cell cross-entropy with early stopping on validation loss."""
    if len(train) == 0 or len(val) == 0:
        raise EvalError("probe training needs nonempty train and val sets")
    probe = make_probe(rep_dim, ego_size, seed)
    opt = AdamW(probe.store, OptimConfig(lr=lr, weight_decay=weight_decay))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
    best_val = math.inf
    best_state = probe.store.state_dict()
    best_epoch = -1
    history = []
    for epoch in range(max_epochs):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            loss = _probe_loss(probe, train.reps[idx], train.maps[idx])
            loss.backward()
            opt.step()
        with ad.no_grad():
            vl = 0.0
            for lo in range(0, len(val), batch_size):
                sl = slice(lo, lo + batch_size)
                part = _probe_loss(probe, val.reps[sl], val.maps[sl])
                vl += float(part.data) * (min(lo + batch_size, len(val)) - lo)
            vl /= len(val)
        history.append(vl)
        if vl < best_val:
            best_val = vl
            best_state = probe.store.state_dict()
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    probe.store.load_state_dict(best_state)
    return probe, {"best_val_loss": best_val, "best_epoch": best_epoch,
                   "val_history": history}


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union on the navigable class; two empty maps agree."""
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


# ---------------------------------------------------------------------------
# Symmetric-SPL


def sym_spl(pred: np.ndarray, gt: np.ndarray, cell_size: float,
            rng: np.random.Generator, n_points: int = 10) -> float:
    """Mean path-ratio agreement over sampled GT-reachable target cells.

    Each sampled point contributes min(l/l*, l*/l) where l* is the shortest
    path on the GT map and l the shortest path on the predicted map, both from
    the center; points unreachable on the prediction contribute 0.
    """
    size = gt.shape[0]
    center = (size // 2, size // 2)
    if not gt[center]:
        raise EvalError("GT ego map center must be navigable")
    gt_dist, _ = distance_field_raw(gt, center, cell_size)
    rows, cols = np.nonzero(np.isfinite(gt_dist))
    keep = ~((rows == center[0]) & (cols == center[1]))
    rows, cols = rows[keep], cols[keep]
    if rows.size == 0:
        raise EvalError("GT ego map has no reachable points besides the center")
    n = min(n_points, rows.size)
    if n < n_points:
        log.warning("sym_spl: only %d reachable GT points (wanted %d)", n, n_points)
    picks = rng.choice(rows.size, size=n, replace=False)
    pred_dist = None
    if pred[center]:
        pred_dist, _ = distance_field_raw(pred.astype(bool), center, cell_size)
    total = 0.0
    for k in picks:
        r, c = int(rows[k]), int(cols[k])
        l_star = float(gt_dist[r, c])
        if pred_dist is None or not math.isfinite(pred_dist[r, c]):
            continue
        l = float(pred_dist[r, c])
        if l == 0.0 or l_star == 0.0:
            continue
        total += min(l / l_star, l_star / l)
    return total / n


def probe_sym_spl(probe: ProbeParams, dataset: ProbeDataset, cell_size: float,
                  seed: int, n_points: int = 10) -> float:
    """Mean Sym-SPL of probe predictions against GT over a dataset."""
    preds = probe_predict(probe, dataset.reps)
    total = 0.0
    used = 0
    for i in range(len(dataset)):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11, i)))
        try:
            total += sym_spl(preds[i], dataset.maps[i], cell_size, rng,
                             n_points=n_points)
        except EvalError:
            continue
        used += 1
    if used == 0:
        raise EvalError("no ego map in the dataset admits Sym-SPL sampling")
    return total / used
