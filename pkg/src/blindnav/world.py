"""2D occupancy-grid world: discrete agent kinematics and a ray range sensor.

World frame: x grows with grid columns, y with grid rows, units are meters.
A cell (row, col) covers the square [col*res, (col+1)*res) x [row*res, (row+1)*res).
Headings are radians in [0, 2*pi), heading 0 points along +x, turns are CCW-positive.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

FORWARD_STEP_M = 0.25
TURN_INCREMENT_RAD = math.radians(10.0)
AGENT_RADIUS_M = 0.15
# Multiplicative actuation noise: std = ACT_NOISE_STD_SCALE * intensity.
ACT_NOISE_STD_SCALE = 0.2

# Disc-vs-cell overlap uses strict inequality with this slack so that exact
# tangency (e.g. radius 0.15 m touching a cell boundary 1.5 cells away) is
# never flipped by float rounding of cell-center coordinates.
OVERLAP_EPS = 1e-12


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


N_ACTIONS = 4


class WorldError(Exception):
    """Base class for world-module failures."""


def wrap_heading(theta: float) -> float:
    """Canonical heading representative in [0, 2*pi)."""
    return theta % TWO_PI


def wrap_to_pi(theta: float) -> float:
    """Wrap an angle difference into (-pi, pi]."""
    wrapped = theta % TWO_PI
    if wrapped > math.pi:
        wrapped -= TWO_PI
    return wrapped


@dataclass
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        self.heading = wrap_heading(self.heading)

    def copy(self) -> "Pose":
        return Pose(self.x, self.y, self.heading)


@dataclass
class OccupancyGrid:
    """Boolean navigability grid; True cells are free space."""

    cells: np.ndarray  # bool, shape (height, width), [row, col]
    resolution: float
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.resolution <= 0:
            raise WorldError(f"resolution must be positive, got {self.resolution}")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        """World-frame (x, y) size in meters."""
        return self.width * self.resolution, self.height * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing a world point."""
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def navigable_fraction(self) -> float:
        return float(self.cells.mean())

    def validate(self) -> None:
        """Raise WorldError unless the grid invariants hold."""
        border = np.concatenate(
            [self.cells[0, :], self.cells[-1, :], self.cells[:, 0], self.cells[:, -1]]
        )
        if border.any():
            raise WorldError("border cells must be blocked")
        sizes = component_sizes(self.cells)
        if not sizes or max(sizes) < 100:
            raise WorldError("grid needs a navigable component of >= 100 cells")


@dataclass
class SensorConfig:
    n_rays: int = 64
    fov: float = math.pi / 2.0
    max_range: float = 5.0

    def ray_offsets(self) -> np.ndarray:
        """Ray angles relative to the heading, left-to-right across the fov."""
        if self.n_rays == 1:
            return np.zeros(1)
        return np.linspace(self.fov / 2.0, -self.fov / 2.0, self.n_rays)


@dataclass
class NoiseConfig:
    """Observation / actuation disturbance levels; all zeros is bit-exact clean."""

    obs_sigma: float = 0.0       # std of additive Gaussian on ranges, in units of max_range
    range_trunc: float = 0.0     # ranges above this are clamped to it; 0 disables
    act_noise_intensity: float = 0.0

    def __post_init__(self):
        if self.obs_sigma < 0 or self.range_trunc < 0 or self.act_noise_intensity < 0:
            raise WorldError("noise parameters must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.obs_sigma == 0 and self.range_trunc == 0 and self.act_noise_intensity == 0

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls()

    @classmethod
    def noisy(cls) -> "NoiseConfig":
        """Default disturbed sensing/actuation used for transfer-style evaluation."""
        return cls(obs_sigma=0.1, range_trunc=3.0, act_noise_intensity=0.5)


class SeenMask:
    """Cells revealed so far in the current trajectory (ray-swept or occupied)."""

    def __init__(self, grid: OccupancyGrid):
        self.cells = np.zeros_like(grid.cells, dtype=bool)

    def reset(self) -> None:
        self.cells[:] = False

    def count(self) -> int:
        return int(self.cells.sum())

    def mark_footprint(self, grid: OccupancyGrid, pose: Pose, radius: float = AGENT_RADIUS_M) -> None:
        rows, cols = footprint_cells(grid, pose.x, pose.y, radius)
        self.cells[rows, cols] = True


@dataclass
class Observation:
    ranges: np.ndarray          # meters, shape (n_rays,)
    goal_vector: tuple[float, float]  # (distance m, bearing rad in (-pi, pi])
    prev_collided: bool = False


def component_sizes(cells: np.ndarray) -> list[int]:
    """Sizes of 4-connected navigable components."""
    labels, count = label_components(cells)
    return [int((labels == i).sum()) for i in range(1, count + 1)]


def label_components(cells: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labels (0 = blocked); BFS flood fill."""
    labels = np.zeros(cells.shape, dtype=np.int32)
    current = 0
    h, w = cells.shape
    for r in range(h):
        for c in range(w):
            if cells[r, c] and labels[r, c] == 0:
                current += 1
                stack = [(r, c)]
                labels[r, c] = current
                while stack:
                    rr, cc = stack.pop()
                    for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                        if 0 <= nr < h and 0 <= nc < w and cells[nr, nc] and labels[nr, nc] == 0:
                            labels[nr, nc] = current
                            stack.append((nr, nc))
    return labels, current


def footprint_cells(grid: OccupancyGrid, x: float, y: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Cells whose area overlaps the open disc at (x, y)."""
    res = grid.resolution
    r0 = max(0, int(math.floor((y - radius) / res)))
    r1 = min(grid.height - 1, int(math.floor((y + radius) / res)))
    c0 = max(0, int(math.floor((x - radius) / res)))
    c1 = min(grid.width - 1, int(math.floor((x + radius) / res)))
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    # Distance from (x, y) to the nearest point of each candidate cell rectangle.
    cy = np.clip(y, rows[:, None] * res, (rows[:, None] + 1) * res)
    cx = np.clip(x, cols[None, :] * res, (cols[None, :] + 1) * res)
    overlap = (cx - x) ** 2 + (cy - y) ** 2 < radius * radius - OVERLAP_EPS
    rr, cc = np.nonzero(overlap)
    return rows[rr], cols[cc]


def footprint_clear(grid: OccupancyGrid, x: float, y: float, radius: float = AGENT_RADIUS_M) -> bool:
    """True if the agent disc at (x, y) overlaps only navigable cells."""
    res = grid.resolution
    if x - radius < 0 or y - radius < 0:
        return False
    ex, ey = grid.extent
    if x + radius > ex or y + radius > ey:
        return False
    rows, cols = footprint_cells(grid, x, y, radius)
    return bool(grid.cells[rows, cols].all())


# Sub-steps sampled along a FORWARD motion when checking for collision; spacing
# stays below half a cell so thin walls cannot be tunnelled through.
_SWEEP_SAMPLES = 6


def sweep_clear(
    grid: OccupancyGrid,
    x0: float,
    y0: float,
    dx: float,
    dy: float,
    radius: float = AGENT_RADIUS_M,
) -> bool:
    """True when the disc stays clear at every sub-sample of the translation."""
    res = grid.resolution
    fr = np.arange(1, _SWEEP_SAMPLES + 1) / _SWEEP_SAMPLES
    xs = x0 + fr * dx
    ys = y0 + fr * dy
    ex, ey = grid.extent
    if xs.min() - radius < 0 or ys.min() - radius < 0:
        return False
    if xs.max() + radius > ex or ys.max() + radius > ey:
        return False
    r0 = max(0, int(math.floor((ys.min() - radius) / res)))
    r1 = min(grid.height - 1, int(math.floor((ys.max() + radius) / res)))
    c0 = max(0, int(math.floor((xs.min() - radius) / res)))
    c1 = min(grid.width - 1, int(math.floor((xs.max() + radius) / res)))
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    blocked = ~grid.cells[r0 : r1 + 1, c0 : c1 + 1]
    if not blocked.any():
        return True
    cy = np.clip(ys[:, None, None], rows[None, :, None] * res, (rows[None, :, None] + 1) * res)
    cx = np.clip(xs[:, None, None], cols[None, None, :] * res, (cols[None, None, :] + 1) * res)
    overlap = (cx - xs[:, None, None]) ** 2 + (cy - ys[:, None, None]) ** 2 < radius * radius - OVERLAP_EPS
    return not (overlap & blocked[None, :, :]).any()


def step(
    grid: OccupancyGrid,
    pose: Pose,
    action: Action,
    noise: NoiseConfig,
    rng: np.random.Generator,
    agent_radius: float = AGENT_RADIUS_M,
) -> tuple[Pose, bool, bool]:
    """Apply one discrete action; returns (new pose, collided, stopped).

    A blocked FORWARD leaves the pose unchanged (no sliding). Zero-intensity
    noise draws nothing from the generator, so an all-zero NoiseConfig is
    bit-identical to the clean simulator.
    """
    action = Action(action)
    if action == Action.STOP:
        return pose.copy(), False, True
    if action in (Action.TURN_LEFT, Action.TURN_RIGHT):
        angle = TURN_INCREMENT_RAD
        if noise.act_noise_intensity > 0:
            angle *= 1.0 + rng.normal(0.0, ACT_NOISE_STD_SCALE * noise.act_noise_intensity)
        sign = 1.0 if action == Action.TURN_LEFT else -1.0
        return Pose(pose.x, pose.y, wrap_heading(pose.heading + sign * angle)), False, False

    length = FORWARD_STEP_M
    if noise.act_noise_intensity > 0:
        length *= 1.0 + rng.normal(0.0, ACT_NOISE_STD_SCALE * noise.act_noise_intensity)
    dx = math.cos(pose.heading) * length
    dy = math.sin(pose.heading) * length
    if not sweep_clear(grid, pose.x, pose.y, dx, dy, agent_radius):
        return pose.copy(), True, False
    return Pose(pose.x + dx, pose.y + dy, pose.heading), False, False


def raycast(
    nav: np.ndarray,
    resolution: float,
    origin: tuple[float, float],
    angles: np.ndarray,
    max_range: float,
    seen: np.ndarray | None = None,
) -> np.ndarray:
    """Exact grid traversal (DDA): distance to the first blocked cell per ray.

    Distances are capped at max_range. Out-of-grid space counts as blocked.
    When `seen` is given, every traversed cell (including the hit cell) is
    marked True.
    """
    angles = np.asarray(angles, dtype=np.float64)
    n = angles.shape[0]
    env_idx = np.zeros(n, dtype=np.intp)
    origins = np.broadcast_to(np.asarray(origin, dtype=np.float64), (n, 2))
    seen_stack = None if seen is None else seen[None, :, :]
    return raycast_batch(nav[None, :, :], resolution, origins, env_idx, angles, max_range, seen_stack)


@njit(cache=True)
def _raycast_kernel(nav, res, ox, oy, env_idx, dx, dy, max_range, seen, use_seen):
    n = ox.shape[0]
    h, w = nav.shape[1], nav.shape[2]
    out = np.empty(n, dtype=np.float64)
    max_iters = int(math.ceil(max_range / res)) * 2 + 4
    for i in range(n):
        g = env_idx[i]
        col = int(math.floor(ox[i] / res))
        if col < 0:
            col = 0
        elif col > w - 1:
            col = w - 1
        row = int(math.floor(oy[i] / res))
        if row < 0:
            row = 0
        elif row > h - 1:
            row = h - 1
        dxi = dx[i]
        dyi = dy[i]
        step_x = 1 if dxi > 0 else (-1 if dxi < 0 else 0)
        step_y = 1 if dyi > 0 else (-1 if dyi < 0 else 0)
        inv_dx = 1.0 / abs(dxi) if dxi != 0 else np.inf
        inv_dy = 1.0 / abs(dyi) if dyi != 0 else np.inf
        next_x = (col + 1) * res - ox[i] if step_x > 0 else ox[i] - col * res
        next_y = (row + 1) * res - oy[i] if step_y > 0 else oy[i] - row * res
        t_max_x = next_x * inv_dx if np.isfinite(inv_dx) else np.inf
        t_max_y = next_y * inv_dy if np.isfinite(inv_dy) else np.inf
        t_delta_x = res * inv_dx
        t_delta_y = res * inv_dy
        if use_seen:
            seen[g, row, col] = True
        if not nav[g, row, col]:
            out[i] = 0.0
            continue
        r = max_range
        for _ in range(max_iters):
            tx = t_max_x
            ty = t_max_y
            t = tx if tx < ty else ty
            if t >= max_range:
                break
            # Advance both axes on an exact corner crossing.
            if tx <= t:
                col += step_x
                t_max_x += t_delta_x
            if ty <= t:
                row += step_y
                t_max_y += t_delta_y
            if col < 0 or col >= w or row < 0 or row >= h:
                r = t
                break
            if use_seen:
                seen[g, row, col] = True
            if not nav[g, row, col]:
                r = t
                break
        out[i] = r
    return out


_DUMMY_SEEN = np.zeros((1, 1, 1), dtype=bool)


def raycast_batch(
    nav_stack: np.ndarray,
    resolution: float,
    origins: np.ndarray,
    env_idx: np.ndarray,
    angles: np.ndarray,
    max_range: float,
    seen_stack=None,
) -> np.ndarray:
    """Vectorized DDA over rays that may belong to different grids.

    nav_stack: (n_grids, H, W) bool. seen_stack, when given, is an
    (n_grids, H, W) bool array updated in place.
    """
    angles = np.asarray(angles, dtype=np.float64)
    origins = np.asarray(origins, dtype=np.float64)
    use_seen = seen_stack is not None
    if use_seen and not (isinstance(seen_stack, np.ndarray) and seen_stack.ndim == 3):
        raise WorldError("seen_stack must be an (n_grids, H, W) bool array")
    return _raycast_kernel(
        np.ascontiguousarray(nav_stack),
        float(resolution),
        np.ascontiguousarray(origins[:, 0]),
        np.ascontiguousarray(origins[:, 1]),
        np.ascontiguousarray(env_idx, dtype=np.int64),
        np.cos(angles),
        np.sin(angles),
        float(max_range),
        seen_stack if use_seen else _DUMMY_SEEN,
        use_seen,
    )


def _raycast_batch_reference(
    nav_stack: np.ndarray,
    resolution: float,
    origins: np.ndarray,
    env_idx: np.ndarray,
    angles: np.ndarray,
    max_range: float,
    seen_stack=None,
) -> np.ndarray:
    """Pure-numpy DDA kept as the semantics reference for the compiled kernel."""
    res = resolution
    n = angles.shape[0]
    h, w = nav_stack.shape[1], nav_stack.shape[2]
    ox = origins[:, 0]
    oy = origins[:, 1]
    dx = np.cos(angles)
    dy = np.sin(angles)

    col = np.clip(np.floor(ox / res).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(oy / res).astype(np.int64), 0, h - 1)

    step_x = np.where(dx > 0, 1, np.where(dx < 0, -1, 0))
    step_y = np.where(dy > 0, 1, np.where(dy < 0, -1, 0))
    with np.errstate(divide="ignore"):
        inv_dx = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        inv_dy = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
    # Parametric distance to the first x/y cell boundary crossing.
    next_x = np.where(step_x > 0, (col + 1) * res - ox, ox - col * res)
    next_y = np.where(step_y > 0, (row + 1) * res - oy, oy - row * res)
    with np.errstate(invalid="ignore"):
        t_max_x = np.where(np.isfinite(inv_dx), next_x * inv_dx, np.inf)
        t_max_y = np.where(np.isfinite(inv_dy), next_y * inv_dy, np.inf)
    t_delta_x = res * inv_dx
    t_delta_y = res * inv_dy

    out = np.full(n, max_range, dtype=np.float64)
    active = np.ones(n, dtype=bool)

    single_grid = nav_stack.shape[0] == 1

    def mark(cells_env, cells_row, cells_col):
        if seen_stack is None:
            return
        if single_grid:
            seen_stack[0][cells_row, cells_col] = True
            return
        for g in np.unique(cells_env):
            m = cells_env == g
            seen_stack[g][cells_row[m], cells_col[m]] = True

    # Origin cell is revealed; if it is already blocked the ray has range 0.
    mark(env_idx, row, col)
    start_blocked = ~nav_stack[env_idx, row, col]
    out[start_blocked] = 0.0
    active &= ~start_blocked

    max_iters = int(math.ceil(max_range / res)) * 2 + 4
    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        tx = t_max_x[idx]
        ty = t_max_y[idx]
        t = np.minimum(tx, ty)

        beyond = t >= max_range
        if beyond.any():
            sel = idx[beyond]
            active[sel] = False
            idx = idx[~beyond]
            if idx.size == 0:
                continue
            tx = t_max_x[idx]
            ty = t_max_y[idx]
            t = np.minimum(tx, ty)

        # Advance both axes on an exact corner crossing.
        adv_x = tx <= t
        adv_y = ty <= t
        col[idx] += np.where(adv_x, step_x[idx], 0)
        row[idx] += np.where(adv_y, step_y[idx], 0)
        t_max_x[idx] += np.where(adv_x, t_delta_x[idx], 0.0)
        t_max_y[idx] += np.where(adv_y, t_delta_y[idx], 0.0)

        oob = (col[idx] < 0) | (col[idx] >= w) | (row[idx] < 0) | (row[idx] >= h)
        in_idx = idx[~oob]
        if oob.any():
            sel = idx[oob]
            out[sel] = t[oob]
            active[sel] = False
        if in_idx.size:
            r_in = row[in_idx]
            c_in = col[in_idx]
            mark(env_idx[in_idx], r_in, c_in)
            blocked = ~nav_stack[env_idx[in_idx], r_in, c_in]
            if blocked.any():
                sel = in_idx[blocked]
                out[sel] = t[~oob][blocked]
                active[sel] = False
    return np.minimum(out, max_range)


def goal_vector(pose: Pose, goal: tuple[float, float]) -> tuple[float, float]:
    """(distance, bearing) to the goal in the agent frame; bearing in (-pi, pi]."""
    gx, gy = goal
    dx = gx - pose.x
    dy = gy - pose.y
    dist = math.hypot(dx, dy)
    bearing = wrap_to_pi(math.atan2(dy, dx) - pose.heading)
    return dist, bearing


def observe(
    grid: OccupancyGrid,
    pose: Pose,
    goal: tuple[float, float],
    sensor: SensorConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
    seen: SeenMask | None = None,
    prev_collided: bool = False,
) -> Observation:
    """Ray ranges plus goal compass from the current pose.

    Ranges are truncated at noise.range_trunc (when set) before additive
    Gaussian noise of std obs_sigma * max_range, then clamped to
    [0, max_range]. The seen mask is updated from the true (noiseless) rays.
    """
    angles = wrap_heading(pose.heading) + sensor.ray_offsets()
    seen_cells = None if seen is None else seen.cells
    ranges = raycast(grid.cells, grid.resolution, (pose.x, pose.y), angles,
                     sensor.max_range, seen_cells)
    if seen is not None:
        seen.mark_footprint(grid, pose)
    ranges = apply_range_noise(ranges, sensor, noise, rng)
    return Observation(ranges=ranges, goal_vector=goal_vector(pose, goal),
                       prev_collided=prev_collided)


def apply_range_noise(ranges: np.ndarray, sensor: SensorConfig, noise: NoiseConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Truncate, then add Gaussian noise, then clamp; zero settings draw nothing."""
    if noise.range_trunc > 0:
        ranges = np.minimum(ranges, noise.range_trunc)
    if noise.obs_sigma > 0:
        ranges = ranges + rng.normal(0.0, noise.obs_sigma * sensor.max_range, size=ranges.shape)
        ranges = np.clip(ranges, 0.0, sensor.max_range)
    return ranges


def save_pgm(grid: OccupancyGrid, path: str | FsPath) -> None:
    """Write a P5 PGM (0 = blocked, 255 = navigable) plus a JSON sidecar."""
    path = FsPath(path)
    data = np.where(grid.cells, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    sidecar = {"resolution": grid.resolution, "seed": grid.seed, "params": grid.params}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_pgm(path: str | FsPath) -> OccupancyGrid:
    path = FsPath(path)
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise WorldError(f"{path}: not a P5 PGM file")
    # Header: magic, width, height, maxval, then a single whitespace byte.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise WorldError(f"{path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return OccupancyGrid(cells=data == 255, resolution=sidecar["resolution"],
                         seed=sidecar["seed"], params=sidecar["params"])
