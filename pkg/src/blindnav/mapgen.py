"""Procedural indoor-style maps: rectangular rooms joined by L-shaped corridors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import OccupancyGrid, WorldError, label_components


class MapGenerationError(WorldError):
    """Raised when no valid map could be produced within the retry budget."""


@dataclass
class MapGenParams:
    height: int = 64
    width: int = 64
    resolution: float = 0.1
    n_rooms: int = 9
    room_min: int = 6          # cells per side
    room_max: int = 16
    corridor_width: int = 6    # cells; disc is 3 cells wide, extra slack absorbs heading quantization drift
    extra_links: int = 2       # corridors beyond the spanning chain
    navigable_range: tuple[float, float] = (0.2, 0.7)
    max_tries: int = 25

    def as_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width, "resolution": self.resolution,
            "n_rooms": self.n_rooms, "room_min": self.room_min, "room_max": self.room_max,
            "corridor_width": self.corridor_width, "extra_links": self.extra_links,
            "navigable_range": list(self.navigable_range), "max_tries": self.max_tries,
        }


def _carve_rooms(nav: np.ndarray, params: MapGenParams, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Carve rooms and return their center cells."""
    h, w = nav.shape
    centers = []
    for _ in range(params.n_rooms):
        rh = int(rng.integers(params.room_min, params.room_max + 1))
        rw = int(rng.integers(params.room_min, params.room_max + 1))
        rh = min(rh, h - 2)
        rw = min(rw, w - 2)
        r0 = int(rng.integers(1, h - rh))
        c0 = int(rng.integers(1, w - rw))
        nav[r0 : r0 + rh, c0 : c0 + rw] = True
        centers.append((r0 + rh // 2, c0 + rw // 2))
    return centers


def _carve_corridor(nav: np.ndarray, a: tuple[int, int], b: tuple[int, int],
                    width: int, rng: np.random.Generator) -> None:
    """L-shaped corridor between two cells; elbow orientation is random."""
    h, w = nav.shape
    (r1, c1), (r2, c2) = a, b
    half = width // 2

    def hseg(row, ca, cb):
        lo, hi = sorted((ca, cb))
        r0 = max(1, row - half)
        r1_ = min(h - 1, row - half + width)
        nav[r0:r1_, max(1, lo - half) : min(w - 1, hi + half + 1)] = True

    def vseg(col, ra, rb):
        lo, hi = sorted((ra, rb))
        c0 = max(1, col - half)
        c1_ = min(w - 1, col - half + width)
        nav[max(1, lo - half) : min(h - 1, hi + half + 1), c0:c1_] = True

    if rng.random() < 0.5:
        hseg(r1, c1, c2)
        vseg(c2, r1, r2)
    else:
        vseg(c1, r1, r2)
        hseg(r2, c1, c2)


def generate_map(seed: int, params: MapGenParams | None = None) -> OccupancyGrid:
    """Deterministic map from a seed; retries layouts until invariants hold."""
    params = params or MapGenParams()
    root = np.random.default_rng(seed)
    lo, hi = params.navigable_range
    for attempt in range(params.max_tries):
        rng = np.random.default_rng(root.integers(2**63))
        nav = np.zeros((params.height, params.width), dtype=bool)
        centers = _carve_rooms(nav, params, rng)
        order = rng.permutation(len(centers))
        for i in range(len(order) - 1):
            _carve_corridor(nav, centers[order[i]], centers[order[i + 1]],
                            params.corridor_width, rng)
        for _ in range(params.extra_links):
            i, j = rng.choice(len(centers), size=2, replace=False)
            _carve_corridor(nav, centers[i], centers[j], params.corridor_width, rng)
        nav[0, :] = nav[-1, :] = False
        nav[:, 0] = nav[:, -1] = False

        labels, count = label_components(nav)
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        nav = labels == keep
        frac = nav.mean()
        if sizes[keep - 1] >= 100 and lo <= frac <= hi:
            grid = OccupancyGrid(cells=nav, resolution=params.resolution, seed=seed,
                                 params=params.as_dict())
            grid.validate()
            return grid
    raise MapGenerationError(
        f"seed {seed}: no valid layout in {params.max_tries} tries "
        f"(navigable fraction target {lo}..{hi})"
    )
