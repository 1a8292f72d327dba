"""Fixed-size local occupancy submaps with a precomputed max-kernel
companion grid for approximate scan-to-map matching.

Grids store log-odds indexed [ix, iy]; cell (ix, iy) covers
``origin + [ix, iy] * cell_size`` to ``origin + [ix+1, iy+1] * cell_size``
in the submap anchor frame. A frozen submap carries two score grids: the
raw per-cell probability (unknown cells replaced by the unknown score) and
its k x k max-filtered version.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Pose2, transform_points

KERNEL_SIZES = {"none": 1, "k3": 3, "k5": 5, "k7": 7}


def prob_to_logodds(p):
    return np.log(p / (1.0 - p))


def logodds_to_prob(lo):
    return 1.0 / (1.0 + np.exp(-lo))


@dataclass
class GridParams:
    cell_size: float = 0.1
    p_occ: float = 0.85
    p_free: float = 0.4
    p_clamp_lo: float = 0.02
    p_clamp_hi: float = 0.98
    unknown_score: float = 0.3


class OccupancyGrid:
    """Log-odds occupancy grid over a fixed extent."""

    def __init__(self, origin, size_cells, params: GridParams):
        self.origin = np.asarray(origin, dtype=float)
        self.params = params
        self.cell_size = params.cell_size
        nx, ny = size_cells
        self.logodds = np.zeros((nx, ny))
        self.observed = np.zeros((nx, ny), dtype=np.uint8)
        self._l_occ = prob_to_logodds(params.p_occ)
        self._l_free = prob_to_logodds(params.p_free)
        self._l_min = prob_to_logodds(params.p_clamp_lo)
        self._l_max = prob_to_logodds(params.p_clamp_hi)

    @property
    def shape(self):
        return self.logodds.shape

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Nearest (containing) cell indices for (N, 2) points."""
        return np.floor(
            (np.atleast_2d(points) - self.origin) / self.cell_size
        ).astype(np.int64)

    def probabilities(self) -> np.ndarray:
        return logodds_to_prob(self.logodds)

    def insert_scan(self, sensor_xy, points, hit=None) -> None:
        """Apply one scan: free decrements along each ray's interior cells,
        occupied increment at each endpoint cell (unless the beam is marked
        as a non-hit, e.g. range-capped). Out-of-grid cells are skipped."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(points) == 0:
            return
        scell = self.cell_of(np.asarray(sensor_xy, dtype=float)[None, :])[0]
        ends = self.cell_of(points)
        same = (ends[:, 0] == scell[0]) & (ends[:, 1] == scell[1])
        keep = ~same
        if hit is None:
            hit = np.ones(len(points), dtype=np.uint8)
        hit = np.asarray(hit).astype(np.uint8)
        _kernels.raycast_update(
            self.logodds, self.observed, int(scell[0]), int(scell[1]),
            ends[keep, 0].copy(), ends[keep, 1].copy(), hit[keep].copy(),
            self._l_occ, self._l_free, self._l_min, self._l_max)


class Submap:
    """An occupancy grid anchored at a trajectory pose; immutable once
    frozen, after which the kernel score grid exists."""

    def __init__(self, anchor_id: int, extent: float, params: GridParams):
        half = extent / 2.0
        n = int(round(extent / params.cell_size))
        self.grid = OccupancyGrid((-half, -half), (n, n), params)
        self.anchor_id = anchor_id
        self.frozen = False
        self.kernel_name = None
        self.score_raw: np.ndarray | None = None
        self.score_kernel: np.ndarray | None = None
        self.odometer = 0.0             # travel accumulated since anchor
        self.first_pose_id = anchor_id
        self.last_pose_id = anchor_id
        self.point_count = 0

    def insert_scan(self, pose_in_anchor: Pose2, points_body: np.ndarray,
                    hit=None) -> None:
        if self.frozen:
            raise RuntimeError("submap is frozen")
        pts = transform_points(points_body, pose_in_anchor)
        self.grid.insert_scan((pose_in_anchor.x, pose_in_anchor.y), pts, hit)
        self.point_count += len(pts)

    def freeze(self, kernel: str = "k3") -> None:
        if self.frozen:
            raise RuntimeError("submap already frozen")
        size = KERNEL_SIZES[kernel]
        prob = self.grid.probabilities()
        unknown = self.grid.params.unknown_score
        self.score_raw = np.where(self.grid.observed.astype(bool), prob,
                                  unknown)
        self.score_kernel = _kernels.max_filter(
            np.ascontiguousarray(self.score_raw), size)
        self.kernel_name = kernel
        self.frozen = True

    def score(self, points: np.ndarray, w: Pose2, use_kernel: bool = True) -> float:
        """Mean looked-up value over the points placed by pose w (given in
        the anchor frame); unknown and out-of-map cells contribute the
        unknown score."""
        if not self.frozen:
            raise RuntimeError("submap must be frozen before scoring")
        values = self.score_kernel if use_kernel else self.score_raw
        pts = transform_points(points, w)
        cells = self.grid.cell_of(pts)
        looked = _kernels.cell_lookup(values, cells[:, 0].copy(),
                                      cells[:, 1].copy(),
                                      self.grid.params.unknown_score)
        return float(looked.mean())


def render_global(submaps, anchor_poses: dict, params: GridParams) -> OccupancyGrid:
    """Composite submaps into one world-frame grid by log-odds addition.

    `anchor_poses` maps anchor pose id -> optimized world Pose2. The
    global origin snaps to cell boundaries so an identity anchor maps
    cells one-to-one.
    """
    submaps = list(submaps)
    if not submaps:
        raise ValueError("need at least one submap")
    cs = params.cell_size
    corners = []
    for sm in submaps:
        pose = anchor_poses[sm.anchor_id]
        nx, ny = sm.grid.shape
        ext = np.array([[0.0, 0.0], [nx * cs, 0.0], [0.0, ny * cs],
                        [nx * cs, ny * cs]]) + sm.grid.origin
        corners.append(transform_points(ext, pose))
    corners = np.vstack(corners)
    lo = np.floor(corners.min(axis=0) / cs) * cs - cs
    hi = np.ceil(corners.max(axis=0) / cs) * cs + cs
    size = np.ceil((hi - lo) / cs).astype(int)
    out = OccupancyGrid(lo, (int(size[0]), int(size[1])), params)

    for sm in submaps:
        pose = anchor_poses[sm.anchor_id]
        obs = np.nonzero(sm.grid.observed)
        if len(obs[0]) == 0:
            continue
        centers = (np.column_stack(obs) + 0.5) * cs + sm.grid.origin
        world = transform_points(centers, pose)
        cells = out.cell_of(world)
        np.add.at(out.logodds, (cells[:, 0], cells[:, 1]),
                  sm.grid.logodds[obs])
        out.observed[cells[:, 0], cells[:, 1]] = 1
    np.clip(out.logodds, out._l_min, out._l_max, out=out.logodds)
    return out
