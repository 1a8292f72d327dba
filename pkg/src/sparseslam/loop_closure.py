"""Correlative scan-to-map loop closure over frozen submaps.

The search enumerates a discretized window of rigid transforms around the
odometry-predicted offset. Translation steps equal the grid cell size, so
shifting a candidate by one step shifts every point's cell index by
exactly one cell; each angular slice of the score field then reduces to
integer-offset lookups handled by the compiled kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import MotionDelta, Pose2, relative, transform_points
from .submaps import Submap

COV_FLOOR = np.array([1e-6, 1e-6, 1e-6])


@dataclass
class SearchWindow:
    """Discretized transform search space around the predicted offset."""

    xy_extent: float = 3.0          # +- meters
    theta_extent: float = 0.35      # +- radians
    linear_step: float = 0.1        # must equal the submap cell size
    angular_step: float | None = None   # default: cell / max point radius

    def __post_init__(self):
        if self.linear_step <= 0:
            raise ValueError("linear step must be > 0")
        if self.xy_extent < self.linear_step:
            raise ValueError("xy extent must cover at least one step")


@dataclass
class LoopConstraint:
    """A scan-to-map match: pose of the multiscan anchor expressed in the
    submap anchor frame, with a score-field covariance."""

    anchor_id: int
    submap_anchor_id: int
    transform: MotionDelta
    covariance: np.ndarray
    score: float


def _window_offsets(window: SearchWindow, max_radius: float):
    m = int(round(window.xy_extent / window.linear_step))
    cells = np.arange(-m, m + 1)
    astep = window.angular_step
    if astep is None:
        astep = window.linear_step / max(max_radius, window.linear_step)
    n = int(math.floor(window.theta_extent / astep))
    thetas = np.arange(-n, n + 1) * astep
    return cells, thetas


def detect(points: np.ndarray, anchor_id: int, anchor_est: Pose2,
           candidates, window: SearchWindow, threshold: float,
           min_points: int = 40) -> LoopConstraint | None:
    """Search every candidate (submap, submap world pose estimate) for the
    best-scoring transform of the multiscan; emit a constraint only if the
    best kernel score exceeds the threshold.

    Ties break toward the first candidate and, within a field, toward
    lexicographically smallest (dx, dy, dtheta).
    """
    points = np.asarray(points, dtype=float)
    candidates = list(candidates)
    if len(points) < min_points or not candidates:
        return None
    max_radius = float(np.linalg.norm(points, axis=1).max())
    cells, thetas = _window_offsets(window, max_radius)

    best = None   # (score, submap, submap_pose, field, w0, flat_index)
    for submap, submap_pose in candidates:
        if not submap.frozen:
            raise ValueError("loop closure candidates must be frozen")
        if abs(submap.grid.cell_size - window.linear_step) > 1e-12:
            raise ValueError("linear step must equal the submap cell size")
        w0 = relative(submap_pose, anchor_est)
        field = _score_field(submap, points, w0, cells, thetas)
        idx = int(np.argmax(field))
        score = float(field.flat[idx])
        if best is None or score > best[0]:
            best = (score, submap, submap_pose, field, w0, idx)

    score, submap, submap_pose, field, w0, idx = best
    ai, bi, ti = np.unravel_index(idx, field.shape)
    cs = window.linear_step
    w_star = Pose2(w0.dx + cells[ai] * cs, w0.dy + cells[bi] * cs,
                   w0.dtheta + thetas[ti])
    # recompute through the scoring op so the reported score is exactly
    # reproducible from the submap
    score = submap.score(points, w_star, use_kernel=True)
    if score <= threshold:
        return None

    offsets = np.stack(np.meshgrid(cells * cs, cells * cs, thetas,
                                   indexing="ij"), axis=-1).reshape(-1, 3)
    star_offset = np.array([cells[ai] * cs, cells[bi] * cs, thetas[ti]])
    cov = fit_constraint_covariance(offsets, field.ravel(), star_offset)
    return LoopConstraint(anchor_id, submap.anchor_id,
                          MotionDelta(w_star.x, w_star.y, w_star.theta),
                          cov, score)


def _score_field(submap: Submap, points, w0: MotionDelta, cells, thetas):
    """Kernel-score of every (dx, dy, dtheta) offset around w0."""
    values = submap.score_kernel
    unknown = submap.grid.params.unknown_score
    origin = submap.grid.origin
    cs = submap.grid.cell_size
    field = np.empty((len(cells), len(cells), len(thetas)))
    for ti, dth in enumerate(thetas):
        pts = transform_points(points, (w0.dx, w0.dy, w0.dtheta + dth))
        base = np.floor((pts - origin) / cs).astype(np.int64)
        field[:, :, ti] = _kernels.translation_score_field(
            values, base[:, 0].copy(), base[:, 1].copy(), cells, cells,
            unknown)
    return field


def fit_constraint_covariance(offsets: np.ndarray, scores: np.ndarray,
                              w_star: np.ndarray) -> np.ndarray:
    """Covariance of a match: normalized-score-weighted second moments of
    the window offsets around the winning offset, floored elementwise on
    the diagonal."""
    offsets = np.asarray(offsets, dtype=float)
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    if len(offsets) < 2 or total <= 0.0:
        return np.diag(COV_FLOOR)
    w = scores / total
    d = offsets - np.asarray(w_star, dtype=float)
    cov = np.einsum("c,ci,cj->ij", w, d, d)
    cov = 0.5 * (cov + cov.T)
    bump = np.maximum(0.0, COV_FLOOR - np.diag(cov))
    return cov + np.diag(bump)
