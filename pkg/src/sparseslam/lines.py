"""Polar-line features: orthogonal least-squares fitting with first-order
covariance, split-and-merge segmentation, landmark association, and
segment endpoint maintenance.

A line is (rho, alpha): perpendicular distance rho >= 0 from the origin
and normal direction alpha in [-pi, pi). Points on the line satisfy
x*cos(alpha) + y*sin(alpha) = rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import norm_angle


class DegenerateInput(ValueError):
    """Fewer than two distinct points; no line is defined."""


@dataclass
class PolarLine:
    rho: float
    alpha: float

    def __post_init__(self):
        self.rho, self.alpha = canonical(self.rho, self.alpha)

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.alpha])


def canonical(rho: float, alpha: float) -> tuple[float, float]:
    """Flip to rho >= 0 and wrap alpha to [-pi, pi)."""
    if rho < 0.0:
        rho, alpha = -rho, alpha + math.pi
    return rho, norm_angle(alpha)


def line_vectors(line) -> tuple[np.ndarray, np.ndarray]:
    """Foot point a = rho*(cos a, sin a) and direction d = (-sin a, cos a)."""
    rho, alpha = _unpack(line)
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([rho * c, rho * s]), np.array([-s, c])


def _unpack(line):
    if isinstance(line, PolarLine):
        return line.rho, line.alpha
    return float(line[0]), float(line[1])


@dataclass
class SegmentObservation:
    """A fitted line segment in the observing frame."""

    line: PolarLine
    endpoints: np.ndarray                  # (2, 2), on the fitted line
    point_indices: np.ndarray              # indices into the source points
    line_cov: np.ndarray | None = None     # filled once point covs are known


@dataclass
class Landmark:
    """A global-frame line landmark with its current extent."""

    id: int
    line: PolarLine
    endpoints: np.ndarray                  # (2, 2) global frame
    observations: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _fit_params(points: np.ndarray):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise DegenerateInput("need at least 2 points")
    mean = points.mean(axis=0)
    d = points - mean
    sxx = float(d[:, 0] @ d[:, 0])
    syy = float(d[:, 1] @ d[:, 1])
    sxy = float(d[:, 0] @ d[:, 1])
    if sxx + syy < 1e-24:
        raise DegenerateInput("all points coincident")
    num = -2.0 * sxy
    den = syy - sxx
    alpha = 0.5 * math.atan2(num, den)
    rho = mean[0] * math.cos(alpha) + mean[1] * math.sin(alpha)
    return mean, sxx, syy, sxy, rho, alpha


def fit_line(points: np.ndarray,
             point_covs: np.ndarray | None = None) -> tuple[PolarLine, np.ndarray | None]:
    """Orthogonal-distance least-squares line through the points.

    With per-point 2x2 covariances given, also assembles the 2x2 line
    covariance from the fit Jacobians (points assumed uncorrelated).
    """
    _, _, _, _, rho, alpha = _fit_params(points)
    line = PolarLine(rho, alpha)
    cov = None
    if point_covs is not None:
        jk = fit_line_jacobians(points)             # (N, 2, 2)
        covs = np.asarray(point_covs, dtype=float)
        cov = np.einsum("kij,kjl,kml->im", jk, covs, jk)
        cov = 0.5 * (cov + cov.T)
    return line, cov


def fit_line_jacobians(points: np.ndarray) -> np.ndarray:
    """d(rho, alpha)/d(p_k) for each point, (N, 2, 2), including the
    rho >= 0 canonicalization."""
    points = np.asarray(points, dtype=float)
    mean, sxx, syy, sxy, rho, alpha = _fit_params(points)
    n = len(points)
    d = points - mean
    num = -2.0 * sxy
    den = syy - sxx
    mag = num * num + den * den
    if mag < 1e-24:
        dalpha = np.zeros((n, 2))     # direction undefined; treat as flat
    else:
        dnum_dx = -2.0 * d[:, 1]
        dnum_dy = -2.0 * d[:, 0]
        dden_dx = -2.0 * d[:, 0]
        dden_dy = 2.0 * d[:, 1]
        dalpha = 0.5 / mag * np.column_stack([
            den * dnum_dx - num * dden_dx,
            den * dnum_dy - num * dden_dy,
        ])
    c, s = math.cos(alpha), math.sin(alpha)
    drho_dalpha = -mean[0] * s + mean[1] * c
    drho = np.column_stack([
        c / n + drho_dalpha * dalpha[:, 0],
        s / n + drho_dalpha * dalpha[:, 1],
    ])
    if rho < 0.0:
        drho = -drho
    out = np.empty((n, 2, 2))
    out[:, 0, :] = drho
    out[:, 1, :] = dalpha
    return out


def orthogonal_residuals(points: np.ndarray, line) -> np.ndarray:
    rho, alpha = _unpack(line)
    points = np.asarray(points, dtype=float)
    return points[:, 0] * math.cos(alpha) + points[:, 1] * math.sin(alpha) - rho


# ---------------------------------------------------------------------------
# Split and merge
# ---------------------------------------------------------------------------

@dataclass
class SplitMergeParams:
    split_threshold: float = 0.05     # max orthogonal residual, meters
    min_points: int = 5
    merge_alpha_gap: float = 0.05     # radians


def split_and_merge(points: np.ndarray,
                    params: SplitMergeParams) -> list[SegmentObservation]:
    """Segment an ordered point sequence into fitted line segments.

    Splits at the maximum-residual point until every piece fits within the
    threshold, drops pieces below min_points, then merges adjacent pieces
    whose normals agree and whose joint refit still fits.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < params.min_points:
        return []

    ranges: list[tuple[int, int]] = []
    _split(points, 0, n - 1, params, ranges)
    ranges = _merge(points, ranges, params)
    return [_make_segment(points, i, j) for i, j in ranges]


def _split(points, i, j, params, out):
    count = j - i + 1
    if count < params.min_points:
        return
    seg = points[i:j + 1]
    try:
        line, _ = fit_line(seg)
    except DegenerateInput:
        return
    res = np.abs(orthogonal_residuals(seg, line))
    if res.max() <= params.split_threshold:
        out.append((i, j))
        return
    k = i + int(np.argmax(res))
    k = min(max(k, i + 1), j - 1)
    _split(points, i, k, params, out)
    _split(points, k, j, params, out)


def _merge(points, ranges, params):
    ranges = list(ranges)
    changed = True
    while changed and len(ranges) > 1:
        changed = False
        for idx in range(len(ranges) - 1):
            i0, j0 = ranges[idx]
            i1, j1 = ranges[idx + 1]
            la, _ = fit_line(points[i0:j0 + 1])
            lb, _ = fit_line(points[i1:j1 + 1])
            if abs(norm_angle(la.alpha - lb.alpha)) > params.merge_alpha_gap:
                continue
            joint = points[i0:j1 + 1]
            line, _ = fit_line(joint)
            if np.abs(orthogonal_residuals(joint, line)).max() <= params.split_threshold:
                ranges[idx] = (i0, j1)
                del ranges[idx + 1]
                changed = True
                break
    return ranges


def _make_segment(points, i, j):
    seg = points[i:j + 1]
    line, _ = fit_line(seg)
    a, d = line_vectors(line)
    t = (seg - a) @ d
    endpoints = np.vstack([a + t.min() * d, a + t.max() * d])
    return SegmentObservation(line, endpoints, np.arange(i, j + 1))


# ---------------------------------------------------------------------------
# Association (projection error + endpoint overlap)
# ---------------------------------------------------------------------------

def projection_error(endpoints: np.ndarray, line) -> tuple[float, float, float]:
    """Summed endpoint-to-line distance and the projection parameters."""
    a, d = line_vectors(line)
    t1 = float((endpoints[0] - a) @ d)
    t2 = float((endpoints[1] - a) @ d)
    err = (np.linalg.norm(endpoints[0] - (a + t1 * d))
           + np.linalg.norm(endpoints[1] - (a + t2 * d)))
    return err, t1, t2


def associate(seg_endpoints: np.ndarray, landmarks,
              epsilon: float, overlap_slack: float = 0.0) -> int | None:
    """Pick the landmark with the smallest projection error among those
    passing both the error threshold and the interval-overlap test; the
    segment endpoints must already be in the global frame."""
    best_id = None
    best_err = math.inf
    for lm in landmarks:
        err, t1, t2 = projection_error(seg_endpoints, lm.line)
        if err > epsilon:
            continue
        a, d = line_vectors(lm.line)
        s1 = float((lm.endpoints[0] - a) @ d)
        s2 = float((lm.endpoints[1] - a) @ d)
        lo_s, hi_s = min(s1, s2), max(s1, s2)
        lo_t, hi_t = min(t1, t2), max(t1, t2)
        if min(hi_s, hi_t) - max(lo_s, lo_t) < -overlap_slack:
            continue
        if err < best_err:
            best_err = err
            best_id = lm.id
    return best_id


def update_endpoints(landmark: Landmark,
                     observed_endpoints: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Hull of all projected observation intervals on the landmark's
    current line; observations must already be in the global frame."""
    if not observed_endpoints:
        raise ValueError("landmark has no observations")
    a, d = line_vectors(landmark.line)
    s1, s2 = math.inf, -math.inf
    for ep in observed_endpoints:
        t = (np.asarray(ep, dtype=float) - a) @ d
        s1 = min(s1, float(t.min()))
        s2 = max(s2, float(t.max()))
    return a + s1 * d, a + s2 * d
