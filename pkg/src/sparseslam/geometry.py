"""SE(2) algebra: pose composition, point transforms, Jacobians, and the
first-order covariance propagation used by both constraint graphs.

Conventions:
  - Poses and motion deltas are (x, y, theta) with theta in [-pi, pi).
  - ``compose(a, b)`` chains b (expressed in a's frame) onto a.
  - ``transform_point(p, x)`` maps a point from the frame of x into the
    global frame with the counter-clockwise rotation R(theta); the
    frame-entering map is ``transform_point(p, invert(x))``.

All functions are pure; batch variants operate on (N, 3) / (N, 2) arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def norm_angle(theta):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass
class Pose2:
    """Robot pose (x, y, theta); theta kept normalized to [-pi, pi)."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        self.theta = norm_angle(self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class MotionDelta:
    """Relative motion (dx, dy, dtheta) expressed in the starting frame."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        self.dtheta = norm_angle(self.dtheta)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    @classmethod
    def from_array(cls, a) -> "MotionDelta":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class SensorModel:
    """Range sensor noise model: per-range stddev, cap, and beam layout."""

    sigma_d: float
    range_cap: float
    beam_bearings: list | None = None

    def __post_init__(self):
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be > 0")
        if self.range_cap <= 0:
            raise ValueError("range_cap must be > 0")


# ---------------------------------------------------------------------------
# Composition algebra
# ---------------------------------------------------------------------------

def compose(a, b) -> Pose2:
    """Motion composition a (+) b; accepts Pose2/MotionDelta, returns Pose2."""
    ax, ay, at = _triple(a)
    bx, by, bt = _triple(b)
    c, s = math.cos(at), math.sin(at)
    return Pose2(ax + c * bx - s * by, ay + s * bx + c * by, at + bt)


def compose_delta(a, b) -> MotionDelta:
    """Same composition, returned as a MotionDelta (for delta chains)."""
    p = compose(a, b)
    return MotionDelta(p.x, p.y, p.theta)


def invert(a) -> Pose2:
    """Inverse element: compose(a, invert(a)) is the identity."""
    ax, ay, at = _triple(a)
    c, s = math.cos(at), math.sin(at)
    return Pose2(-ax * c - ay * s, ax * s - ay * c, -at)


def invert_delta(a) -> MotionDelta:
    p = invert(a)
    return MotionDelta(p.x, p.y, p.theta)


def relative(a, b) -> MotionDelta:
    """Motion taking a to b: invert(a) (+) b."""
    return compose_delta(invert(a), b)


def _triple(v):
    if isinstance(v, Pose2):
        return v.x, v.y, v.theta
    if isinstance(v, MotionDelta):
        return v.dx, v.dy, v.dtheta
    return float(v[0]), float(v[1]), float(v[2])


# Batch variants ------------------------------------------------------------

def compose_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise composition of (N, 3) arrays (broadcasting allowed)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = norm_angle(a[..., 2] + b[..., 2])
    return out


def invert_arr(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty_like(a)
    out[..., 0] = -a[..., 0] * c - a[..., 1] * s
    out[..., 1] = a[..., 0] * s - a[..., 1] * c
    out[..., 2] = norm_angle(-a[..., 2])
    return out


def relative_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return compose_arr(invert_arr(a), b)


# ---------------------------------------------------------------------------
# Point transforms
# ---------------------------------------------------------------------------

def transform_point(p, x) -> np.ndarray:
    """Map point p from the frame of x into the global frame."""
    px, py = float(p[0]), float(p[1])
    xx, xy, xt = _triple(x)
    c, s = math.cos(xt), math.sin(xt)
    return np.array([xx + c * px - s * py, xy + s * px + c * py])


def transform_points(pts: np.ndarray, x) -> np.ndarray:
    """Batch version of transform_point for an (N, 2) array."""
    pts = np.asarray(pts, dtype=float)
    xx, xy, xt = _triple(x)
    c, s = math.cos(xt), math.sin(xt)
    out = np.empty_like(pts)
    out[:, 0] = xx + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = xy + s * pts[:, 0] + c * pts[:, 1]
    return out


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def compose_jacobians(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of compose(a, b) w.r.t. a and b (each 3x3)."""
    _, _, at = _triple(a)
    bx, by, _ = _triple(b)
    c, s = math.cos(at), math.sin(at)
    ja = np.array([
        [1.0, 0.0, -bx * s - by * c],
        [0.0, 1.0, bx * c - by * s],
        [0.0, 0.0, 1.0],
    ])
    jb = np.array([
        [c, -s, 0.0],
        [s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return ja, jb


def invert_jacobian(a) -> np.ndarray:
    """Jacobian of invert(a) w.r.t. a (3x3)."""
    ax, ay, at = _triple(a)
    c, s = math.cos(at), math.sin(at)
    return np.array([
        [-c, -s, ax * s - ay * c],
        [s, -c, ax * c + ay * s],
        [0.0, 0.0, -1.0],
    ])


def transform_jacobians(p, x) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of transform_point(p, x): (2x3 w.r.t. x, 2x2 w.r.t. p)."""
    px, py = float(p[0]), float(p[1])
    _, _, xt = _triple(x)
    c, s = math.cos(xt), math.sin(xt)
    jx = np.array([
        [1.0, 0.0, -s * px - c * py],
        [0.0, 1.0, c * px - s * py],
    ])
    jp = np.array([[c, -s], [s, c]])
    return jx, jp


# ---------------------------------------------------------------------------
# Covariance propagation
# ---------------------------------------------------------------------------

def make_psd(m: np.ndarray, slack: float = -1e-9) -> np.ndarray:
    """Symmetrize and clamp tiny negative eigenvalues introduced by
    first-order propagation. Eigenvalues below `slack` are an error."""
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min() < slack:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    if w.min() < 0.0:
        w = np.clip(w, 0.0, None)
        m = (v * w) @ v.T
        m = 0.5 * (m + m.T)
    return m


def propagate_odometry_covariance(deltas) -> np.ndarray:
    """Covariance of a composed delta chain by recursive first-order
    propagation over (MotionDelta, Cov3) pairs, head-first:

        Cov(u1 (+) rest) = Ja Cov(u1) Ja^T + Jb Cov(rest) Jb^T
    """
    deltas = list(deltas)
    if not deltas:
        raise ValueError("delta chain must be non-empty")
    # Walk from the tail so each step composes head (+) rest.
    tail_delta, tail_cov = deltas[-1]
    tail_delta = MotionDelta(*_triple(tail_delta))
    tail_cov = np.asarray(tail_cov, dtype=float)
    for u, cov_u in reversed(deltas[:-1]):
        ja, jb = compose_jacobians(u, tail_delta)
        tail_cov = ja @ np.asarray(cov_u, dtype=float) @ ja.T + jb @ tail_cov @ jb.T
        tail_delta = compose_delta(u, tail_delta)
    return make_psd(tail_cov)


def inverse_delta_covariance(u, cov: np.ndarray) -> np.ndarray:
    """Covariance of invert(u) from Cov(u)."""
    j = invert_jacobian(u)
    return make_psd(j @ np.asarray(cov, dtype=float) @ j.T)


def raw_point_covariance(bearing: float, model: SensorModel) -> np.ndarray:
    """Rank-1 covariance of a raw range return along its (noise-free)
    bearing: sigma_d^2 * v v^T with v the beam direction."""
    c, s = math.cos(bearing), math.sin(bearing)
    v = np.array([c, s])
    return model.sigma_d ** 2 * np.outer(v, v)


def transformed_point_covariance(p, u_inv, u_inv_cov: np.ndarray,
                                 p_cov: np.ndarray) -> np.ndarray:
    """Covariance of transform_point(p, u_inv) combining the transform's
    pose uncertainty with the raw point uncertainty (inputs uncorrelated)."""
    jx, jp = transform_jacobians(p, u_inv)
    out = jx @ np.asarray(u_inv_cov, dtype=float) @ jx.T \
        + jp @ np.asarray(p_cov, dtype=float) @ jp.T
    return make_psd(out)
