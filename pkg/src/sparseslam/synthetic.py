"""Self-contained synthetic worlds: wall layouts, waypoint trajectories,
ray-cast range scans, and noisy odometry, all seeded for reproducibility.

Used by the randomized tests and the acceptance suite; also reachable
through the CLI (``--format synthetic``) via a small key=value spec file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_io import CSV_BEARINGS, RunConfig, Scan
from .geometry import MotionDelta, Pose2, compose_arr, norm_angle, relative_arr
from .landmark_graph import odometry_covariance


@dataclass
class SyntheticSpec:
    world: str = "square"            # square | rooms
    size: float = 12.0               # outer wall extent, meters
    margin: float = 1.0              # path inset from the walls
    laps: int = 1
    speed: float = 0.4               # m/s
    turn_rate: float = math.pi / 4   # rad/s for in-place turns
    hz: float = 10.0
    beams: int = 4                   # generator beam count (full circle)
    sigma_d: float = 0.02
    odom_a1: float = 0.1
    odom_a2: float = 0.001
    odom_a3: float = 0.2
    odom_a4: float = 0.001
    max_range: float = 8.0           # sensor no-return distance
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        from pathlib import Path

        values = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (p.strip() for p in line.split("=", 1))
            values[key] = val
        kwargs = {}
        for f in cls.__dataclass_fields__.values():
            if f.name in values:
                v = values[f.name]
                kwargs[f.name] = v if f.type == "str" else (
                    int(v) if f.type == "int" else float(v))
        return cls(**kwargs)


@dataclass
class SyntheticRun:
    scans: list                      # noisy-odometry Scans
    gt_poses: np.ndarray             # (N, 3) ground truth
    timestamps: np.ndarray
    walls: np.ndarray                # (W, 2, 2) segments
    spec: SyntheticSpec


def rectangle_walls(x0, y0, x1, y1) -> np.ndarray:
    return np.array([
        [[x0, y0], [x1, y0]],
        [[x1, y0], [x1, y1]],
        [[x1, y1], [x0, y1]],
        [[x0, y1], [x0, y0]],
    ])


def world_walls(spec: SyntheticSpec) -> np.ndarray:
    half = spec.size / 2.0
    walls = rectangle_walls(-half, -half, half, half)
    if spec.world == "rooms":
        # partial divider with a doorway: breaks the room's symmetry so
        # different places look different to the matcher
        walls = np.concatenate([walls, np.array([
            [[-half, 0.0], [-half * 0.25, 0.0]],
            [[half * 0.35, 0.0], [half, 0.0]],
        ])])
    elif spec.world != "square":
        raise ValueError(f"unknown world {spec.world!r}")
    return walls


def square_path(spec: SyntheticSpec) -> np.ndarray:
    """Counter-clockwise square waypoint loop, repeated per lap."""
    half = spec.size / 2.0 - spec.margin
    corner = [(-half, -half), (half, -half), (half, half), (-half, half)]
    pts = [corner[0]]
    for _ in range(spec.laps):
        pts.extend(corner[1:] + [corner[0]])
    return np.asarray(pts, dtype=float)


def ray_distances(origin, angles, walls, max_range) -> np.ndarray:
    """Distance along each ray to the nearest wall, or max_range.

    Solves o + t*d = p + s*e per (ray, wall) pair and keeps the nearest
    forward hit with s in [0, 1].
    """
    ox, oy = origin
    out = np.full(len(angles), max_range)
    dx = np.cos(angles)
    dy = np.sin(angles)
    for (p, q) in walls:
        ex, ey = q[0] - p[0], q[1] - p[1]
        rx, ry = p[0] - ox, p[1] - oy
        det = ex * dy - ey * dx
        ok = np.abs(det) > 1e-12
        safe = np.where(ok, det, 1.0)
        t = (ex * ry - ey * rx) / safe
        s = (dx * ry - dy * rx) / safe
        valid = ok & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
        out = np.where(valid & (t < out), t, out)
    return out


def trajectory_from_waypoints(waypoints, spec: SyntheticSpec) -> np.ndarray:
    """Constant-speed walk along the polyline with in-place turns; one
    pose per 1/hz seconds."""
    dt = 1.0 / spec.hz
    poses = []
    heading = None
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        seg = np.asarray(b) - np.asarray(a)
        length = float(np.hypot(*seg))
        if length < 1e-9:
            continue
        target = math.atan2(seg[1], seg[0])
        if heading is None:
            heading = target
            poses.append([waypoints[0][0], waypoints[0][1], heading])
        # turn in place
        diff = norm_angle(target - heading)
        n_turn = int(math.ceil(abs(diff) / (spec.turn_rate * dt)))
        for k in range(n_turn):
            h = heading + diff * (k + 1) / n_turn
            poses.append([a[0], a[1], h])
        heading = target
        # drive
        n_drive = max(1, int(round(length / (spec.speed * dt))))
        for k in range(n_drive):
            f = (k + 1) / n_drive
            poses.append([a[0] + f * seg[0], a[1] + f * seg[1], heading])
    out = np.asarray(poses)
    out[:, 2] = norm_angle(out[:, 2])
    return out


def generate(spec: SyntheticSpec) -> SyntheticRun:
    rng = np.random.default_rng(spec.seed)
    walls = world_walls(spec)
    gt_world = trajectory_from_waypoints(square_path(spec), spec)
    n = len(gt_world)
    timestamps = np.arange(n) / spec.hz
    # evaluation frame = first pose's frame, matching the SLAM origin and
    # the integrated odometry
    gt = relative_arr(gt_world[:1], gt_world)

    if spec.beams == 4:
        bearings = CSV_BEARINGS.copy()
    else:
        bearings = -math.pi + 2 * math.pi * np.arange(spec.beams) / spec.beams

    cfg = RunConfig(odom_a1=spec.odom_a1, odom_a2=spec.odom_a2,
                    odom_a3=spec.odom_a3, odom_a4=spec.odom_a4)
    deltas = relative_arr(gt[:-1], gt[1:])
    odom = np.zeros_like(gt)
    scans = []
    for i in range(n):
        if i > 0:
            d = MotionDelta.from_array(deltas[i - 1])
            cov = odometry_covariance(d, cfg)
            noisy = deltas[i - 1] + rng.normal(0.0, np.sqrt(np.diag(cov)))
            odom[i] = compose_arr(odom[i - 1], noisy)
        dists = ray_distances(gt_world[i, :2], gt_world[i, 2] + bearings,
                              walls, spec.max_range)
        hit = dists < spec.max_range - 1e-9
        noisy_d = np.where(hit, np.maximum(
            dists + rng.normal(0.0, spec.sigma_d, len(dists)), 1e-3), 0.0)
        scans.append(Scan(timestamps[i], odom[i].copy(), bearings.copy(),
                          noisy_d, hit.copy()))
    return SyntheticRun(scans, gt, timestamps, walls, spec)


def relations_from_ground_truth(run: SyntheticRun, dt: float = 1.0,
                                stride: int = 5) -> list:
    """Kuemmerle-style relations (t1, t2, relative pose) sampled along the
    ground truth every `stride` poses with baseline `dt` seconds."""
    steps = max(1, int(round(dt * run.spec.hz)))
    rels = []
    for i in range(0, len(run.gt_poses) - steps, stride):
        d = relative_arr(run.gt_poses[i], run.gt_poses[i + steps])
        rels.append((run.timestamps[i], run.timestamps[i + steps],
                     float(d[0]), float(d[1]), float(d[2])))
    return rels


def write_relations(relations, path) -> None:
    with open(path, "w") as f:
        for t1, t2, dx, dy, dth in relations:
            f.write(f"{t1:.6f} {t2:.6f} {dx:.6f} {dy:.6f} {dth:.6f}\n")


def read_relations(path) -> list:
    from pathlib import Path

    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        out.append(tuple(vals[:5]))
    return out
