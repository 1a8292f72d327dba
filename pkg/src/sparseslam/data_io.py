"""Dataset ingestion and output serialization.

Inputs: CARMEN-format logs (FLASER / ROBOTLASER1 records) and the 4-beam
CSV layout ``timestamp,x,y,theta,front,back,left,right``. Outputs: binary
PGM maps, plain-text trajectories, and key-value metric reports.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import Pose2

log = logging.getLogger(__name__)


class DataError(Exception):
    """Fatal ingestion problem (empty log, unreadable stream)."""


@dataclass
class Scan:
    """One sparse range observation with its dead-reckoned pose.

    bearings are strictly increasing; ranges and valid flags align with
    them. Invalid beams (capped, zero, or no-return) keep their slot so
    beam indices stay stable across sparsification.
    """

    timestamp: float
    odom: np.ndarray                 # (3,) dead-reckoned pose
    bearings: np.ndarray             # (N,) radians
    ranges: np.ndarray               # (N,) meters
    valid: np.ndarray                # (N,) bool

    def points(self) -> np.ndarray:
        """Cartesian endpoints of the valid beams in the sensor frame."""
        b = self.bearings[self.valid]
        r = self.ranges[self.valid]
        return np.column_stack([r * np.cos(b), r * np.sin(b)])


@dataclass
class RunConfig:
    """All tunables for one run; mirrors the flat config-file keys."""

    beams_per_scan: int = 4
    range_cap: float = 5.0
    multiscan_size: int = 120        # points per multiscan
    cell_size: float = 0.1
    kernel: str = "k3"               # none | k3 | k5 | k7
    loop_score_threshold: float = 0.55
    submap_spacing: float = 5.0      # meters of travel per submap
    dcs_phi: float = 1.0
    sigma_d: float = 0.02
    # odometry noise model: sigma = a1*|motion| + a2 (trans), a3*|dth| + a4 (rot)
    odom_a1: float = 0.1
    odom_a2: float = 0.001
    odom_a3: float = 0.2
    odom_a4: float = 0.001
    # line extraction
    split_threshold: float = 0.05
    min_points: int = 5
    merge_alpha_gap: float = 0.05
    assoc_epsilon: float = 0.2
    overlap_slack: float = 0.0
    point_order: str = "beam_major"  # beam_major | bearing
    # solver
    frontend_iterations: int = 5
    backend_iterations: int = 50
    gradient_tol: float = 1e-9
    step_tol: float = 1e-9
    chi2_batch_only: bool = False
    keep_recent_windows: int = 2     # prune window, in multiscan windows
    # loop closure
    search_xy: float = 3.0
    search_theta: float = 0.35
    loop_min_points: int = 40
    unknown_score: float = 0.3
    # occupancy updates
    p_occ: float = 0.85
    p_free: float = 0.4              # free update moves odds by logit(0.6)
    p_clamp_lo: float = 0.02
    p_clamp_hi: float = 0.98
    submap_extent: float = 20.0
    carmen_fov: float = math.pi      # FLASER field of view
    deterministic_mode: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beams_per_scan < 1:
            raise ValueError("beams_per_scan must be >= 1")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        if self.kernel not in ("none", "k3", "k5", "k7"):
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @property
    def kernel_size(self) -> int:
        return {"none": 1, "k3": 3, "k5": 5, "k7": 7}[self.kernel]

    @property
    def scans_per_multiscan(self) -> int:
        return max(1, round(self.multiscan_size / self.beams_per_scan))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Parse a flat ``key = value`` config file."""
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, val in values.items():
            if key not in by_name:
                raise DataError(f"unknown config key {key!r}")
            ftype = by_name[key].type
            if isinstance(val, str):
                if ftype == "bool":
                    val = val.lower() in ("1", "true", "yes", "on")
                elif ftype == "int":
                    val = int(val)
                elif ftype == "float":
                    val = float(val)
            kwargs[key] = val
        return cls(**kwargs)

    def replace(self, **kwargs) -> "RunConfig":
        from dataclasses import replace

        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# CARMEN logs
# ---------------------------------------------------------------------------

def carmen_bearings(n: int, fov: float) -> np.ndarray:
    """Synthesize uniform bearings over the field of view.

    Odd beam counts (181, 361) span the closed interval; even counts use
    the half-open convention, matching common CARMEN tooling.
    """
    if n == 1:
        return np.zeros(1)
    if n % 2 == 1:
        step = fov / (n - 1)
    else:
        step = fov / n
    return -fov / 2.0 + step * np.arange(n)


def parse_carmen_log(source, fov: float = math.pi, laser_max: float = 80.0):
    """Yield one Scan per FLASER/ROBOTLASER1 record.

    Malformed records are logged with their line number and skipped;
    unknown line types are silently ignored. Raises DataError if the
    stream contains no usable records.
    """
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    else:
        lines = [ln.decode() if isinstance(ln, bytes) else ln for ln in source]

    count = 0
    for lineno, raw in enumerate(lines, 1):
        tokens = raw.split()
        if not tokens:
            continue
        tag = tokens[0]
        try:
            if tag == "FLASER":
                scan = _parse_flaser(tokens, fov, laser_max)
            elif tag == "ROBOTLASER1":
                scan = _parse_robotlaser(tokens, laser_max)
            else:
                continue
        except (ValueError, IndexError) as exc:
            log.warning("skipping malformed %s record at line %d: %s",
                        tag, lineno, exc)
            continue
        count += 1
        yield scan
    if count == 0:
        raise DataError("no laser records found in log")


def _parse_flaser(tokens, fov, laser_max):
    n = int(tokens[1])
    if len(tokens) < 2 + n + 6 + 1:
        raise ValueError(f"expected {n} readings plus poses")
    ranges = np.array([float(t) for t in tokens[2:2 + n]])
    laser_pose = np.array([float(t) for t in tokens[2 + n:5 + n]])
    timestamp = float(tokens[8 + n])
    valid = (ranges > 0.0) & (ranges < laser_max)
    return Scan(timestamp, laser_pose, carmen_bearings(n, fov), ranges, valid)


def _parse_robotlaser(tokens, laser_max):
    start_angle = float(tokens[2])
    angular_res = float(tokens[4])
    max_range = float(tokens[5])
    n = int(tokens[8])
    ranges = np.array([float(t) for t in tokens[9:9 + n]])
    n_rem = int(tokens[9 + n])
    base = 10 + n + n_rem
    laser_pose = np.array([float(t) for t in tokens[base:base + 3]])
    timestamp = float(tokens[base + 11])
    bearings = start_angle + angular_res * np.arange(n)
    valid = (ranges > 0.0) & (ranges < min(max_range, laser_max))
    return Scan(timestamp, laser_pose, bearings, ranges, valid)


def write_carmen_log(scans, path) -> None:
    """Serialize scans as FLASER records (inverse of _parse_flaser)."""
    with open(path, "w") as f:
        for s in scans:
            ranges = " ".join(f"{r:.6f}" for r in s.ranges)
            pose = f"{s.odom[0]:.6f} {s.odom[1]:.6f} {s.odom[2]:.6f}"
            f.write(f"FLASER {len(s.ranges)} {ranges} {pose} {pose} "
                    f"{s.timestamp:.6f} host {s.timestamp:.6f}\n")


# ---------------------------------------------------------------------------
# 4-beam CSV logs
# ---------------------------------------------------------------------------

CSV_BEARINGS = np.array([0.0, math.pi / 2, math.pi, 3 * math.pi / 2])
_CSV_COLUMN_TO_BEARING_SLOT = (0, 2, 1, 3)   # front, back, left, right


def parse_crazyflie_csv(source):
    """Yield Scans from ``timestamp,x,y,theta,front,back,left,right`` rows.

    Beams are reordered to the strictly-increasing bearing layout
    (0, pi/2, pi, 3pi/2). Non-positive distances mark the beam invalid.
    """
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    else:
        lines = [ln.decode() if isinstance(ln, bytes) else ln for ln in source]

    count = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith(("#", "timestamp")):
            continue
        parts = line.split(",")
        try:
            vals = [float(p) for p in parts[:8]]
            if len(vals) != 8:
                raise ValueError("expected 8 columns")
        except ValueError as exc:
            log.warning("skipping malformed CSV row at line %d: %s", lineno, exc)
            continue
        ranges = np.zeros(4)
        for col, slot in enumerate(_CSV_COLUMN_TO_BEARING_SLOT):
            ranges[slot] = vals[4 + col]
        valid = ranges > 0.0
        yield Scan(vals[0], np.array(vals[1:4]), CSV_BEARINGS.copy(),
                   ranges, valid)
        count += 1
    if count == 0:
        raise DataError("no rows found in CSV log")


def write_crazyflie_csv(scans, path) -> None:
    with open(path, "w") as f:
        f.write("timestamp,x,y,theta,front,back,left,right\n")
        for s in scans:
            if len(s.ranges) != 4:
                raise ValueError("CSV format requires exactly 4 beams")
            front, left, back, right = s.ranges
            f.write(f"{s.timestamp:.6f},{s.odom[0]:.6f},{s.odom[1]:.6f},"
                    f"{s.odom[2]:.6f},{front:.6f},{back:.6f},{left:.6f},"
                    f"{right:.6f}\n")


# ---------------------------------------------------------------------------
# Sparsification
# ---------------------------------------------------------------------------

def sparsify_scan(scan: Scan, n: int, cap: float) -> Scan:
    """Keep n beams at ceil-spaced indices over [0, N-1] (both endpoints
    included) and invalidate distances above the cap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = len(scan.bearings)
    if n > total:
        log.warning("requested %d beams from a %d-beam scan; keeping all",
                    n, total)
        idx = np.arange(total)
    elif n == 1:
        idx = np.array([0])
    else:
        idx = np.ceil(np.arange(n) * (total - 1) / (n - 1)).astype(int)
    ranges = scan.ranges[idx]
    valid = scan.valid[idx] & (ranges <= cap)
    return Scan(scan.timestamp, scan.odom.copy(), scan.bearings[idx],
                ranges, valid)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def write_pgm(prob: np.ndarray, observed: np.ndarray | None = None) -> bytes:
    """Binary PGM (P5): 0 = occupied, 255 = free, 128 = unknown.

    `prob` is indexed [ix, iy] with x east / y north; rows are emitted
    north-up. Unobserved cells render as 128.
    """
    prob = np.asarray(prob, dtype=float)
    nx, ny = prob.shape
    img = np.rint(255.0 * (1.0 - prob)).astype(np.uint8)
    if observed is not None:
        img = np.where(observed, img, np.uint8(128))
    raster = img.T[::-1, :]           # row 0 = max y
    header = f"P5\n{nx} {ny}\n255\n".encode()
    return header + raster.tobytes()


def write_trajectory(poses, path) -> None:
    """One line per pose: ``timestamp x y theta`` at 6 decimals."""
    with open(path, "w") as f:
        for t, pose in poses:
            x, y, th = (pose.as_array() if isinstance(pose, Pose2)
                        else np.asarray(pose))
            f.write(f"{t:.6f} {x:.6f} {y:.6f} {th:.6f}\n")


def read_trajectory(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        t, x, y, th = (float(v) for v in line.split())
        out.append((t, np.array([x, y, th])))
    return out


def format_metrics(report: dict) -> str:
    """Flat ``key value`` text; None values are omitted."""
    lines = []
    for key, val in report.items():
        if val is None:
            continue
        if isinstance(val, float):
            lines.append(f"{key} {val:.6g}")
        else:
            lines.append(f"{key} {val}")
    return "\n".join(lines) + "\n"


def write_metrics(report: dict, path) -> None:
    Path(path).write_text(format_metrics(report))
