"""End-to-end orchestration: the frontend loop, submap lifecycle, the
asynchronous (or inline) backend cycle, runtime accounting, trajectory
metrics, and parameter sweeps.

The frontend and backend each keep their own world frame; after every
backend optimization the pipeline refreshes an alignment transform taken
at the newest copied pose, which places recent frontend estimates in the
backend frame when predicting loop-closure search centers.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .data_io import RunConfig, Scan
from .geometry import (Pose2, compose, compose_arr, invert, norm_angle,
                       relative, relative_arr)
from .landmark_graph import LandmarkGraph, StepReport
from .loop_closure import LoopConstraint, SearchWindow, detect
from .pose_graph import PoseGraph
from .submaps import GridParams, Submap, render_global

log = logging.getLogger(__name__)


@dataclass
class RuntimeStats:
    frontend_mean: float = 0.0
    frontend_max: float = 0.0
    backend_max: float = 0.0
    data_interval_mean: float = 0.0


@dataclass
class MetricReport:
    trans_mean: float
    trans_std: float
    rot_mean_deg: float
    rot_std_deg: float
    num_relations: int
    residuals: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {
            "abs_trans_mean": self.trans_mean,
            "abs_trans_std": self.trans_std,
            "abs_rot_mean_deg": self.rot_mean_deg,
            "abs_rot_std_deg": self.rot_std_deg,
            "num_relations": self.num_relations,
        }


@dataclass
class RunResult:
    trajectory: list                 # [(timestamp, (3,) pose)]
    odometry: list                   # dead-reckoned trajectory
    map_grid: object
    stats: RuntimeStats
    step_reports: list
    loop_constraints: list
    submap_count: int
    rolled_back_steps: int


@dataclass
class _BackendJob:
    anchor_id: int
    first_pose_id: int
    points: np.ndarray
    frontend_view: tuple
    injected: list


class Pipeline:
    """Owns the frontend graph, the submap set, and the backend graph."""

    def __init__(self, config: RunConfig):
        self.cfg = config
        self.frontend = LandmarkGraph(config)
        self.backend = PoseGraph(config)
        self.grid_params = GridParams(config.cell_size, config.p_occ,
                                      config.p_free, config.p_clamp_lo,
                                      config.p_clamp_hi, config.unknown_score)
        self.submaps: list[Submap] = []
        self.active: Submap | None = None
        self.loop_constraints: list[LoopConstraint] = []
        self.frontend_times: list[float] = []
        self.backend_times: list[float] = []
        self._correction = Pose2()         # frontend frame -> backend frame
        self._prune_requested = False
        self._inject: list[LoopConstraint] = []
        self._window = SearchWindow(config.search_xy, config.search_theta,
                                    config.cell_size)

    # -- frontend loop ---------------------------------------------------------

    def process_scan(self, scan: Scan) -> StepReport:
        t0 = time.perf_counter()
        if self._prune_requested:
            self.frontend.prune()
            self._prune_requested = False
        sparse = data_io.sparsify_scan(scan, self.cfg.beams_per_scan,
                                       self.cfg.range_cap)
        report = self.frontend.process_scan(sparse)
        self._insert_into_submap(sparse, report.pose_id)
        self.frontend_times.append(time.perf_counter() - t0)
        return report

    def _insert_into_submap(self, scan: Scan, pose_id: int) -> None:
        pose = self.frontend.pose_estimate(pose_id)
        if self.active is None:
            self.active = Submap(pose_id, self.cfg.submap_extent,
                                 self.grid_params)
        else:
            prev = self.frontend.pose_estimate(self.active.last_pose_id)
            step = relative(prev, pose)
            self.active.odometer += math.hypot(step.dx, step.dy)
        self.active.last_pose_id = pose_id

        pts, hit = _insertion_points(scan, self.cfg.range_cap)
        if len(pts):
            anchor = self.frontend.pose_estimate(self.active.anchor_id)
            rel = relative(anchor, pose)
            self.active.insert_scan(Pose2(rel.dx, rel.dy, rel.dtheta), pts, hit)

        if self.active.odometer >= self.cfg.submap_spacing:
            self.active.freeze(self.cfg.kernel)
            self.submaps.append(self.active)
            self.active = None
            return

    def submap_frozen_pending(self) -> bool:
        return bool(self.submaps) and self.active is None

    # -- backend cycle (detect, copy, prune, insert, optimize) -------------------

    def make_backend_job(self) -> _BackendJob | None:
        if not self.frontend.num_poses:
            return None
        ms = self.frontend.build_multiscan()
        injected = [c for c in self._inject
                    if max(c.anchor_id, c.submap_anchor_id) < self.frontend.num_poses]
        for c in injected:
            self._inject.remove(c)
        if len(ms.points) < self.cfg.loop_min_points and not injected:
            return None
        first = min(ms.pose_ids) if ms.pose_ids else ms.ref_pose_id
        return _BackendJob(ms.ref_pose_id, first, ms.points,
                           self.frontend.backend_view(), injected)

    def _world_estimate(self, pose_id: int, frontend_poses) -> Pose2:
        """Best world-frame estimate: backend value when copied, otherwise
        the frontend estimate mapped through the frame correction."""
        if pose_id < self.backend.frontier:
            return Pose2.from_array(self.backend.pose_estimate(pose_id))
        return compose(self._correction,
                       Pose2.from_array(frontend_poses[pose_id]))

    def run_backend_job(self, job: _BackendJob) -> bool:
        """One loop-closing cycle; returns True if a loop was accepted."""
        t0 = time.perf_counter()
        accepted = False
        poses = job.frontend_view[0]
        anchor_est = self._world_estimate(job.anchor_id, poses)
        candidates = []
        reach = (self.cfg.submap_extent / 2.0 + self.cfg.search_xy
                 + float(np.linalg.norm(job.points, axis=1).max(initial=0.0)))
        for sm in self.submaps:
            if sm.last_pose_id >= job.first_pose_id:
                continue    # submap overlaps the multiscan's own scans
            sm_est = self._world_estimate(sm.anchor_id, poses)
            if math.hypot(sm_est.x - anchor_est.x,
                          sm_est.y - anchor_est.y) > reach:
                continue
            candidates.append((sm, sm_est))

        constraint = None
        if candidates and len(job.points) >= self.cfg.loop_min_points:
            constraint = detect(job.points, job.anchor_id, anchor_est,
                                candidates, self._window,
                                self.cfg.loop_score_threshold,
                                self.cfg.loop_min_points)
        pending = list(job.injected)
        if constraint is not None:
            pending.append(constraint)
        if pending:
            self.backend.copy_state(job.frontend_view)
            self._prune_requested = True
            for c in pending:
                self.backend.add_loop(c, self.cfg.dcs_phi)
                self.loop_constraints.append(c)
            report = self.backend.optimize()
            if report.success:
                accepted = True
                self._refresh_correction(poses)
            log.info("loop closure %s: chi2 %.3g -> %.3g",
                     "ok" if report.success else "failed",
                     report.initial_chi2, report.final_chi2)
        self.backend_times.append(time.perf_counter() - t0)
        return accepted

    def _refresh_correction(self, frontend_poses) -> None:
        last = self.backend.frontier - 1
        if last < 0 or last >= len(frontend_poses):
            return
        fe = Pose2.from_array(frontend_poses[last])
        be = Pose2.from_array(self.backend.pose_estimate(last))
        self._correction = compose(be, invert(fe))

    def inject_loop(self, constraint: LoopConstraint) -> None:
        """Queue a fabricated loop constraint (fault-injection for tests)."""
        self._inject.append(constraint)

    # -- finalize ---------------------------------------------------------------

    def finalize(self):
        if self._prune_requested:
            self.frontend.prune()
            self._prune_requested = False
        if self.active is not None and self.active.point_count:
            self.active.freeze(self.cfg.kernel)
            self.submaps.append(self.active)
            self.active = None
        self.backend.copy_state(self.frontend.backend_view())
        traj = self.backend.trajectory()
        anchors = {sm.anchor_id: Pose2.from_array(traj[sm.anchor_id])
                   for sm in self.submaps}
        grid = render_global(self.submaps, anchors, self.grid_params) \
            if self.submaps else None
        return traj, grid


def _insertion_points(scan: Scan, cap: float):
    """Occupancy-update endpoints: valid beams are hits; capped beams
    carve free space out to the cap without asserting an obstacle."""
    b, r = scan.bearings, scan.ranges
    capped = (~scan.valid) & (r > cap)
    use = scan.valid | capped
    dist = np.where(scan.valid, r, cap)[use]
    ang = b[use]
    pts = np.column_stack([dist * np.cos(ang), dist * np.sin(ang)])
    return pts, scan.valid[use].astype(np.uint8)


# ---------------------------------------------------------------------------
# run / evaluate / sweep
# ---------------------------------------------------------------------------

def run(config: RunConfig, scans, out_dir=None,
        inject_loops=None) -> RunResult:
    """Process every scan in order through the frontend, with backend
    cycles after each submap freeze (inline when deterministic, on a
    worker thread otherwise); then render and optionally write outputs."""
    scans = list(scans)
    if not scans:
        raise data_io.DataError("no scans to process")
    pipe = Pipeline(config)
    for c in inject_loops or []:
        pipe.inject_loop(c)

    reports = []
    worker = None if config.deterministic_mode else _BackendWorker(pipe)
    try:
        for scan in scans:
            reports.append(pipe.process_scan(scan))
            if pipe.submap_frozen_pending():
                job = pipe.make_backend_job()
                if job is not None:
                    if worker is None:
                        pipe.run_backend_job(job)
                    else:
                        worker.submit(job)
    finally:
        if worker is not None:
            worker.stop()

    traj_arr, grid = pipe.finalize()
    timestamps = pipe.frontend.timestamps
    trajectory = [(timestamps[i], traj_arr[i]) for i in range(len(traj_arr))]
    odometry = [(s.timestamp, s.odom.copy()) for s in scans]

    ft = np.asarray(pipe.frontend_times)
    intervals = np.diff([s.timestamp for s in scans])
    stats = RuntimeStats(
        frontend_mean=float(ft.mean()),
        frontend_max=float(ft.max()),
        backend_max=float(max(pipe.backend_times, default=0.0)),
        data_interval_mean=float(intervals.mean()) if len(intervals) else 0.0)

    result = RunResult(trajectory, odometry, grid, stats, reports,
                       pipe.loop_constraints, len(pipe.submaps),
                       sum(r.rolled_back for r in reports))
    if out_dir is not None:
        _write_outputs(result, Path(out_dir))
    return result


class _BackendWorker:
    """Single background loop-closing context with single-slot handoff."""

    def __init__(self, pipe: Pipeline):
        self.pipe = pipe
        self.queue: queue.Queue = queue.Queue(maxsize=1)
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def submit(self, job):
        try:
            self.queue.put_nowait(job)
        except queue.Full:
            pass    # backend busy; skip this cycle

    def _loop(self):
        while True:
            job = self.queue.get()
            if job is None:
                return
            try:
                self.pipe.run_backend_job(job)
            except Exception:
                log.exception("backend cycle failed")

    def stop(self):
        self.queue.put(None)
        self.thread.join()


def _write_outputs(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data_io.write_trajectory(result.trajectory, out_dir / "trajectory.txt")
    data_io.write_trajectory(result.odometry, out_dir / "odometry.txt")
    if result.map_grid is not None:
        pgm = data_io.write_pgm(result.map_grid.probabilities(),
                                result.map_grid.observed.astype(bool))
        (out_dir / "map.pgm").write_bytes(pgm)
    report = {
        "frontend_mean": result.stats.frontend_mean,
        "frontend_max": result.stats.frontend_max,
        "backend_max": result.stats.backend_max,
        "data_interval_mean": result.stats.data_interval_mean,
        "loop_closures": len(result.loop_constraints),
        "submaps": result.submap_count,
        "rolled_back_steps": result.rolled_back_steps,
    }
    data_io.write_metrics(report, out_dir / "metrics.txt")


def evaluate(trajectory, relations, max_dt: float = 0.1) -> MetricReport:
    """Relative-displacement error against ground-truth relations
    (t1, t2, dx, dy, dtheta): for each relation, compare the estimated
    relative pose between the nearest trajectory stamps to the reference."""
    if isinstance(trajectory, (str, Path)):
        trajectory = data_io.read_trajectory(trajectory)
    times = np.asarray([t for t, _ in trajectory])
    poses = np.stack([np.asarray(p) for _, p in trajectory])
    trans, rot = [], []
    for t1, t2, dx, dy, dth in relations:
        i = int(np.argmin(np.abs(times - t1)))
        j = int(np.argmin(np.abs(times - t2)))
        if abs(times[i] - t1) > max_dt or abs(times[j] - t2) > max_dt:
            continue
        d = relative_arr(poses[i], poses[j])
        err = relative_arr(np.array([dx, dy, dth]), d)
        trans.append(math.hypot(err[0], err[1]))
        rot.append(abs(norm_angle(err[2])))
    if not trans:
        raise ValueError("no relations could be resolved against the trajectory")
    trans = np.asarray(trans)
    rot = np.degrees(np.asarray(rot))
    return MetricReport(float(trans.mean()), float(trans.std()),
                        float(rot.mean()), float(rot.std()), len(trans),
                        residuals=trans)


def absolute_trajectory_error(trajectory, gt_poses, gt_times) -> tuple[float, float]:
    """Mean absolute translational (m) and rotational (deg) error against
    a dense ground truth, matched by timestamp, no alignment."""
    times = np.asarray([t for t, _ in trajectory])
    poses = np.stack([np.asarray(p) for _, p in trajectory])
    gt_times = np.asarray(gt_times)
    idx = np.searchsorted(gt_times, times).clip(0, len(gt_times) - 1)
    gt = np.asarray(gt_poses)[idx]
    trans = np.hypot(poses[:, 0] - gt[:, 0], poses[:, 1] - gt[:, 1])
    rot = np.abs(norm_angle(poses[:, 2] - gt[:, 2]))
    return float(trans.mean()), float(np.degrees(rot.mean()))


def sweep(config: RunConfig, axis: str, values, scans,
          relations) -> list[tuple]:
    """One full run per value on a shared input; individual failures are
    recorded and the sweep continues."""
    axis_key = {"kernel": "kernel", "multiscan_size": "multiscan_size",
                "multiscan": "multiscan_size", "beams": "beams_per_scan"}
    if axis not in axis_key:
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg = config.replace(**{axis_key[axis]: value})
        try:
            result = run(cfg, scans)
            report = evaluate(result.trajectory, relations)
            rows.append((value, report, None))
        except Exception as exc:    # recorded, sweep continues
            log.warning("sweep value %r failed: %s", value, exc)
            rows.append((value, None, exc))
    return rows
