"""Frontend landmark graph: a per-scan pose chain with odometry
constraints plus polar-line landmarks observed through multiscans.

Each incoming scan appends a pose vertex, rebuilds the sliding multiscan,
extracts line segments, associates them with landmarks (creating new ones
when association fails), optimizes, and accepts or rolls back the whole
constraint batch with a chi-squared consistency gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import chi2 as chi2_dist

from . import lines as lf
from .data_io import RunConfig, Scan
from .geometry import (MotionDelta, Pose2, compose_delta, compose_jacobians,
                       inverse_delta_covariance, invert_delta, make_psd,
                       raw_point_covariance, relative, transform_points,
                       transformed_point_covariance, SensorModel)
from .solver import (OdometryFamily, PoseLineFamily, Problem, SolveReport,
                     solve)
from .solver import _Rows


@lru_cache(maxsize=4096)
def chi2_threshold(n: int, confidence: float = 0.95) -> float:
    return float(chi2_dist.ppf(confidence, n))


def odometry_covariance(delta: MotionDelta, cfg: RunConfig) -> np.ndarray:
    """Per-step motion noise: multiplicative in the commanded motion with
    an additive floor (the log format carries no covariances)."""
    sx = cfg.odom_a1 * abs(delta.dx) + cfg.odom_a2
    sy = cfg.odom_a1 * abs(delta.dy) + cfg.odom_a2
    st = cfg.odom_a3 * abs(delta.dtheta) + cfg.odom_a4
    return np.diag([sx * sx, sy * sy, st * st])


@dataclass
class MultiScan:
    """Recent scans accumulated in the newest pose's frame."""

    ref_pose_id: int
    points: np.ndarray                # (M, 2)
    covs: np.ndarray                  # (M, 2, 2)
    pose_ids: list


@dataclass
class GraphSnapshot:
    """Vertex estimates plus edge/variable boundary markers; restoring
    reproduces the saved state bit-identically."""

    state: tuple
    edge_markers: dict
    obs_count: int
    var_count: int
    pool_counts: tuple
    next_landmark_id: int


@dataclass
class StepReport:
    pose_id: int
    segments: int = 0
    associations: int = 0
    new_landmarks: int = 0
    rolled_back: bool = False
    chi2: float = 0.0
    dof: int = 0
    multiscan_points: int = 0
    solve: SolveReport | None = None


@dataclass
class _ScanRecord:
    pose_id: int
    timestamp: float
    points: np.ndarray            # (n, 2) body frame, valid beams only
    bearings: np.ndarray          # (n,)
    beam_slots: np.ndarray        # (n,) original beam indices


class LandmarkGraph:
    """Single-writer frontend graph; see module docstring."""

    def __init__(self, config: RunConfig):
        self.cfg = config
        self.problem = Problem()
        self.problem.register_family("odom", OdometryFamily())
        self.problem.register_family("pose_line", PoseLineFamily())
        self.pose_vids: list[int] = []
        self.timestamps: list[float] = []
        self.landmarks: dict[int, lf.Landmark] = {}
        self._lm_vids: dict[int, int] = {}
        self._next_landmark_id = 0
        # full-history odometry record (survives pruning; feeds multiscan
        # covariance chains and the backend state copy)
        self._odo_deltas = _Rows((3,))
        self._odo_covs = _Rows((3, 3))
        # per-edge metadata parallel to the problem's families
        self._odo_from = _Rows((), dtype=np.int64)
        self._obs_pose = _Rows((), dtype=np.int64)
        self._obs_landmark = _Rows((), dtype=np.int64)
        self._obs_endpoints = _Rows((2, 2))
        self._scans: list[_ScanRecord] = []
        self._last_odom: Pose2 | None = None
        self._gauge_index = 0
        self._sensor = SensorModel(config.sigma_d, config.range_cap)
        self._sm_params = lf.SplitMergeParams(config.split_threshold,
                                              config.min_points,
                                              config.merge_alpha_gap)

    # -- poses ---------------------------------------------------------------

    @property
    def num_poses(self) -> int:
        return len(self.pose_vids)

    def pose_estimate(self, index: int) -> Pose2:
        # pose variables are the only dim-3 variables and are created in
        # scan order, so pose-pool row == pose index
        return Pose2.from_array(self.problem.pose_values()[index])

    def pose_array(self) -> np.ndarray:
        """(N, 3) copy of all pose estimates in scan order."""
        return self.problem.pose_values()[:self.num_poses].copy()

    def _add_origin(self) -> int:
        vid = self.problem.add_pose_variable(np.zeros(3), fixed=True)
        self.pose_vids.append(vid)
        return 0

    def add_pose(self, delta: MotionDelta, delta_cov: np.ndarray) -> int:
        """Append a pose (bootstrapping the fixed origin on first use) and
        its odometry edge; returns the new pose index."""
        cov = np.asarray(delta_cov, dtype=float)
        make_psd(cov)     # rejects non-PSD input
        if not self.pose_vids:
            self._add_origin()
        prev = self.pose_estimate(len(self.pose_vids) - 1)
        est = compose_delta(prev, delta)
        vid = self.problem.add_pose_variable(est.as_array())
        self.pose_vids.append(vid)
        index = len(self.pose_vids) - 1
        self.problem.add_residual(
            "odom", [self.pose_vids[index - 1], vid], delta.as_array(),
            np.linalg.inv(cov))
        self._odo_deltas.append(delta.as_array())
        self._odo_covs.append(cov)
        self._odo_from.append(index - 1)
        return index

    # -- multiscan -------------------------------------------------------------

    def build_multiscan(self, k: int | None = None) -> MultiScan:
        """Assemble the last k+1 scans in the newest scan's frame, with
        per-point covariance from the odometry chain and the range noise.

        Points are ordered beam-major (each physical beam's track over
        time stays contiguous) so segmentation sees coherent wall traces.
        """
        if not self._scans:
            raise ValueError("no scans recorded")
        if k is None:
            k = self.cfg.scans_per_multiscan - 1
        window = self._scans[-(k + 1):]
        ref = window[-1]
        t = ref.pose_id

        # accumulate u_{i,t} tail-first from per-step estimate deltas
        transforms: dict[int, tuple[MotionDelta, np.ndarray]] = {
            t: (MotionDelta(), np.zeros((3, 3)))}
        chain = MotionDelta()
        chain_cov = np.zeros((3, 3))
        for i in range(t - 1, window[0].pose_id - 1, -1):
            step = relative(self.pose_estimate(i), self.pose_estimate(i + 1))
            step_cov = self._odo_covs.view()[i]
            ja, jb = compose_jacobians(step, chain)
            chain_cov = ja @ step_cov @ ja.T + jb @ chain_cov @ jb.T
            chain = compose_delta(step, chain)
            transforms[i] = (chain, chain_cov)

        n_beams = max((int(rec.beam_slots.max()) + 1)
                      for rec in window if len(rec.beam_slots)) \
            if any(len(r.beam_slots) for r in window) else 0
        pts_out, cov_out, pose_ids = [], [], []
        for beam in range(n_beams):
            for rec in window:
                sel = np.nonzero(rec.beam_slots == beam)[0]
                if len(sel) == 0 or rec.pose_id not in transforms:
                    continue
                u_it, u_cov = transforms[rec.pose_id]
                u_inv = invert_delta(u_it)
                u_inv_cov = inverse_delta_covariance(u_it, u_cov) \
                    if rec.pose_id != t else np.zeros((3, 3))
                for j in sel:
                    p = rec.points[j]
                    p_cov = raw_point_covariance(rec.bearings[j], self._sensor)
                    pts_out.append(transform_points(p[None, :], u_inv)[0])
                    cov_out.append(transformed_point_covariance(
                        p, u_inv, u_inv_cov, p_cov))
                    pose_ids.append(rec.pose_id)
        if not pts_out:
            return MultiScan(t, np.zeros((0, 2)), np.zeros((0, 2, 2)), [])
        return MultiScan(t, np.asarray(pts_out), np.asarray(cov_out),
                         pose_ids)

    def extract_segments(self, ms: MultiScan) -> list[lf.SegmentObservation]:
        """Split-and-merge over the multiscan, with each segment's line
        covariance assembled from the contributing point covariances."""
        pts = ms.points
        if self.cfg.point_order == "bearing":
            order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]))
            pts = pts[order]
            covs = ms.covs[order]
        else:
            covs = ms.covs
        segs = lf.split_and_merge(pts, self._sm_params)
        for seg in segs:
            jk = lf.fit_line_jacobians(pts[seg.point_indices])
            c = covs[seg.point_indices]
            cov = np.einsum("kij,kjl,kml->im", jk, c, jk)
            seg.line_cov = 0.5 * (cov + cov.T)
        return segs

    # -- association and constraints ------------------------------------------

    def associate_segment(self, seg: lf.SegmentObservation,
                          pose_id: int) -> tuple[int | None, np.ndarray]:
        pose = self.pose_estimate(pose_id)
        endpoints_global = transform_points(seg.endpoints, pose)
        lm_id = lf.associate(endpoints_global, self.landmarks.values(),
                             self.cfg.assoc_epsilon, self.cfg.overlap_slack)
        return lm_id, endpoints_global

    def insert_observation(self, pose_id: int, seg: lf.SegmentObservation,
                           lm_id: int | None) -> tuple[int, int]:
        """Insert a pose-landmark edge (creating the landmark first if
        needed); returns (landmark id, edge row)."""
        pose = self.pose_estimate(pose_id)
        if lm_id is None:
            lm_id = self._next_landmark_id
            self._next_landmark_id += 1
            global_line = lf.PolarLine(*transform_line_to_global(
                seg.line, pose))
            vid = self.problem.add_line_variable(global_line.as_array())
            self._lm_vids[lm_id] = vid
            endpoints_global = transform_points(seg.endpoints, pose)
            self.landmarks[lm_id] = lf.Landmark(lm_id, global_line,
                                                endpoints_global)
        info = np.linalg.inv(seg.line_cov + 1e-12 * np.eye(2))
        row = self.problem.add_residual(
            "pose_line", [self.pose_vids[pose_id], self._lm_vids[lm_id]],
            seg.line.as_array(), info)
        self._obs_pose.append(pose_id)
        self._obs_landmark.append(lm_id)
        self._obs_endpoints.append(seg.endpoints)
        self.landmarks[lm_id].observations.append(row)
        return lm_id, row

    # -- objective, consistency, rollback ---------------------------------------

    def evaluate_objective(self, markers: dict | None = None) -> tuple[float, int]:
        """Objective F (sum of squared Mahalanobis errors) and dof n =
        3 * odometry edges + 2 * landmark edges; with markers given, only
        edges added after them count (batch-only gate mode)."""
        total, dof = 0.0, 0
        for name, dim in (("odom", 3), ("pose_line", 2)):
            _, _, chi2 = self.problem.evaluate_family(name)
            start = markers.get(name, 0) if markers else 0
            total += float(chi2[start:].sum())
            dof += dim * max(0, len(chi2) - start)
        return total, dof

    def check_consistency(self, f_value: float, n: int) -> bool:
        if n < 1:
            return True
        return f_value <= chi2_threshold(n)

    def take_snapshot(self) -> GraphSnapshot:
        return GraphSnapshot(
            state=self.problem.state_copy(),
            edge_markers=self.problem.edge_markers(),
            obs_count=self._obs_pose.count,
            var_count=self.problem._var_pool.count,
            pool_counts=(self.problem._pose_vals.count,
                         self.problem._line_vals.count),
            next_landmark_id=self._next_landmark_id)

    def rollback(self, snapshot: GraphSnapshot) -> None:
        """Drop edges and landmarks added after the snapshot and restore
        every estimate bit-identically."""
        self.problem.truncate_edges(snapshot.edge_markers)
        self.problem.state_restore(snapshot.state)
        self.problem._var_pool.truncate(snapshot.var_count)
        self.problem._var_slot.truncate(snapshot.var_count)
        self.problem._var_fixed.truncate(snapshot.var_count)
        self._obs_pose.truncate(snapshot.obs_count)
        self._obs_landmark.truncate(snapshot.obs_count)
        self._obs_endpoints.truncate(snapshot.obs_count)
        marker = snapshot.edge_markers.get("pose_line", 0)
        for lm_id in [i for i in self.landmarks
                      if i >= snapshot.next_landmark_id]:
            del self.landmarks[lm_id]
            del self._lm_vids[lm_id]
        for lm in self.landmarks.values():
            lm.observations = [r for r in lm.observations if r < marker]

    def optimize_step(self, max_iterations: int | None = None) -> SolveReport:
        return solve(self.problem, "levenberg_marquardt",
                     max_iterations=max_iterations
                     or self.cfg.frontend_iterations,
                     gradient_tol=self.cfg.gradient_tol,
                     step_tol=self.cfg.step_tol)

    # -- endpoints ---------------------------------------------------------------

    def update_all_endpoints(self) -> None:
        """Re-project every landmark's stored observations with the current
        pose estimates and take the hull (endpoint update procedure)."""
        if self._obs_pose.count == 0:
            return
        pose_idx = self._obs_pose.view()
        ends = self._obs_endpoints.view()
        poses = self.problem.pose_values()[pose_idx]
        c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        rot = np.stack([np.stack([c, -s], axis=-1),
                        np.stack([s, c], axis=-1)], axis=-2)
        world = np.einsum("bij,bej->bei", rot, ends) + poses[:, None, :2]
        for lm in self.landmarks.values():
            if not lm.observations:
                continue
            lm.line = lf.PolarLine(
                *self.problem.get_value(self._lm_vids[lm.id]))
            rows = np.asarray(lm.observations)
            p1, p2 = lf.update_endpoints(lm, [world[rows].reshape(-1, 2)])
            lm.endpoints = np.vstack([p1, p2])

    # -- the per-scan update (Algorithm: add, extract, associate, gate) -----------

    def process_scan(self, scan: Scan,
                     segment_filter=None) -> StepReport:
        pts = scan.points()
        bearings = scan.bearings[scan.valid]
        slots = np.nonzero(scan.valid)[0]
        if not self.pose_vids:
            pose_id = self._add_origin()
        else:
            delta = relative(self._last_odom, Pose2.from_array(scan.odom))
            pose_id = self.add_pose(delta, odometry_covariance(delta, self.cfg))
        self._last_odom = Pose2.from_array(scan.odom)
        self.timestamps.append(scan.timestamp)
        self._scans.append(_ScanRecord(pose_id, scan.timestamp, pts,
                                       bearings, slots))
        max_window = self.cfg.scans_per_multiscan + 1
        if len(self._scans) > max_window:
            self._scans = self._scans[-max_window:]

        report = StepReport(pose_id)
        snapshot = self.take_snapshot()
        ms = self.build_multiscan()
        report.multiscan_points = len(ms.points)
        segs = self.extract_segments(ms) if len(ms.points) >= self.cfg.min_points else []
        if segment_filter is not None:
            segs = segment_filter(segs)
        report.segments = len(segs)
        for seg in segs:
            lm_id, _ = self.associate_segment(seg, pose_id)
            if lm_id is None:
                report.new_landmarks += 1
            else:
                report.associations += 1
            self.insert_observation(pose_id, seg, lm_id)

        if segs:
            report.solve = self.optimize_step()
            markers = snapshot.edge_markers if self.cfg.chi2_batch_only else None
            report.chi2, report.dof = self.evaluate_objective(markers)
            if report.solve.success and self.check_consistency(report.chi2,
                                                               report.dof):
                self.update_all_endpoints()
            else:
                self.rollback(snapshot)
                report.rolled_back = True
                report.chi2, report.dof = self.evaluate_objective(markers)
        else:
            report.chi2, report.dof = self.evaluate_objective()
        return report

    # -- pruning and the backend view ----------------------------------------------

    def prune(self, keep_recent: int | None = None) -> None:
        """Drop all edges older than the keep window, fix the oldest
        retained pose as the new gauge, and delete landmarks left without
        observations. Estimates are untouched."""
        if keep_recent is None:
            keep_recent = self.cfg.keep_recent_windows * self.cfg.scans_per_multiscan
        cutoff = max(0, self.num_poses - keep_recent)
        if cutoff == 0:
            return
        keep_odo = self._odo_from.view() >= cutoff
        self.problem.compact_edges("odom", keep_odo)
        self._odo_from.compact(keep_odo)

        keep_obs = self._obs_pose.view() >= cutoff
        remap = self.problem.compact_edges("pose_line", keep_obs)
        self._obs_pose.compact(keep_obs)
        self._obs_landmark.compact(keep_obs)
        self._obs_endpoints.compact(keep_obs)
        for lm_id in list(self.landmarks):
            lm = self.landmarks[lm_id]
            lm.observations = [int(remap[r]) for r in lm.observations
                               if remap[r] >= 0]
            if not lm.observations:
                del self.landmarks[lm_id]
                del self._lm_vids[lm_id]
        self.problem.set_fixed(self.pose_vids[cutoff], True)
        self._gauge_index = cutoff

    def backend_view(self):
        """Immutable copy for the pose-graph backend: pose estimates plus
        the full odometry-edge record."""
        return (self.pose_array(),
                self._odo_deltas.view().copy(),
                self._odo_covs.view().copy())

    # -- debug -------------------------------------------------------------------

    def dump_text(self) -> str:
        out = []
        for i, vid in enumerate(self.pose_vids):
            x, y, th = self.problem.get_value(vid)
            out.append(f"VERTEX_SE2 {i} {x:.6f} {y:.6f} {th:.6f}")
        for lm_id in sorted(self.landmarks):
            rho, alpha = self.problem.get_value(self._lm_vids[lm_id])
            out.append(f"VERTEX_LINE {lm_id} {rho:.6f} {alpha:.6f}")
        for r in range(self.problem.family_count("odom")):
            i = int(self._odo_from.view()[r])
            d = self.problem.family_meas("odom")[r]
            out.append(f"EDGE_SE2 {i} {i + 1} {d[0]:.6f} {d[1]:.6f} {d[2]:.6f}")
        for r in range(self.problem.family_count("pose_line")):
            i = int(self._obs_pose.view()[r])
            j = int(self._obs_landmark.view()[r])
            m = self.problem.family_meas("pose_line")[r]
            out.append(f"EDGE_SE2_LINE {i} {j} {m[0]:.6f} {m[1]:.6f}")
        return "\n".join(out) + "\n"


def transform_line_to_global(line, pose) -> tuple[float, float]:
    """Map a (rho, alpha) line from the frame of `pose` to the global
    frame (canonical form)."""
    rho, alpha = (line.rho, line.alpha) if isinstance(line, lf.PolarLine) \
        else (float(line[0]), float(line[1]))
    px, py, pth = (pose.x, pose.y, pose.theta) if isinstance(pose, Pose2) \
        else (float(pose[0]), float(pose[1]), float(pose[2]))
    ag = alpha + pth
    rg = rho + px * math.cos(ag) + py * math.sin(ag)
    return lf.canonical(rg, ag)


def transform_line_to_body(line, pose) -> tuple[float, float]:
    """Map a global (rho, alpha) line into the frame of `pose`."""
    rho, alpha = (line.rho, line.alpha) if isinstance(line, lf.PolarLine) \
        else (float(line[0]), float(line[1]))
    px, py, pth = (pose.x, pose.y, pose.theta) if isinstance(pose, Pose2) \
        else (float(pose[0]), float(pose[1]), float(pose[2]))
    rb = rho - px * math.cos(alpha) - py * math.sin(alpha)
    return lf.canonical(rb, alpha - pth)
