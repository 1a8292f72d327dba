"""Backend pose graph: the global pose chain copied from the frontend,
plus DCS-robustified loop-closure edges.

State copying derives each odometry edge from consecutive frontend pose
estimates and chains new vertex estimates onto the already-optimized ones,
so estimates corrected by earlier loop closures are never overwritten.
"""

from __future__ import annotations

import numpy as np

from .data_io import RunConfig
from .geometry import compose_arr, relative_arr
from .loop_closure import LoopConstraint
from .solver import DcsKernel, OdometryFamily, Problem, SolveReport, solve


class PoseGraph:
    def __init__(self, config: RunConfig):
        self.cfg = config
        self.problem = Problem()
        self.problem.register_family("odom", OdometryFamily())
        self.problem.register_family("loop", OdometryFamily())
        self.pose_vids: list[int] = []
        self.loops: list[LoopConstraint] = []
        self.loops_since_optimize = 0

    @property
    def frontier(self) -> int:
        return len(self.pose_vids)

    def trajectory(self) -> np.ndarray:
        """(N, 3) copy of the backend pose estimates."""
        return self.problem.pose_values()[:self.frontier].copy()

    def pose_estimate(self, index: int) -> np.ndarray:
        return self.problem.pose_values()[index].copy()

    def copy_state(self, frontend_view) -> int:
        """Extend the chain from a frontend snapshot (poses, odometry edge
        deltas, odometry edge covariances); returns the number of new
        vertices. Edges measure the relative pose between consecutive
        frontend estimates; covariances copy from the frontend edges."""
        poses, _deltas, covs = frontend_view
        if len(poses) <= self.frontier:
            return 0
        added = 0
        if self.frontier == 0:
            vid = self.problem.add_pose_variable(poses[0], fixed=True)
            self.pose_vids.append(vid)
            added += 1
        start = self.frontier
        w = relative_arr(poses[start - 1:-1], poses[start:])
        back = self.problem.pose_values()
        for k, i in enumerate(range(start, len(poses))):
            est = compose_arr(back[i - 1], w[k])
            vid = self.problem.add_pose_variable(est)
            self.pose_vids.append(vid)
            self.problem.add_residual(
                "odom", [self.pose_vids[i - 1], vid], w[k],
                np.linalg.inv(covs[i - 1]))
            back = self.problem.pose_values()
            added += 1
        return added

    def add_loop(self, constraint: LoopConstraint,
                 phi: float | None = None) -> None:
        """Attach a loop edge with a DCS kernel. The constraint transform
        is the pose of the multiscan anchor in the submap anchor frame, so
        the edge runs submap-anchor -> anchor."""
        i, j = constraint.anchor_id, constraint.submap_anchor_id
        if i >= self.frontier or j >= self.frontier:
            raise ValueError(
                f"loop references unknown vertices ({i}, {j}); "
                f"frontier is {self.frontier}")
        self.problem.add_residual(
            "loop", [self.pose_vids[j], self.pose_vids[i]],
            constraint.transform.as_array(),
            np.linalg.inv(constraint.covariance),
            kernel=DcsKernel(phi if phi is not None else self.cfg.dcs_phi))
        self.loops.append(constraint)
        self.loops_since_optimize += 1

    def optimize(self) -> SolveReport:
        """Gauss-Newton over the whole graph; on failure the estimates are
        restored to their pre-optimization values."""
        saved = self.problem.state_copy()
        report = solve(self.problem, "gauss_newton",
                       max_iterations=self.cfg.backend_iterations,
                       gradient_tol=self.cfg.gradient_tol,
                       step_tol=self.cfg.step_tol)
        if not report.success:
            self.problem.state_restore(saved)
        else:
            self.loops_since_optimize = 0
        return report

    def loop_scales(self) -> np.ndarray:
        """Current DCS scale of every loop edge (diagnostics)."""
        return self.problem.kernel_scales("loop")

    def dump_text(self) -> str:
        out = []
        traj = self.trajectory()
        for i, (x, y, th) in enumerate(traj):
            out.append(f"VERTEX_SE2 {i} {x:.6f} {y:.6f} {th:.6f}")
        for r in range(self.problem.family_count("odom")):
            d = self.problem.family_meas("odom")[r]
            out.append(f"EDGE_SE2 {r} {r + 1} {d[0]:.6f} {d[1]:.6f} {d[2]:.6f}")
        for lc in self.loops:
            d = lc.transform.as_array()
            out.append(f"EDGE_SE2_LOOP {lc.submap_anchor_id} {lc.anchor_id} "
                       f"{d[0]:.6f} {d[1]:.6f} {d[2]:.6f}")
        return "\n".join(out) + "\n"
