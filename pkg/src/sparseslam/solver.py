"""Sparse nonlinear least squares shared by both constraint graphs.

Residuals are stored in batched families (all odometry edges evaluate in
one vectorized call, all pose-line edges in another) so that per-scan
re-optimization stays cheap as the graphs grow. Variables live in two
typed pools: dim-3 SE(2) poses (theta wrapped after each step) and dim-2
polar lines (flipped back to rho >= 0 after each step).

Gauss-Newton and Levenberg-Marquardt both solve the normal equations with
a sparse Cholesky-style factorization (dense path below 50 free variables)
and only ever accept cost-decreasing steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import norm_angle

DENSE_VARIABLE_LIMIT = 50


@dataclass
class DcsKernel:
    """Dynamic covariance scaling: down-weights residuals whose chi2
    exceeds the tuning constant phi."""

    phi: float = 1.0

    def __post_init__(self):
        if self.phi <= 0:
            raise ValueError("phi must be > 0")


def apply_robust_kernel(chi2, kernel: DcsKernel):
    """DCS scale s = min(1, 2*phi / (phi + chi2)); the residual is weighted
    by s, i.e. the information matrix by s^2."""
    return np.minimum(1.0, 2.0 * kernel.phi / (kernel.phi + chi2))


@dataclass
class SolveReport:
    method: str
    iterations: int
    initial_chi2: float
    final_chi2: float
    reason: str          # gradient | step | iterations | no_residuals | failure

    @property
    def success(self) -> bool:
        return self.reason != "failure"


# ---------------------------------------------------------------------------
# Residual families (batched error functions + analytic Jacobians)
# ---------------------------------------------------------------------------

class OdometryFamily:
    """Relative-pose constraint between two SE(2) variables:
    e = v^-1 (+) (xi^-1 (+) xj). Also used for loop-closure edges."""

    var_dims = (3, 3)
    res_dim = 3
    meas_dim = 3

    def evaluate(self, values, meas, with_jac=True):
        xi, xj = values
        ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
        dxw = xj[:, 0] - xi[:, 0]
        dyw = xj[:, 1] - xi[:, 1]
        dx = ci * dxw + si * dyw
        dy = -si * dxw + ci * dyw
        cv, sv = np.cos(meas[:, 2]), np.sin(meas[:, 2])
        rx = dx - meas[:, 0]
        ry = dy - meas[:, 1]
        res = np.empty((len(dx), 3))
        res[:, 0] = cv * rx + sv * ry
        res[:, 1] = -sv * rx + cv * ry
        res[:, 2] = norm_angle(xj[:, 2] - xi[:, 2] - meas[:, 2])
        if not with_jac:
            return res, None
        b = len(dx)
        jd_i = np.zeros((b, 3, 3))
        jd_i[:, 0, 0] = -ci
        jd_i[:, 0, 1] = -si
        jd_i[:, 0, 2] = dy
        jd_i[:, 1, 0] = si
        jd_i[:, 1, 1] = -ci
        jd_i[:, 1, 2] = -dx
        jd_i[:, 2, 2] = -1.0
        jd_j = np.zeros((b, 3, 3))
        jd_j[:, 0, 0] = ci
        jd_j[:, 0, 1] = si
        jd_j[:, 1, 0] = -si
        jd_j[:, 1, 1] = ci
        jd_j[:, 2, 2] = 1.0
        rv = np.zeros((b, 3, 3))
        rv[:, 0, 0] = cv
        rv[:, 0, 1] = sv
        rv[:, 1, 0] = -sv
        rv[:, 1, 1] = cv
        rv[:, 2, 2] = 1.0
        return res, (rv @ jd_i, rv @ jd_j)


class PoseLineFamily:
    """Pose-landmark constraint: measured (rho, alpha) of a global line
    seen from a pose, against the line mapped into that pose's frame
    (rho flipped to stay non-negative, alpha wrapped)."""

    var_dims = (3, 2)
    res_dim = 2
    meas_dim = 2

    def evaluate(self, values, meas, with_jac=True):
        x, line = values
        c, s = np.cos(line[:, 1]), np.sin(line[:, 1])
        rho_p = line[:, 0] - x[:, 0] * c - x[:, 1] * s
        sign = np.where(rho_p < 0.0, -1.0, 1.0)
        alpha_p = line[:, 1] - x[:, 2] + np.where(rho_p < 0.0, math.pi, 0.0)
        res = np.empty((len(sign), 2))
        res[:, 0] = meas[:, 0] - sign * rho_p
        res[:, 1] = norm_angle(meas[:, 1] - alpha_p)
        if not with_jac:
            return res, None
        b = len(sign)
        jx = np.zeros((b, 2, 3))
        jx[:, 0, 0] = sign * c
        jx[:, 0, 1] = sign * s
        jx[:, 1, 2] = 1.0
        jl = np.zeros((b, 2, 2))
        jl[:, 0, 0] = -sign
        jl[:, 0, 1] = -sign * (x[:, 0] * s - x[:, 1] * c)
        jl[:, 1, 1] = -1.0
        return res, (jx, jl)


class PriorFamily:
    """Direct pose anchor e = x - target (theta wrapped); test scaffolding."""

    var_dims = (3,)
    res_dim = 3
    meas_dim = 3

    def evaluate(self, values, meas, with_jac=True):
        (x,) = values
        res = x - meas
        res[:, 2] = norm_angle(res[:, 2])
        if not with_jac:
            return res, None
        jac = np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()
        return res, (jac,)


# ---------------------------------------------------------------------------
# Problem storage
# ---------------------------------------------------------------------------

class _Rows:
    """Amortized-growth row store over a numpy array."""

    def __init__(self, tail_shape, dtype=float):
        self._data = np.empty((16,) + tuple(tail_shape), dtype=dtype)
        self.count = 0

    def append(self, row):
        if self.count == len(self._data):
            self._data = np.concatenate(
                [self._data, np.empty_like(self._data)], axis=0)
        self._data[self.count] = row
        self.count += 1
        return self.count - 1

    def view(self):
        return self._data[:self.count]

    def truncate(self, count: int):
        self.count = count

    def compact(self, keep: np.ndarray):
        kept = self._data[:self.count][keep]
        self._data[:len(kept)] = kept
        self.count = len(kept)


class _FamilyStore:
    def __init__(self, family):
        self.family = family
        self.var_ids = _Rows((len(family.var_dims),), dtype=np.int64)
        self.info = _Rows((family.res_dim, family.res_dim))
        self.meas = _Rows((family.meas_dim,))
        self.phi = _Rows((), dtype=float)   # nan = no robust kernel

    @property
    def count(self):
        return self.var_ids.count


class Problem:
    """Variable pools plus batched residual blocks.

    Supports append, truncate-to-marker (rollback) and masked compaction
    (pruning); the graphs keep one long-lived Problem each.
    """

    def __init__(self):
        self._pose_vals = _Rows((3,))
        self._line_vals = _Rows((2,))
        self._var_pool = _Rows((), dtype=np.uint8)    # 3 or 2
        self._var_slot = _Rows((), dtype=np.int64)
        self._var_fixed = _Rows((), dtype=bool)
        self._families: dict[str, _FamilyStore] = {}

    # -- variables ---------------------------------------------------------

    def add_pose_variable(self, value, fixed=False) -> int:
        slot = self._pose_vals.append(np.asarray(value, dtype=float))
        return self._register_var(3, slot, fixed)

    def add_line_variable(self, value, fixed=False) -> int:
        slot = self._line_vals.append(np.asarray(value, dtype=float))
        return self._register_var(2, slot, fixed)

    def _register_var(self, dim, slot, fixed):
        vid = self._var_pool.append(dim)
        self._var_slot.append(slot)
        self._var_fixed.append(fixed)
        return vid

    @property
    def num_variables(self) -> int:
        return self._var_pool.count

    def var_dim(self, vid: int) -> int:
        return int(self._var_pool.view()[vid])

    def is_fixed(self, vid: int) -> bool:
        return bool(self._var_fixed.view()[vid])

    def set_fixed(self, vid: int, flag: bool = True):
        self._var_fixed.view()[vid] = flag

    def get_value(self, vid: int) -> np.ndarray:
        pool, slot = self._var_pool.view()[vid], self._var_slot.view()[vid]
        vals = self._pose_vals if pool == 3 else self._line_vals
        return vals.view()[slot].copy()

    def set_value(self, vid: int, value):
        pool, slot = self._var_pool.view()[vid], self._var_slot.view()[vid]
        vals = self._pose_vals if pool == 3 else self._line_vals
        vals.view()[slot] = np.asarray(value, dtype=float)

    def pose_values(self) -> np.ndarray:
        """Read-only view of the pose pool in creation order."""
        return self._pose_vals.view()

    def state_copy(self):
        return (self._pose_vals.view().copy(), self._line_vals.view().copy())

    def state_restore(self, state):
        poses, lines = state
        self._pose_vals.view()[:len(poses)] = poses
        self._pose_vals.truncate(len(poses))
        self._line_vals.view()[:len(lines)] = lines
        self._line_vals.truncate(len(lines))

    # -- residual blocks ----------------------------------------------------

    def register_family(self, name: str, family):
        if name not in self._families:
            self._families[name] = _FamilyStore(family)

    def add_residual(self, name: str, var_ids, measurement, information,
                     kernel: DcsKernel | None = None) -> int:
        store = self._families[name]
        info = np.asarray(information, dtype=float)
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information matrix must be symmetric")
        store.var_ids.append(np.asarray(var_ids, dtype=np.int64))
        store.info.append(info)
        store.meas.append(np.asarray(measurement, dtype=float))
        return store.phi.append(kernel.phi if kernel else np.nan)

    def family_count(self, name: str) -> int:
        return self._families[name].count if name in self._families else 0

    def family_var_ids(self, name: str) -> np.ndarray:
        return self._families[name].var_ids.view()

    def family_meas(self, name: str) -> np.ndarray:
        return self._families[name].meas.view()

    def family_info(self, name: str) -> np.ndarray:
        return self._families[name].info.view()

    def edge_markers(self) -> dict:
        return {name: store.count for name, store in self._families.items()}

    def truncate_edges(self, markers: dict):
        for name, store in self._families.items():
            count = markers.get(name, 0)
            store.var_ids.truncate(count)
            store.info.truncate(count)
            store.meas.truncate(count)
            store.phi.truncate(count)

    def compact_edges(self, name: str, keep: np.ndarray) -> np.ndarray:
        """Drop rows where keep is False; returns old-row -> new-row map
        (-1 for dropped rows)."""
        store = self._families[name]
        remap = np.full(store.count, -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        store.var_ids.compact(keep)
        store.info.compact(keep)
        store.meas.compact(keep)
        store.phi.compact(keep)
        return remap

    # -- evaluation ---------------------------------------------------------

    def _gather(self, store, pools=None):
        poses, lines = pools if pools is not None else (
            self._pose_vals.view(), self._line_vals.view())
        slots = self._var_slot.view()
        out = []
        for k, dim in enumerate(store.family.var_dims):
            ids = store.var_ids.view()[:, k]
            src = poses if dim == 3 else lines
            out.append(src[slots[ids]])
        return tuple(out)

    def evaluate_family(self, name: str, with_jac=False, pools=None):
        """Returns (residuals, jacobians, per-row chi2) for one family."""
        store = self._families[name]
        if store.count == 0:
            d = store.family.res_dim
            return np.zeros((0, d)), None, np.zeros(0)
        res, jacs = store.family.evaluate(
            self._gather(store, pools), store.meas.view(), with_jac)
        chi2 = np.einsum("bi,bij,bj->b", res, store.info.view(), res)
        return res, jacs, chi2

    def chi2_breakdown(self, pools=None):
        """(plain total F, dof n, per-family chi2 arrays); F ignores robust
        kernels, matching the consistency-gate objective."""
        total = 0.0
        dof = 0
        per_family = {}
        for name, store in self._families.items():
            _, _, chi2 = self.evaluate_family(name, pools=pools)
            per_family[name] = chi2
            total += float(chi2.sum())
            dof += store.family.res_dim * store.count
        return total, dof, per_family

    def robust_chi2(self, pools=None) -> float:
        """Total cost with DCS saturation min(chi2, phi) on kernel rows."""
        total = 0.0
        for name, store in self._families.items():
            _, _, chi2 = self.evaluate_family(name, pools=pools)
            phi = store.phi.view()
            robust = np.isfinite(phi)
            total += float(chi2[~robust].sum())
            total += float(np.minimum(chi2[robust], phi[robust]).sum())
        return total

    def kernel_scales(self, name: str) -> np.ndarray:
        """Current DCS scale per row (1 where no kernel is attached)."""
        store = self._families[name]
        _, _, chi2 = self.evaluate_family(name)
        phi = store.phi.view()
        scales = np.ones(store.count)
        robust = np.isfinite(phi)
        scales[robust] = np.minimum(
            1.0, 2.0 * phi[robust] / (phi[robust] + chi2[robust]))
        return scales


# ---------------------------------------------------------------------------
# Normal equations and the iteration loop
# ---------------------------------------------------------------------------

def _free_layout(problem: Problem):
    """Column offsets for variables that are free and referenced by at
    least one residual row."""
    referenced = np.zeros(problem.num_variables, dtype=bool)
    for store in problem._families.values():
        if store.count:
            referenced[store.var_ids.view().ravel()] = True
    free = referenced & ~problem._var_fixed.view()
    ids = np.nonzero(free)[0]
    dims = problem._var_pool.view()[ids]
    offsets = np.zeros(problem.num_variables, dtype=np.int64) - 1
    offsets[ids] = np.concatenate([[0], np.cumsum(dims)[:-1]])
    ncols = int(dims.sum())
    return offsets, ncols, ids


def _assemble(problem: Problem, offsets, ncols, pools):
    """Weighted normal equations H, b and the robustified scalar cost."""
    triplets_r, triplets_c, triplets_v = [], [], []
    b = np.zeros(ncols)
    cost = 0.0
    for name, store in problem._families.items():
        if store.count == 0:
            continue
        res, jacs, chi2 = problem.evaluate_family(name, with_jac=True,
                                                  pools=pools)
        phi = store.phi.view()
        robust = np.isfinite(phi)
        w = np.ones(store.count)
        if robust.any():
            w[robust] = np.minimum(
                1.0, 2.0 * phi[robust] / (phi[robust] + chi2[robust])) ** 2
            cost += float(np.minimum(chi2[robust], phi[robust]).sum())
            cost += float(chi2[~robust].sum())
        else:
            cost += float(chi2.sum())
        winfo = store.info.view() * w[:, None, None]
        cols = [offsets[store.var_ids.view()[:, k]]
                for k in range(len(store.family.var_dims))]
        for k, dim_k in enumerate(store.family.var_dims):
            mask_k = cols[k] >= 0
            if not mask_k.any():
                continue
            jw = np.einsum("bdi,bde->bie", jacs[k], winfo)    # (B, dk, d)
            bk = np.einsum("bie,be->bi", jw, res)
            idx = cols[k][mask_k, None] + np.arange(dim_k)[None, :]
            np.add.at(b, idx.ravel(), bk[mask_k].ravel())
            for l, dim_l in enumerate(store.family.var_dims):
                mask = mask_k & (cols[l] >= 0)
                if not mask.any():
                    continue
                h_kl = np.einsum("bie,bej->bij", jw[mask], jacs[l][mask])
                rows = np.repeat(
                    cols[k][mask][:, None] + np.arange(dim_k)[None, :],
                    dim_l, axis=1)
                cc = np.tile(
                    cols[l][mask][:, None] + np.arange(dim_l)[None, :],
                    (1, dim_k))
                triplets_r.append(rows.ravel())
                triplets_c.append(cc.ravel())
                triplets_v.append(h_kl.ravel())
    if triplets_r:
        rows = np.concatenate(triplets_r)
        ccols = np.concatenate(triplets_c)
        vals = np.concatenate(triplets_v)
    else:
        rows = ccols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return rows, ccols, vals, b, cost


def _solve_linear(rows, cols, vals, b, ncols, lam, n_free_vars):
    if n_free_vars < DENSE_VARIABLE_LIMIT:
        h = np.zeros((ncols, ncols))
        np.add.at(h, (rows, cols), vals)
        h[np.diag_indices(ncols)] += lam
        return np.linalg.solve(h, -b)
    h = sp.coo_matrix((vals, (rows, cols)), shape=(ncols, ncols)).tocsc()
    if lam:
        h = h + lam * sp.identity(ncols, format="csc")
    return spla.splu(h).solve(-b)


def _apply_step(problem: Problem, offsets, free_ids, delta, pools):
    poses, lines = pools[0].copy(), pools[1].copy()
    slots = problem._var_slot.view()
    dims = problem._var_pool.view()[free_ids]
    pose_ids = free_ids[dims == 3]
    line_ids = free_ids[dims == 2]
    if len(pose_ids):
        idx = offsets[pose_ids][:, None] + np.arange(3)[None, :]
        poses[slots[pose_ids]] += delta[idx]
    if len(line_ids):
        idx = offsets[line_ids][:, None] + np.arange(2)[None, :]
        lines[slots[line_ids]] += delta[idx]
    # manifold cleanup: wrap pose angles, canonicalize lines
    poses[:, 2] = norm_angle(poses[:, 2])
    flip = lines[:, 0] < 0.0
    lines[flip, 0] = -lines[flip, 0]
    lines[flip, 1] += math.pi
    lines[:, 1] = norm_angle(lines[:, 1])
    return poses, lines


def solve(problem: Problem, method: str = "levenberg_marquardt",
          max_iterations: int = 50, gradient_tol: float = 1e-9,
          step_tol: float = 1e-9, lambda0: float = 1e-4) -> SolveReport:
    """Minimize the problem's (robustified) cost in place.

    LM adapts damping multiplicatively (x2 on reject, /3 on accept);
    Gauss-Newton runs undamped and stops at the first non-improving step.
    Only cost-decreasing steps are ever applied to the problem.
    """
    if method not in ("gauss_newton", "levenberg_marquardt"):
        raise ValueError(f"unknown method {method!r}")
    offsets, ncols, free_ids = _free_layout(problem)
    initial = problem.robust_chi2()
    if ncols == 0:
        return SolveReport(method, 0, initial, initial, "no_residuals")

    pools = (problem._pose_vals.view().copy(), problem._line_vals.view().copy())
    lam = lambda0 if method == "levenberg_marquardt" else 0.0
    cost = initial
    reason = "iterations"
    iterations = 0
    n_free = len(free_ids)

    for _ in range(max_iterations):
        rows, cols, vals, b, cost = _assemble(problem, offsets, ncols, pools)
        if np.abs(b).max(initial=0.0) <= gradient_tol:
            reason = "gradient"
            break
        accepted = False
        solved_any = False
        for _attempt in range(60):
            try:
                delta = _solve_linear(rows, cols, vals, b, ncols, lam, n_free)
            except (np.linalg.LinAlgError, RuntimeError):
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                solved_any = True
                cand = _apply_step(problem, offsets, free_ids, delta, pools)
                cand_cost = problem.robust_chi2(pools=cand)
                if cand_cost <= cost + 1e-15:
                    pools = cand
                    accepted = True
                    iterations += 1
                    if method == "levenberg_marquardt":
                        lam = max(lam / 3.0, 1e-12)
                    step = float(np.linalg.norm(delta))
                    if step <= step_tol * (math.sqrt(ncols) + step_tol):
                        reason = "step"
                    cost = cand_cost
                    break
            if method == "gauss_newton":
                # undamped step failed to improve: stop at current estimate
                reason = "step"
                accepted = True
                break
            lam *= 2.0
            if lam > 1e12:
                break
        if not accepted:
            # heavily damped steps stopped improving: converged if the
            # system was solvable at all, a genuine failure otherwise
            reason = "step" if solved_any else "failure"
            break
        if reason in ("step", "gradient"):
            break

    problem._pose_vals.view()[:] = pools[0]
    problem._line_vals.view()[:] = pools[1]
    final = problem.robust_chi2()
    return SolveReport(method, iterations, initial, final, reason)
