"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable; also serves as the
reference the native module is tested against. Semantics (out-of-bounds
handling, traversal order, clamping) must match _native.pyx exactly.
"""

from __future__ import annotations

import numpy as np


def max_filter(values: np.ndarray, size: int) -> np.ndarray:
    """Per-cell max over the size x size neighborhood clipped to the grid."""
    if size == 1:
        return values.copy()
    from scipy.ndimage import maximum_filter

    return maximum_filter(values, size=size, mode="constant", cval=-np.inf)


def cell_lookup(values: np.ndarray, ix: np.ndarray, iy: np.ndarray,
                oob: float) -> np.ndarray:
    """values[ix, iy] with out-of-bounds indices mapped to `oob`."""
    nx, ny = values.shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    out = np.full(ix.shape, oob)
    out[inside] = values[ix[inside], iy[inside]]
    return out


def translation_score_field(values: np.ndarray, bx: np.ndarray,
                            by: np.ndarray, dxs: np.ndarray,
                            dys: np.ndarray, oob: float) -> np.ndarray:
    """Mean cell value over points for every (dx, dy) cell offset.

    `bx`, `by` are base cell indices of the points; offsets shift them by
    whole cells. Returns an (len(dxs), len(dys)) field.
    """
    nx, ny = values.shape
    # One-cell oob ring; clipping any outside index into the ring preserves
    # exact out-of-bounds semantics for arbitrarily far points.
    padded = np.full((nx + 2, ny + 2), oob)
    padded[1:-1, 1:-1] = values
    ix = np.clip(bx[:, None] + dxs[None, :], -1, nx) + 1      # (M, A)
    iy = np.clip(by[:, None] + dys[None, :], -1, ny) + 1      # (M, B)
    field = padded[ix[:, :, None], iy[:, None, :]].sum(axis=0)
    return field / len(bx)


def raycast_update(logodds: np.ndarray, observed: np.ndarray,
                   sx: int, sy: int, ex: np.ndarray, ey: np.ndarray,
                   hit: np.ndarray, l_occ: float, l_free: float,
                   l_min: float, l_max: float) -> None:
    """Integer-grid ray updates from sensor cell (sx, sy) to endpoint cells.

    Cells strictly between sensor and endpoint get the free decrement; the
    endpoint cell gets the occupied increment when `hit` is set (capped
    beams carve free space but assert no obstacle). Out-of-grid cells are
    skipped. Updates clamp to [l_min, l_max] and mark cells observed.
    """
    nx, ny = logodds.shape
    for k in range(len(ex)):
        for cx, cy in _bresenham(sx, sy, int(ex[k]), int(ey[k]))[1:-1]:
            if 0 <= cx < nx and 0 <= cy < ny:
                logodds[cx, cy] = max(l_min, logodds[cx, cy] + l_free)
                observed[cx, cy] = True
        tx, ty = int(ex[k]), int(ey[k])
        if hit[k] and 0 <= tx < nx and 0 <= ty < ny:
            logodds[tx, ty] = min(l_max, logodds[tx, ty] + l_occ)
            observed[tx, ty] = True


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> list:
    """All cells on the segment from (x0, y0) to (x1, y1), endpoints
    included, each visited exactly once."""
    cells = []
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    x, y = x0, y0
    while True:
        cells.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy
    return cells
