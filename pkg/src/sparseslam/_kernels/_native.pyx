# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (scan-to-map scoring, max filter,
ray casting). Must stay semantically identical to _numpy.py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def max_filter(double[:, ::1] values, int size):
    cdef int nx = values.shape[0]
    cdef int ny = values.shape[1]
    cdef int r = size // 2
    cdef cnp.ndarray[double, ndim=2] out = np.empty((nx, ny))
    cdef double[:, ::1] o = out
    cdef int i, j, a, b, a0, a1, b0, b1
    cdef double m
    for i in range(nx):
        a0 = i - r if i - r > 0 else 0
        a1 = i + r + 1 if i + r + 1 < nx else nx
        for j in range(ny):
            b0 = j - r if j - r > 0 else 0
            b1 = j + r + 1 if j + r + 1 < ny else ny
            m = values[a0, b0]
            for a in range(a0, a1):
                for b in range(b0, b1):
                    if values[a, b] > m:
                        m = values[a, b]
            o[i, j] = m
    return out


def cell_lookup(double[:, ::1] values, long[::1] ix, long[::1] iy, double oob):
    cdef int nx = values.shape[0]
    cdef int ny = values.shape[1]
    cdef int n = ix.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[::1] o = out
    cdef int k
    for k in range(n):
        if 0 <= ix[k] < nx and 0 <= iy[k] < ny:
            o[k] = values[ix[k], iy[k]]
        else:
            o[k] = oob
    return out


def translation_score_field(double[:, ::1] values, long[::1] bx, long[::1] by,
                            long[::1] dxs, long[::1] dys, double oob):
    cdef int nx = values.shape[0]
    cdef int ny = values.shape[1]
    cdef int m = bx.shape[0]
    cdef int na = dxs.shape[0]
    cdef int nb = dys.shape[0]
    cdef cnp.ndarray[double, ndim=2] field = np.zeros((na, nb))
    cdef double[:, ::1] f = field
    cdef int k, a, b
    cdef long x, y
    for k in range(m):
        for a in range(na):
            x = bx[k] + dxs[a]
            if x < 0 or x >= nx:
                for b in range(nb):
                    f[a, b] += oob
                continue
            for b in range(nb):
                y = by[k] + dys[b]
                if 0 <= y < ny:
                    f[a, b] += values[x, y]
                else:
                    f[a, b] += oob
    field /= m
    return field


def raycast_update(double[:, ::1] logodds, cnp.uint8_t[:, ::1] observed,
                   int sx, int sy, long[::1] ex, long[::1] ey,
                   cnp.uint8_t[::1] hit, double l_occ, double l_free,
                   double l_min, double l_max):
    cdef int nx = logodds.shape[0]
    cdef int ny = logodds.shape[1]
    cdef int n = ex.shape[0]
    cdef int k, x, y, x1, y1, stepx, stepy, dx, dy, err, e2
    cdef bint first
    for k in range(n):
        x1 = <int>ex[k]
        y1 = <int>ey[k]
        x = sx
        y = sy
        dx = x1 - x if x1 > x else x - x1
        dy = y1 - y if y1 > y else y - y1
        stepx = 1 if x < x1 else -1
        stepy = 1 if y < y1 else -1
        err = dx - dy
        first = True
        while True:
            if not first and not (x == x1 and y == y1):
                if 0 <= x < nx and 0 <= y < ny:
                    logodds[x, y] = logodds[x, y] + l_free
                    if logodds[x, y] < l_min:
                        logodds[x, y] = l_min
                    observed[x, y] = 1
            first = False
            if x == x1 and y == y1:
                break
            e2 = 2 * err
            if e2 > -dy:
                err -= dy
                x += stepx
            if e2 < dx:
                err += dx
                y += stepy
        if hit[k] and 0 <= x1 < nx and 0 <= y1 < ny:
            logodds[x1, y1] = logodds[x1, y1] + l_occ
            if logodds[x1, y1] > l_max:
                logodds[x1, y1] = l_max
            observed[x1, y1] = 1
