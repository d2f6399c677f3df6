# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor, INFINITY, isfinite

cnp.import_array()

DEF MAX_SWEEPS = 64


def sym3_eigh(A):
    cdef double a[3][3]
    cdef double v[3][3]
    cdef double[:, :] Av = np.ascontiguousarray(np.asarray(A, dtype=np.float64).reshape(3, 3))
    cdef int i, j, k, p, q, sweep, pair
    cdef double scale = 0.0, off, apq, theta, t, c, s, x, y
    cdef int P[3]
    cdef int Q[3]
    P[0] = 0; Q[0] = 1
    P[1] = 0; Q[1] = 2
    P[2] = 1; Q[2] = 2
    for i in range(3):
        for j in range(3):
            a[i][j] = 0.5 * (Av[i, j] + Av[j, i])
            v[i][j] = 1.0 if i == j else 0.0
            if fabs(a[i][j]) > scale:
                scale = fabs(a[i][j])
    if scale == 0.0:
        return np.zeros(3), np.eye(3)
    for sweep in range(MAX_SWEEPS):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        if off <= (1e-17 * scale) * (1e-17 * scale):
            break
        for pair in range(3):
            p = P[pair]
            q = Q[pair]
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = (1.0 if theta >= 0 else -1.0) / (fabs(theta) + sqrt(theta * theta + 1.0))
            c = 1.0 / sqrt(t * t + 1.0)
            s = t * c
            for k in range(3):
                x = a[k][p]
                y = a[k][q]
                a[k][p] = c * x - s * y
                a[k][q] = s * x + c * y
            for k in range(3):
                x = a[p][k]
                y = a[q][k]
                a[p][k] = c * x - s * y
                a[q][k] = s * x + c * y
            for k in range(3):
                x = v[k][p]
                y = v[k][q]
                v[k][p] = c * x - s * y
                v[k][q] = s * x + c * y
    evals = np.array([a[0][0], a[1][1], a[2][2]])
    evecs = np.array([[v[0][0], v[0][1], v[0][2]],
                      [v[1][0], v[1][1], v[1][2]],
                      [v[2][0], v[2][1], v[2][2]]])
    order = np.argsort(-evals, kind="stable")
    return evals[order], evecs[:, order]


def compatibility_matrix(src, dst, double sigma):
    cdef double[:, ::1] S = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] D = np.ascontiguousarray(dst, dtype=np.float64)
    cdef Py_ssize_t n = S.shape[0], i, j
    out = np.zeros((n, n))
    cdef double[:, ::1] M = out
    cdef double ds, dd, dx, dy, dz, r, inv = 1.0 / (sigma * sigma)
    for i in range(n):
        for j in range(i + 1, n):
            dx = S[i, 0] - S[j, 0]
            dy = S[i, 1] - S[j, 1]
            dz = S[i, 2] - S[j, 2]
            ds = sqrt(dx * dx + dy * dy + dz * dz)
            dx = D[i, 0] - D[j, 0]
            dy = D[i, 1] - D[j, 1]
            dz = D[i, 2] - D[j, 2]
            dd = sqrt(dx * dx + dy * dy + dz * dz)
            r = 1.0 - (ds - dd) * (ds - dd) * inv
            if r < 0.0:
                r = 0.0
            M[i, j] = r
            M[j, i] = r
    return out


def splat_zbuffer(u, v, z, int height, int width, int radius, double depth_tol):
    cdef double[::1] U = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = U.shape[0], i
    depth = np.zeros((height, width))
    owner = np.full((height, width), -1, dtype=np.int64)
    zmin_arr = np.full((height, width), INFINITY)
    best_arr = np.full((height, width), INFINITY)
    cdef double[:, ::1] dep = depth
    cdef long long[:, ::1] own = owner
    cdef double[:, ::1] zmin = zmin_arr
    cdef double[:, ::1] best = best_arr
    cdef long ui, vi, pu, pv
    cdef int du, dv
    cdef double d2, zz
    for i in range(n):
        zz = Z[i]
        if not (zz > 0) or not isfinite(U[i]) or not isfinite(V[i]):
            continue
        if U[i] < -radius - 1 or U[i] > width + radius or V[i] < -radius - 1 or V[i] > height + radius:
            continue
        ui = <long>floor(U[i] + 0.5)
        vi = <long>floor(V[i] + 0.5)
        for dv in range(-radius, radius + 1):
            pv = vi + dv
            if pv < 0 or pv >= height:
                continue
            for du in range(-radius, radius + 1):
                pu = ui + du
                if pu < 0 or pu >= width:
                    continue
                if zz < zmin[pv, pu]:
                    zmin[pv, pu] = zz
    for i in range(n):
        zz = Z[i]
        if not (zz > 0) or not isfinite(U[i]) or not isfinite(V[i]):
            continue
        if U[i] < -radius - 1 or U[i] > width + radius or V[i] < -radius - 1 or V[i] > height + radius:
            continue
        ui = <long>floor(U[i] + 0.5)
        vi = <long>floor(V[i] + 0.5)
        for dv in range(-radius, radius + 1):
            pv = vi + dv
            if pv < 0 or pv >= height:
                continue
            for du in range(-radius, radius + 1):
                pu = ui + du
                if pu < 0 or pu >= width:
                    continue
                if zz <= zmin[pv, pu] + depth_tol:
                    d2 = (U[i] - pu) * (U[i] - pu) + (V[i] - pv) * (V[i] - pv)
                    if d2 < best[pv, pu]:
                        best[pv, pu] = d2
                        own[pv, pu] = i
                        dep[pv, pu] = zz
    return depth, owner
