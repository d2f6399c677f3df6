"""Pure numpy/Python implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them and must
produce identical results.
"""
import numpy as np

_JACOBI_MAX_SWEEPS = 64


def sym3_eigh(A):
    """Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.

    Returns ``(evals, evecs)`` with eigenvalues sorted descending and the
    eigenvectors stored as columns.
    """
    a = np.array(A, dtype=np.float64).reshape(3, 3)
    a = 0.5 * (a + a.T)
    v = np.eye(3)
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.zeros(3), v
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= (1e-17 * scale) ** 2:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            for k in range(3):
                akp = a[k, p]
                akq = a[k, q]
                a[k, p] = c * akp - s * akq
                a[k, q] = s * akp + c * akq
            for k in range(3):
                apk = a[p, k]
                aqk = a[q, k]
                a[p, k] = c * apk - s * aqk
                a[q, k] = s * apk + c * aqk
            for k in range(3):
                vkp = v[k, p]
                vkq = v[k, q]
                v[k, p] = c * vkp - s * vkq
                v[k, q] = s * vkp + c * vkq
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


def compatibility_matrix(src, dst, sigma):
    """Pairwise length-consistency scores max(0, 1 - (|si-sj| - |di-dj|)^2 / sigma^2)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ds = np.sqrt(((src[:, None, :] - src[None, :, :]) ** 2).sum(-1))
    dd = np.sqrt(((dst[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    M = 1.0 - (ds - dd) ** 2 / (sigma * sigma)
    np.maximum(M, 0.0, out=M)
    np.fill_diagonal(M, 0.0)
    return M


def splat_zbuffer(u, v, z, height, width, radius, depth_tol):
    """Point-splat z-buffer.

    Each point covers the (2r+1)^2 pixel block around its rounded projection.
    Pass one keeps the nearest depth per pixel. Pass two assigns each pixel to
    the point, among those within ``depth_tol`` of that nearest depth, whose
    projection lies closest to the pixel centre (lowest index on ties).

    Returns ``(depth, owner)``; background pixels have depth 0 and owner -1.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = u.shape[0]
    depth = np.zeros((height, width))
    owner = np.full((height, width), -1, dtype=np.int64)
    ok = (z > 0) & np.isfinite(u) & np.isfinite(v)
    with np.errstate(invalid="ignore"):
        ok &= (u >= -radius - 1) & (u <= width + radius) & (v >= -radius - 1) & (v <= height + radius)
    idx = np.nonzero(ok)[0]
    if n == 0 or idx.size == 0:
        return depth, owner
    ui = np.floor(u[idx] + 0.5).astype(np.int64)
    vi = np.floor(v[idx] + 0.5).astype(np.int64)
    offs = np.arange(-radius, radius + 1)
    dv, du = np.meshgrid(offs, offs, indexing="ij")
    du = du.ravel()
    dv = dv.ravel()
    # (point, offset) candidates, point-major so index order is preserved
    pu = (ui[:, None] + du[None, :]).ravel()
    pv = (vi[:, None] + dv[None, :]).ravel()
    pid = np.repeat(idx, du.size)
    inside = (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
    pu, pv, pid = pu[inside], pv[inside], pid[inside]
    if pid.size == 0:
        return depth, owner
    pix = pv * width + pu
    zc = z[pid]
    zmin = np.full(height * width, np.inf)
    np.minimum.at(zmin, pix, zc)
    keep = zc <= zmin[pix] + depth_tol
    pix, pid, pu, pv = pix[keep], pid[keep], pu[keep], pv[keep]
    d2 = (u[pid] - pu) ** 2 + (v[pid] - pv) ** 2
    order = np.lexsort((pid, d2, pix))
    pix, pid = pix[order], pid[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    flat_owner = owner.reshape(-1)
    flat_depth = depth.reshape(-1)
    flat_owner[pix[first]] = pid[first]
    flat_depth[pix[first]] = z[pid[first]]
    return depth, owner
