"""Compiled kernels against the numpy reference and against brute-force oracles."""
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchpose import _pykernels, kernels

try:
    from patchpose import _ckernels
except ImportError:  # pragma: no cover - pure-Python install
    _ckernels = None

IMPLS = [pytest.param(_pykernels, id="python")]
IMPLS.append(pytest.param(_ckernels, id="cython",
                          marks=pytest.mark.skipif(_ckernels is None, reason="extension not built")))
needs_ext = pytest.mark.skipif(_ckernels is None, reason="extension not built")
seeds = st.integers(0, 2 ** 32 - 1)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    forced = os.environ.get("PATCHPOSE_PURE_PYTHON", "") not in ("", "0")
    if forced:
        assert kernels.BACKEND == "python"
    elif _ckernels is not None:
        assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("impl", IMPLS)
@given(seed=seeds)
def test_sym3_eigh_matches_lapack(impl, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(3, 3))
    A = B @ B.T
    w, V = impl.sym3_eigh(A)
    assert np.all(np.diff(w) <= 0)
    assert np.allclose(w, np.linalg.eigvalsh(A)[::-1], atol=1e-10 * max(1.0, abs(w).max()))
    assert np.allclose(V.T @ V, np.eye(3), atol=1e-12)
    assert np.allclose(A @ V, V * w, atol=1e-9 * max(1.0, abs(w).max()))


@pytest.mark.parametrize("impl", IMPLS)
def test_sym3_eigh_diagonal_and_repeated(impl):
    w, V = impl.sym3_eigh(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(w, [3.0, 2.0, 1.0])
    w, V = impl.sym3_eigh(np.eye(3) * 2.0)
    assert np.allclose(w, 2.0) and np.allclose(V.T @ V, np.eye(3))


def compat_loop(src, dst, sigma):
    n = len(src)
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                ds = np.sqrt(sum((src[i][k] - src[j][k]) ** 2 for k in range(3)))
                dd = np.sqrt(sum((dst[i][k] - dst[j][k]) ** 2 for k in range(3)))
                M[i, j] = max(0.0, 1.0 - (ds - dd) ** 2 / sigma ** 2)
    return M


@pytest.mark.parametrize("impl", IMPLS)
@given(seed=seeds, n=st.integers(1, 25))
def test_compatibility_matrix_oracle(impl, seed, n):
    rng = np.random.default_rng(seed)
    src = rng.normal(scale=0.05, size=(n, 3))
    dst = src + rng.normal(scale=0.01, size=(n, 3))
    M = impl.compatibility_matrix(src, dst, 0.02)
    assert np.allclose(M, compat_loop(src, dst, 0.02), atol=1e-12)
    assert np.array_equal(M, M.T)
    assert np.all(M >= 0) and np.all(np.diag(M) == 0)


def splat_oracle(u, v, z, H, W, r, tol):
    """Per-pixel scan of every point: nearest depth, then closest projection in the window."""
    depth = np.zeros((H, W))
    owner = np.full((H, W), -1)
    ui = np.floor(np.asarray(u) + 0.5).astype(int)
    vi = np.floor(np.asarray(v) + 0.5).astype(int)
    for y in range(H):
        for x in range(W):
            cover = [k for k in range(len(u)) if z[k] > 0
                     and abs(ui[k] - x) <= r and abs(vi[k] - y) <= r]
            if not cover:
                continue
            zmin = min(z[k] for k in cover)
            best = None
            for k in cover:
                if z[k] <= zmin + tol:
                    d2 = (u[k] - x) ** 2 + (v[k] - y) ** 2
                    if best is None or d2 < best[0]:
                        best = (d2, k)
            owner[y, x] = best[1]
            depth[y, x] = z[best[1]]
    return depth, owner


@pytest.mark.parametrize("impl", IMPLS)
@given(seed=seeds)
def test_splat_zbuffer_oracle(impl, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 40))
    u = rng.uniform(-2, 13, n)
    v = rng.uniform(-2, 11, n)
    z = rng.choice([rng.uniform(0.5, 1.0), 0.0], size=n, p=[0.9, 0.1]) + rng.uniform(0, 0.05, n)
    z[rng.random(n) < 0.1] = -1.0
    d, o = impl.splat_zbuffer(u, v, z, 10, 12, 1, 0.02)
    d0, o0 = splat_oracle(u, v, z, 10, 12, 1, 0.02)
    assert np.array_equal(o, o0)
    assert np.array_equal(d, d0)


@needs_ext
@given(seed=seeds)
def test_backends_agree_bitwise(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    A = A + A.T
    for a, b in zip(_pykernels.sym3_eigh(A), _ckernels.sym3_eigh(A)):
        assert np.allclose(a, b, atol=1e-12)
    src = rng.normal(size=(30, 3))
    dst = rng.normal(size=(30, 3))
    assert np.allclose(_pykernels.compatibility_matrix(src, dst, 0.5),
                       _ckernels.compatibility_matrix(src, dst, 0.5), atol=1e-14)
    n = 500
    args = (rng.uniform(-3, 40, n), rng.uniform(-3, 30, n), rng.uniform(0.5, 0.6, n), 28, 36, 1, 0.03)
    for a, b in zip(_pykernels.splat_zbuffer(*args), _ckernels.splat_zbuffer(*args)):
        assert np.array_equal(a, b)


@needs_ext
def test_pure_python_switch(monkeypatch):
    import importlib
    monkeypatch.setenv("PATCHPOSE_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.splat_zbuffer is _pykernels.splat_zbuffer
    finally:
        monkeypatch.delenv("PATCHPOSE_PURE_PYTHON")
        importlib.reload(kernels)
    assert kernels.BACKEND == "cython"
