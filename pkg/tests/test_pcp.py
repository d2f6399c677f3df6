import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchpose.errors import ValidationError
from patchpose.pcp import (DEFAULT_TAU, PcpParams, anchor_patch_mask, binarize, patch_split,
                           patch_unsplit, pcp_forward, similarity_map)
from patchpose.pipeline import feature_grid
from patchpose.synthgen import gt_patch_correlation

seeds = st.integers(0, 2 ** 32 - 1)


def test_default_tau():
    assert DEFAULT_TAU == 0.04


@given(seeds)
def test_similarity_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4, 8))
    Q = rng.normal(size=(3, 5, 8))
    S = similarity_map(A, Q)
    ref = np.zeros((15, 4, 4))
    for q in range(15):
        for y in range(4):
            for x in range(4):
                ref[q, y, x] = sum(Q[q // 5, q % 5, c] * A[y, x, c] for c in range(8))
    assert np.allclose(S, ref, atol=1e-6)


def test_similarity_one_hot_and_zero():
    codes = np.eye(4).reshape(2, 2, 4)
    S = similarity_map(codes, codes)
    assert np.array_equal(S.reshape(4, 4), np.eye(4))
    assert not similarity_map(codes, np.zeros((2, 2, 4))).any()
    with pytest.raises(ValidationError):
        similarity_map(codes, np.zeros((2, 2, 3)))


@given(seeds)
def test_split_unsplit_roundtrip(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(6 * 4, 4, 6))
    X = patch_split(S, 2, (6, 4))
    assert X.shape == (6, 4, 6, 4)
    assert np.array_equal(patch_unsplit(X, 2, (4, 6)), S)


def test_split_marker_index_arithmetic():
    P, H1, W1, H2, W2 = 2, 4, 6, 2, 4
    q, y, x = np.meshgrid(np.arange(H2 * W2), np.arange(H1), np.arange(W1), indexing="ij")
    S = (x + 10 * y + 100 * q).astype(float)
    X = patch_split(S, P, (H2, W2))
    G2 = W1 // P
    for n in range(X.shape[0]):
        for k in range(P * P):
            for i in range(H2):
                for j in range(W2):
                    yy = (n // G2) * P + k // P
                    xx = (n % G2) * P + k % P
                    assert X[n, k, i, j] == xx + 10 * yy + 100 * (i * W2 + j)


def test_split_shapes_and_errors(rng):
    S = rng.normal(size=(16, 4, 4))
    assert patch_split(S, 2, (4, 4)).shape == (4, 4, 4, 4)
    with pytest.raises(ValidationError):
        patch_split(rng.normal(size=(16, 5, 4)), 2, (4, 4))


@given(seeds)
def test_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = PcpParams.init(2, n_blocks=2, seed=seed % 997)
    out = pcp_forward(p, rng.normal(size=(8, 8, 6)), rng.normal(size=(8, 8, 6)))
    assert out.values.shape == (16, 4, 4)
    assert np.allclose(out.values.reshape(16, -1).sum(axis=1), 1.0, atol=1e-5)
    assert np.all(out.values >= 0)


def test_g8_on_16_grid_gives_64x8x8(rng):
    out = pcp_forward(PcpParams.init(2), rng.normal(size=(16, 16, 64)), rng.normal(size=(16, 16, 64)))
    assert out.values.shape == (64, 8, 8)
    assert out.anchor_grid == (8, 8)


def test_params_validation_and_io(tmp_path, rng):
    with pytest.raises(ValidationError):
        PcpParams.init(2, n_blocks=0)
    p = PcpParams.init(2, seed=4)
    with pytest.raises(ValidationError):
        pcp_forward(p, rng.normal(size=(5, 4, 3)), rng.normal(size=(4, 4, 3)))
    p.save(tmp_path / "pcp")
    q = PcpParams.load(tmp_path / "pcp")
    a, b = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    assert np.array_equal(pcp_forward(p, a, b).values, pcp_forward(q, a, b).values)
    with pytest.raises(ValidationError):
        PcpParams.passthrough(2, mode="nope")


@pytest.mark.parametrize("mode", ["diagonal", "block"])
def test_passthrough_identity_scene_argmax_on_diagonal(identity_scene, mode):
    ga = feature_grid(identity_scene.anchor)
    gq = feature_grid(identity_scene.query)
    C = pcp_forward(PcpParams.passthrough(2, mode=mode), ga, gq).values
    C_gt = gt_patch_correlation(identity_scene, 8)
    rows = np.flatnonzero(C_gt.reshape(64, -1).any(axis=1))
    hits = [int(np.argmax(C[n].reshape(-1))) == n for n in rows]
    assert np.mean(hits) >= 0.9


def test_binarize():
    row = np.full((1, 8, 8), 1 / 64)
    assert not binarize(row, 0.04).any()
    hot = np.zeros((1, 8, 8))
    hot[0, 3, 5] = 1.0
    assert np.flatnonzero(binarize(hot, 0.99)).tolist() == [29]
    with pytest.raises(ValidationError):
        binarize(row, 1.0)
    # strict inequality
    assert not binarize(np.array([0.04]), 0.04).any()


@given(seeds, st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_binarize_monotone(seed, t1, t2):
    rng = np.random.default_rng(seed)
    lo, hi = sorted((t1, t2))
    v = rng.dirichlet(np.ones(16), size=4)
    assert np.all(binarize(v, hi) <= binarize(v, lo))


def test_anchor_patch_mask():
    m = anchor_patch_mask(5, (4, 4), (16, 16))
    assert m.sum() == 16
    assert m[4:8, 4:8].all()
