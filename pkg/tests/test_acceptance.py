"""End-to-end acceptance criteria, one test per criterion.

Each test reports a PASS/FAIL line (also collected into the pytest summary).
"""
import json
import math
import time

import numpy as np

from patchpose.cli import main
from patchpose.geometry import RigidTransform, rotation_error_deg
from patchpose.losses import loss_correlation, run_gradchecks
from patchpose.metrics import add_error, evaluate_pose
from patchpose.pcp import PcpParams, patch_split, patch_unsplit, pcp_forward, similarity_map
from patchpose.pipeline import RunConfig, run_scene
from patchpose.registration import register_ransac, register_spectral
from patchpose.synthgen import (SynthConfig, generate_with_retry, noise_free,
                                synthetic_correspondences)
from patchpose.tensorio import TensorBlob, decode_tensor, encode_tensor, read_tensor, write_tensor


def test_1_format_roundtrip(verdict, tmp_path):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    bad = 0
    for i in range(1000):
        kind = ("f32", "f64", "u8")[i % 3]
        shape = tuple(int(d) for d in rng.integers(1, 6, size=rng.integers(1, 5)))
        n = int(np.prod(shape))
        if kind == "u8":
            data = rng.integers(0, 256, n, dtype=np.uint8)
        else:
            # raw bit patterns, so NaN payloads and signed zeros are covered too
            width = 4 if kind == "f32" else 8
            data = np.frombuffer(rng.bytes(n * width), dtype="<f4" if kind == "f32" else "<f8")
        blob = TensorBlob(kind, shape, data)
        if i % 10 == 0:
            write_tensor(blob, tmp_path / "b.ftz")
            back = read_tensor(tmp_path / "b.ftz")
        else:
            back = decode_tensor(encode_tensor(blob))
        bad += not (back == blob)
    dt = time.perf_counter() - t0
    verdict(1, "format roundtrip", bad == 0 and dt < 10, f"mismatches={bad} time={dt:.2f}s")


def _bce_scalar(C_p, C_gt, eps=1e-7):
    flat_p = [float(x) for x in np.asarray(C_p).reshape(-1)]
    flat_g = [int(x) for x in np.asarray(C_gt).reshape(-1)]
    n_pos = sum(flat_g)
    w_p = (len(flat_g) - n_pos) / n_pos if n_pos else 1.0
    total = 0.0
    for p, g in zip(flat_p, flat_g):
        p = min(max(p, eps), 1 - eps)
        total += w_p * g * math.log(p) + (1 - g) * math.log(1 - p)
    return -total / len(flat_g)


def test_2_loss_oracles(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(d) for d in rng.integers(1, 6, size=3))
        C_p = rng.uniform(0, 1, size=shape)
        C_p[rng.random(shape) < 0.05] = rng.choice([0.0, 1.0])
        C_gt = (rng.random(shape) < 0.3).astype(np.uint8)
        C_gt.reshape(-1)[rng.integers(C_gt.size)] = 1
        worst = max(worst, abs(loss_correlation(C_p, C_gt).value - _bce_scalar(C_p, C_gt)))
    hand = abs(loss_correlation(np.full(4, 0.5), np.array([1, 0, 0, 0])).value - 1.5 * math.log(2))
    verdict(2, "loss oracles", worst < 1e-10 and hand < 1e-12,
            f"max|vec-scalar|={worst:.2e} hand={hand:.2e}")


def test_3_gradient_checks(verdict):
    t0 = time.perf_counter()
    rows = run_gradchecks(trials=100, seed=0)
    dt = time.perf_counter() - t0
    per = {name: [r for r in rows if r[0] == name] for name in ("loss_feature", "loss_correlation")}
    counts = {k: len(v) for k, v in per.items()}
    worst = max(r[2] for r in rows)
    ok = all(c == 100 for c in counts.values()) and worst < 1e-4 and dt < 60
    verdict(3, "gradient checks", ok, f"instances={counts} max_rel_err={worst:.2e} time={dt:.1f}s")


def test_4_pcp_structure(verdict):
    rng = np.random.default_rng(4)
    S = rng.normal(size=(16 * 16, 16, 16))
    roundtrip = np.array_equal(patch_unsplit(patch_split(S, 2, (16, 16)), 2, (16, 16)), S)

    A = rng.normal(size=(4, 4, 6))
    Q = rng.normal(size=(4, 4, 6))
    ref = np.zeros((16, 4, 4))
    for q in range(16):
        for y in range(4):
            for x in range(4):
                ref[q, y, x] = sum(Q[q // 4, q % 4, c] * A[y, x, c] for c in range(6))
    sim_err = float(np.abs(similarity_map(A, Q) - ref).max())

    fa = rng.normal(size=(16, 16, 32))
    fq = rng.normal(size=(16, 16, 32))
    C = pcp_forward(PcpParams.init(patch=2, seed=4), fa, fq).values
    row_err = float(np.abs(C.reshape(len(C), -1).sum(axis=1) - 1).max())
    ok = roundtrip and row_err < 1e-5 and sim_err < 1e-6 and C.shape == (64, 8, 8)
    verdict(4, "pcp structure", ok,
            f"roundtrip={roundtrip} row_sum_err={row_err:.1e} sim_err={sim_err:.1e} shape={C.shape}")


def test_5_registration_robustness(verdict):
    t0 = time.perf_counter()
    hits = agree = 0
    for seed in range(100):
        corr, T, scale, _ = synthetic_correspondences(seed, n_inliers=40, n_outliers=60)
        a = register_spectral(corr)
        b = register_ransac(corr)
        rot = rotation_error_deg(T.rotation, a.transform.rotation)
        trans = np.linalg.norm(T.translation - a.transform.translation) / scale
        hits += rot < 1.0 and trans < 0.01
        agree += (rotation_error_deg(a.transform.rotation, b.transform.rotation) < 0.5
                  and np.linalg.norm(a.transform.translation - b.transform.translation) / scale < 0.005)
    dt = time.perf_counter() - t0
    verdict(5, "registration robustness", hits >= 95 and agree >= 90 and dt < 120,
            f"spectral_ok={hits}/100 agree={agree}/100 time={dt:.1f}s")


def test_6_end_to_end_noise_free(verdict):
    t0 = time.perf_counter()
    cfg = RunConfig(cp_source="oracle")
    rows = [run_scene(generate_with_retry(noise_free(SynthConfig(seed=s))), cfg) for s in range(50)]
    dt = time.perf_counter() - t0
    ar = float(np.mean([r["ar"] for r in rows]))
    adds = [r["add"] for r in rows]
    mean_add = float(np.mean(adds)) if None not in adds else float("inf")
    verdict(6, "end-to-end noise-free", ar >= 0.99 and mean_add < 1e-3 and dt < 300,
            f"AR={ar:.5f} mean_ADD={1e3 * mean_add:.3f}mm time={dt:.1f}s")


def test_7_patch_constrained_beats_global(verdict):
    patch_cfg = RunConfig(cp_source="oracle", matcher="patch")
    glob_cfg = RunConfig(cp_source="oracle", matcher="global")
    prec = []
    ar = []
    for s in range(100):
        scene = generate_with_retry(SynthConfig(seed=s, clutter_similarity=1.0))
        p = run_scene(scene, patch_cfg)
        g = run_scene(scene, glob_cfg)
        prec.append((p["match_precision"] or 0.0, g["match_precision"] or 0.0))
        ar.append((p["ar"], g["ar"]))
    prec = np.array(prec)
    ar = np.array(ar)
    never_worse = bool(np.all(prec[:, 0] >= prec[:, 1]))
    strictly = int(np.sum(prec[:, 0] > prec[:, 1]))
    gap = float(ar[:, 0].mean() - ar[:, 1].mean())
    verdict(7, "patch-constrained vs global", never_worse and strictly >= 80 and gap >= 0.10,
            f"never_worse={never_worse} strictly_better={strictly}/100 "
            f"AR patch={ar[:, 0].mean():.3f} global={ar[:, 1].mean():.3f} gap={gap:.3f}")


def test_8_threshold_monotonicity(verdict, tmp_path):
    scenes = tmp_path / "scenes"
    assert main(["gen", "--out", str(scenes), "--n", "20", "--seed", "100"]) == 0
    taus = ["0.01", "0.02", "0.03", "0.04", "0.05"]
    code = main(["eval", "--scenes", str(scenes / "index.jsonl"), "--out", str(tmp_path / "out"),
                 "--cp-source", "model", "--sweep", "tau=" + ",".join(taus)])
    reports = [tmp_path / "out" / f"report_tau={t}.json" for t in taus]
    emitted = sum(p.exists() for p in reports)
    counts = {}
    for p in reports:
        if p.exists():
            for row in json.loads(p.read_text())["scenes"]:
                counts.setdefault(row["scene_id"], []).append(row["n_matches"])
    monotone = all(len(c) == 5 and all(a >= b for a, b in zip(c, c[1:])) for c in counts.values())
    varied = sum(c[0] > c[-1] for c in counts.values())
    verdict(8, "threshold monotonicity", code == 0 and emitted == 5 and monotone and len(counts) == 20,
            f"exit={code} reports={emitted}/5 monotone={monotone} scenes={len(counts)} "
            f"count_drops={varied}")


def test_9_metric_sanity(verdict):
    ok_identity = ok_shift = 0
    n = 20
    for s in range(n):
        scene = generate_with_retry(SynthConfig(seed=200 + s))
        T, m = scene.gt_pose, scene.model
        out = evaluate_pose(m, T, T, scene.query.camera, scene.query.depth)
        ok_identity += out["add"] == 0.0 and out["ar"] == 1.0 and out["vsd_recall"] == 1.0
        axis = np.eye(3)[s % 3]
        shifted = RigidTransform(T.rotation, T.translation + 0.1 * m.diameter * axis)
        ok_shift += not add_error(m, T, shifted)[1]
    verdict(9, "metric sanity", ok_identity == n and ok_shift == n,
            f"identity_ok={ok_identity}/{n} tenth_diameter_rejected={ok_shift}/{n}")


def test_10_determinism(verdict, tmp_path):
    scenes = tmp_path / "scenes"
    assert main(["gen", "--out", str(scenes), "--n", "5", "--seed", "300"]) == 0
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenes": str(scenes / "index.jsonl"), "seed": 9,
                               "registration_method": "ransac"}))
    codes = [main(["eval", "--config", str(cfg), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    verdict(10, "determinism", codes == [0, 0] and a == b,
            f"exit={codes} identical={a == b} bytes={len(a)}")
