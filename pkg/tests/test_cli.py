import json
from pathlib import Path

import numpy as np
import pytest

from patchpose.cli import main
from patchpose.pcp import anchor_patch_mask
from patchpose.tensorio import load_array, load_scene


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--out", str(out), "--n", "3", "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def identity_scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("ident")
    assert main(["gen", "--out", str(out), "--n", "1", "--seed", "3", "--identity"]) == 0
    return out


def test_gen_is_byte_identical(scenes, tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--n", "3", "--seed", "7"]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(scenes)


def test_gen_flags_high_ambiguity(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--n", "2", "--clutter-similarity", "1.0"]) == 0
    rows = [json.loads(line) for line in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and all(r["high_ambiguity"] for r in rows)


def test_invalid_tau_in_config_exits_2(scenes, tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenes": str(scenes / "index.jsonl"), "tau": 1.5}))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "tau" in capsys.readouterr().err


def test_unknown_config_field_exits_2(scenes, tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenes": str(scenes / "index.jsonl"), "tua": 0.1}))
    assert main(["eval", "--config", str(cfg)]) == 2
    assert "tua" in capsys.readouterr().err


def test_missing_scene_list_exits_4(tmp_path):
    assert main(["eval", "--scenes", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 4


def test_eval_twice_identical(scenes, tmp_path):
    args = ["eval", "--scenes", str(scenes / "index.jsonl"), "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    rep = json.loads(a)
    assert rep["aggregate"]["n_scenes"] == 3
    assert [s["scene_id"] for s in rep["scenes"]] == sorted(s["scene_id"] for s in rep["scenes"])


def test_broken_scene_is_isolated(scenes, tmp_path):
    lines = (scenes / "index.jsonl").read_text().splitlines()
    bad = json.loads(lines[0])
    bad["scene_id"] = "zz_broken"
    bad["anchor"]["depth_path"] = "missing/depth.ftz"
    idx = tmp_path / "index.jsonl"
    idx.write_text("\n".join(lines + [json.dumps(bad)]) + "\n")
    # scene paths in the index are relative to its directory
    for p in scenes.iterdir():
        if p.is_dir():
            (tmp_path / p.name).symlink_to(p)
    assert main(["eval", "--scenes", str(idx), "--out", str(tmp_path / "o")]) == 3
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["aggregate"]["n_scenes"] == 3
    assert [e["scene_id"] for e in rep["errors"]] == ["zz_broken"]


def test_sweep_writes_one_report_per_value(scenes, tmp_path):
    assert main(["sweep", "--scenes", str(scenes / "index.jsonl"), "--out", str(tmp_path),
                 "--param", "tau", "--values", "0.01,0.02,0.03,0.04,0.05"]) == 0
    names = sorted(p.name for p in tmp_path.glob("report_*.json"))
    assert names == [f"report_tau={t}.json" for t in ("0.01", "0.02", "0.03", "0.04", "0.05")]


def test_bad_sweep_spec_exits_2(scenes, tmp_path):
    assert main(["eval", "--scenes", str(scenes / "index.jsonl"), "--out", str(tmp_path),
                 "--sweep", "alpha=1,2"]) == 2


def test_match_then_pose(scenes, tmp_path):
    manifest = str(scenes / "scene_000007" / "manifest.json")
    corr = tmp_path / "c.jsonl"
    pose = tmp_path / "p.json"
    assert main(["match", "--scene", manifest, "--output", str(corr)]) == 0
    assert main(["pose", "--corr", str(corr), "--output", str(pose)]) == 0
    est = json.loads(pose.read_text())
    assert np.asarray(est["matrix"]).shape == (4, 4)
    assert est["inlier_count"] >= 3


def test_gradcheck_passes_and_detects_bug(capsys):
    assert main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert sum(l.endswith("pass") for l in out.splitlines()) == 6
    assert main(["gradcheck", "--trials", "2", "--inject-bug", "0.01"]) != 0


def test_gradcheck_trials_flag(capsys):
    assert main(["gradcheck", "--trials", "7", "--seed", "3"]) == 0
    rows = [l for l in capsys.readouterr().out.splitlines() if l.endswith(("pass", "FAIL"))]
    assert len(rows) == 14


def _dump_identity_cp(identity_scenes, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "--scenes", str(identity_scenes / "index.jsonl"), "--cp-source", "oracle",
                 "--out", str(out), "--dump-cp"]) == 0
    sid = json.loads((identity_scenes / "index.jsonl").read_text().splitlines()[0])["scene_id"]
    return identity_scenes / sid / "manifest.json", out / "cp" / f"{sid}.ftz"


def read_ppm(path):
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P6" and maxval == b"255"
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def test_viz_identity_hot_cell(identity_scenes, tmp_path):
    manifest, cp = _dump_identity_cp(identity_scenes, tmp_path)
    C = load_array(cp)
    n = int(np.argmax(C.reshape(len(C), -1).sum(axis=1)))
    assert main(["viz", "--scene", str(manifest), "--cp", str(cp), "--patch", str(n),
                 "--out", str(tmp_path / "v")]) == 0
    scene = load_scene(manifest)
    q = read_ppm(tmp_path / "v" / f"query_patch{n:03d}.ppm").astype(int)
    assert q.shape[:2] == scene.query.shape
    cell = anchor_patch_mask(n, C.shape[1:], scene.query.shape)
    # the cell under patch n is tinted red, the rest blue
    assert q[cell][:, 0].mean() > q[cell][:, 2].mean()
    assert q[~cell][:, 2].mean() > q[~cell][:, 0].mean()
    a = read_ppm(tmp_path / "v" / f"anchor_patch{n:03d}.ppm")
    assert a.shape[:2] == scene.anchor.shape


def test_viz_all_zero_map_is_uniformly_cold(identity_scenes, tmp_path):
    from patchpose.tensorio import save_array
    manifest, _ = _dump_identity_cp(identity_scenes, tmp_path)
    cp = tmp_path / "zero.ftz"
    save_array(np.zeros((64, 8, 8)), cp)
    assert main(["viz", "--scene", str(manifest), "--cp", str(cp), "--patch", "0",
                 "--out", str(tmp_path / "v")]) == 0
    q = read_ppm(tmp_path / "v" / "query_patch000.ppm").astype(int)
    assert np.all(q[..., 2] > q[..., 0])


def test_viz_missing_dump_exits_4(identity_scenes, tmp_path):
    manifest = next(identity_scenes.glob("*/manifest.json"))
    assert main(["viz", "--scene", str(manifest), "--cp", str(tmp_path / "none.ftz"),
                 "--out", str(tmp_path)]) == 4
