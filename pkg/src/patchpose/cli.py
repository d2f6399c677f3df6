"""Command-line entry point: ``patchpose <command> [options]``.

Exit codes: 0 success, 1 failed checks (gradcheck), 2 invalid configuration,
3 some scenes errored, 4 file or format errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, PatchPoseError, ValidationError
from .losses import FD_TOL, run_gradchecks
from .matcher import CorrespondenceSet
from .pcp import binarize
from .pipeline import ModelParams, RunConfig, match_scene, predict_correlation, run_scene
from .registration import register
from .synthgen import SynthConfig, generate_with_retry
from .tensorio import load_array, load_scene, read_index, save_array, save_scene, scene_from_record
from .metrics import EvalReport

log = logging.getLogger("patchpose")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3, 4

_PATH_KEYS = ("feature_path", "mask_path", "depth_path", "gt_mask_path", "rgb_path")


def _dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# gen

def _prefixed(record: dict, prefix: str) -> dict:
    """Record with every relative tensor path rebased under ``prefix``."""
    out = json.loads(json.dumps(record))
    for view in ("anchor", "query"):
        for key in _PATH_KEYS:
            if out[view].get(key):
                out[view][key] = f"{prefix}/{out[view][key]}"
    for key in ("gt_corr_path", "object_model_path"):
        if out.get(key):
            out[key] = f"{prefix}/{out[key]}"
    return out


def _synth_config(args) -> SynthConfig:
    base = _load_json(args.config) if args.config else {}
    known = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(base) - known)
    if unknown:
        raise ValidationError(f"unknown synth config field(s): {', '.join(unknown)}")
    for flag, name in (("clutter_similarity", "clutter_similarity"), ("noise", "feature_noise_sigma"),
                       ("rotation_range", "view_rotation_range"), ("mask_leak", "mask_leak")):
        v = getattr(args, flag)
        if v is not None:
            base[name] = v
    if args.noise_free:
        base.update(feature_noise_sigma=0.0, clutter_similarity=0.0)
    if args.identity:
        base.update(feature_noise_sigma=0.0, clutter_similarity=0.0, view_rotation_range=0.0,
                    view_translation_range=0.0)
    return SynthConfig(**base).validate()


def cmd_gen(args) -> int:
    cfg = _synth_config(args)
    out = Path(args.out)
    records = []
    for i in range(args.n):
        seed = args.seed + i
        scene = generate_with_retry(SynthConfig(**{**asdict(cfg), "seed": seed}),
                                    scene_id=f"scene_{seed:06d}")
        manifest = save_scene(scene, out / scene.scene_id)
        record = _prefixed(_load_json(manifest), scene.scene_id)
        record["high_ambiguity"] = bool(scene.meta.get("high_ambiguity", False))
        records.append(record)
    with open(out / "index.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _dump_json({"synth": cfg.to_dict(), "n": args.n, "seed": args.seed}, out / "gen_config.json")
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / sweep

_OVERRIDES = {"scenes": str, "params": str, "out": str, "grid": int, "tau": float, "d_th": float,
              "lambda1": float, "lambda2": float, "matcher": str, "cp_source": str,
              "registration_method": str, "seed": int, "workers": int}


def _run_config(args) -> RunConfig:
    base = _load_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(base, dict):
        raise ValidationError("config file must hold a JSON object")
    for key in _OVERRIDES:
        v = getattr(args, key, None)
        if v is not None:
            base["output" if key == "out" else key] = v
    if getattr(args, "mutual", False):
        base["mutual"] = True
    try:
        cfg = RunConfig.from_dict(base)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None
    return cfg.validate()


def _scene_records(path):
    p = Path(path)
    if p.suffix == ".jsonl":
        return [(r, p.parent) for r in read_index(p)]
    return [(_load_json(p), p.parent)]


def _eval_one(job):
    record, base, cfg_dict, dump_dir = job
    cfg = RunConfig(**cfg_dict)
    sid = str(record.get("scene_id", "?"))
    try:
        scene = scene_from_record(record, base)
        params = ModelParams.load(cfg.params) if cfg.params else None
        C_p = predict_correlation(scene, cfg, params)
        if dump_dir:
            save_array(C_p, Path(dump_dir) / f"{scene.scene_id}.ftz")
        return run_scene(scene, cfg, params, C_p=C_p), None
    except (PatchPoseError, OSError, KeyError, ValueError) as exc:
        return None, {"scene_id": sid, "error": f"{type(exc).__name__}: {exc}"}


def evaluate(cfg: RunConfig, dump_cp: bool = False) -> EvalReport:
    records = _scene_records(cfg.scenes)
    dump_dir = None
    if dump_cp:
        dump_dir = str(Path(cfg.output) / "cp")
        os.makedirs(dump_dir, exist_ok=True)
    jobs = [(r, str(b), cfg.to_dict(), dump_dir) for r, b in records]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    # output location and worker count do not affect results; keep them out so
    # reports of identical runs compare byte for byte
    shown = {k: v for k, v in cfg.to_dict().items() if k not in ("output", "workers")}
    report = EvalReport(config=shown)
    for row, err in results:
        if err is not None:
            report.errors.append(err)
        else:
            report.scenes.append(row)
    return report


def _parse_sweep(spec):
    key, _, values = spec.partition("=")
    key = key.strip().replace("-", "_")
    if key not in ("tau", "d_th", "grid") or not values:
        raise ValidationError(f"sweep must look like tau=0.01,0.02 (tau, d_th or grid), got {spec!r}")
    conv = int if key == "grid" else float
    try:
        return key, [conv(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"sweep values for {key} must be numbers") from None


def _write_report(report: EvalReport, path) -> None:
    _dump_json(report.to_dict(), path)


def _eval_reports(cfg: RunConfig, sweep, dump_cp) -> int:
    if not Path(cfg.scenes).exists():
        raise FileNotFoundError(f"scene list {cfg.scenes} does not exist")
    out = Path(cfg.output)
    runs = [(None, cfg)]
    if sweep:
        key, values = _parse_sweep(sweep)
        runs = [(f"{key}={v}", RunConfig(**{**cfg.to_dict(), key: v}).validate()) for v in values]
    status = EXIT_OK
    for tag, c in runs:
        report = evaluate(c, dump_cp=dump_cp)
        name = "report.json" if tag is None else f"report_{tag}.json"
        _write_report(report, out / name)
        agg = report.aggregates()
        label = tag or "report"
        print(f"{label}: scenes={agg.get('n_scenes', 0)} errors={len(report.errors)} "
              f"AR={agg.get('ar', float('nan')):.4f}")
        if report.errors:
            status = EXIT_PARTIAL
    return status


def cmd_eval(args) -> int:
    return _eval_reports(_run_config(args), args.sweep, args.dump_cp)


def cmd_sweep(args) -> int:
    return _eval_reports(_run_config(args), f"{args.param}={args.values}", False)


# --------------------------------------------------------------------------
# match / pose

def cmd_match(args) -> int:
    cfg = _run_config(args)
    scene = load_scene(args.scene)
    params = ModelParams.load(cfg.params) if cfg.params else None
    corr = match_scene(scene, predict_correlation(scene, cfg, params), cfg)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    corr.to_jsonl(args.output)
    print(f"{len(corr)} correspondences -> {args.output}")
    return EXIT_OK


def cmd_pose(args) -> int:
    cfg = _run_config(args)
    corr = CorrespondenceSet.from_jsonl(args.corr)
    est = register(corr, cfg.registration_config(), cfg.registration_method)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    est.save(args.output)
    print(f"inliers={est.inlier_count} rms={est.rms_residual:.6f} -> {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ValidationError("trials must be >= 1")
    rows = run_gradchecks(args.trials, args.seed, grad_bias=args.inject_bug)
    print(f"{'loss':<18}{'trial':>6}  {'max rel err':>12}  result")
    for name, t, err, ok in rows:
        print(f"{name:<18}{t:>6}  {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    n_fail = sum(not r[3] for r in rows)
    print(f"{len(rows) - n_fail}/{len(rows)} passed (tolerance {FD_TOL:g})")
    return EXIT_OK if n_fail == 0 else EXIT_CHECK


# --------------------------------------------------------------------------
# viz

def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def heatmap_panels(scene, C_p, n, tau):
    """(anchor panel, query panel) for anchor patch ``n`` as H x W x 3 uint8.

    The anchor panel marks patch ``n``; the query panel tints cells whose
    correlation exceeds ``tau`` red with intensity proportional to the value,
    and every other cell blue.
    """
    from .matcher import upsample_nearest
    from .pcp import anchor_patch_mask

    Np, g1, g2 = C_p.shape
    side = int(round(np.sqrt(Np)))
    base_a = np.where(scene.anchor.mask, 160, 40).astype(np.float64)
    base_q = np.where(scene.query.mask, 160, 40).astype(np.float64)
    anchor = np.repeat(base_a[..., None], 3, axis=2)
    hit = anchor_patch_mask(n, (side, side), scene.anchor.shape)
    anchor[hit] = 0.5 * anchor[hit] + 0.5 * np.array([255.0, 40.0, 40.0])

    row = C_p[n]
    active = binarize(row, tau)
    peak = row[active].max() if active.any() else 1.0
    heat = upsample_nearest(np.where(active, row / peak, 0.0), scene.query.shape)
    on = upsample_nearest(active, scene.query.shape)
    query = np.repeat(base_q[..., None], 3, axis=2)
    hot = np.stack([255.0 * heat, 40.0 * heat, 40.0 * heat], axis=-1)
    cold = np.array([30.0, 60.0, 200.0])
    query = np.where(on[..., None], 0.4 * query + 0.6 * hot, 0.6 * query + 0.4 * cold)
    return (np.clip(anchor, 0, 255).astype(np.uint8), np.clip(query, 0, 255).astype(np.uint8))


def cmd_viz(args) -> int:
    scene = load_scene(args.scene)
    C_p = load_array(args.cp).astype(np.float64)
    if C_p.ndim != 3:
        raise FormatError(f"{args.cp}: expected an N_p x G x G correlation dump, got {C_p.shape}")
    if not 0.0 < args.tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {args.tau}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patches = range(C_p.shape[0]) if args.patch is None else [args.patch]
    for n in patches:
        if not 0 <= n < C_p.shape[0]:
            raise ValidationError(f"patch {n} outside 0..{C_p.shape[0] - 1}")
        a, q = heatmap_panels(scene, C_p, n, args.tau)
        write_ppm(out / f"anchor_patch{n:03d}.ppm", a)
        write_ppm(out / f"query_patch{n:03d}.ppm", q)
    print(f"wrote {2 * len(patches)} panels to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", help="JSON run config; flags below override its fields")
    p.add_argument("--scenes", help="index.jsonl or a single manifest.json")
    p.add_argument("--params", help="parameter directory with cpgp/ and pcp/ subdirectories")
    p.add_argument("--out", help="output directory")
    p.add_argument("--grid", type=int, help="query cells per axis (G)")
    p.add_argument("--tau", type=float, help="binarization threshold")
    p.add_argument("--d-th", dest="d_th", type=float, help="cosine similarity threshold")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--matcher", choices=("patch", "global"))
    p.add_argument("--cp-source", dest="cp_source", choices=("oracle", "model"))
    p.add_argument("--registration-method", dest="registration_method", choices=("spectral", "ransac"))
    p.add_argument("--mutual", action="store_true", help="keep mutual nearest neighbours only")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchpose", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scene pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON file with SynthConfig fields")
    g.add_argument("--clutter-similarity", dest="clutter_similarity", type=float)
    g.add_argument("--noise", type=float, help="descriptor noise sigma")
    g.add_argument("--rotation-range", dest="rotation_range", type=float)
    g.add_argument("--mask-leak", dest="mask_leak", type=float)
    g.add_argument("--noise-free", dest="noise_free", action="store_true")
    g.add_argument("--identity", action="store_true", help="identical views, no noise")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="run the pipeline over scenes and write reports")
    _add_run_flags(e)
    e.add_argument("--sweep", help="e.g. tau=0.01,0.02,0.03: one report per value")
    e.add_argument("--dump-cp", dest="dump_cp", action="store_true",
                   help="also write each scene's correlation map under <out>/cp/")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate once per value of one parameter")
    _add_run_flags(s)
    s.add_argument("--param", required=True, choices=("tau", "d_th", "grid"))
    s.add_argument("--values", required=True, help="comma separated")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("match", help="write the correspondences of one scene as JSONL")
    _add_run_flags(m)
    m.add_argument("--scene", required=True, help="scene manifest.json")
    m.add_argument("--output", required=True)
    m.set_defaults(func=cmd_match)

    p = sub.add_parser("pose", help="register a JSONL correspondence set")
    _add_run_flags(p)
    p.add_argument("--corr", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_pose)

    c = sub.add_parser("gradcheck", help="finite-difference checks of the loss gradients")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-bug", dest="inject_bug", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz", help="heatmap panels of a dumped correlation map (PPM)")
    v.add_argument("--scene", required=True)
    v.add_argument("--cp", required=True, help="correlation map dump (.ftz)")
    v.add_argument("--patch", type=int, help="anchor patch index (default: all)")
    v.add_argument("--tau", type=float, default=0.04)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PatchPoseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
