"""FTZ1 tensor container and scene manifests.

Container layout (all integers little-endian)::

    b"FTZ1" | dtype tag u8 | rank u8 | shape: rank x u64 | raw scalars

Dtype tags: 0 = f32, 1 = f64, 2 = u8.

A scene manifest is one JSON object; collections of scenes are JSON lines.
Paths inside a manifest are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import PinholeCamera, RigidTransform

MAGIC = b"FTZ1"
MAX_RANK = 4
_HEADER = 6

DTYPE_TAGS = {"f32": 0, "f64": 1, "u8": 2}
_TAG_NAMES = {v: k for k, v in DTYPE_TAGS.items()}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


@dataclass(frozen=True, eq=False)
class TensorBlob:
    dtype: str
    shape: tuple
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPE_TAGS:
            raise ValidationError(f"unsupported dtype {self.dtype!r}")
        shape = tuple(int(d) for d in self.shape)
        if not 1 <= len(shape) <= MAX_RANK:
            raise ValidationError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
        if any(d < 1 for d in shape):
            raise ValidationError(f"every dim must be >= 1, got {shape}")
        data = np.ascontiguousarray(np.asarray(self.data), dtype=_NP_DTYPES[self.dtype])
        if data.size != int(np.prod(shape, dtype=object)):
            raise ValidationError(f"{data.size} elements do not fill shape {shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data.reshape(shape))

    @classmethod
    def from_array(cls, arr) -> "TensorBlob":
        arr = np.asarray(arr)
        kind = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                np.dtype(np.uint8): "u8", np.dtype(bool): "u8"}.get(arr.dtype)
        if kind is None:
            raise ValidationError(f"no FTZ dtype for {arr.dtype}")
        return cls(kind, arr.shape, arr)

    def __eq__(self, other):
        if not isinstance(other, TensorBlob):
            return NotImplemented
        return (self.dtype == other.dtype and self.shape == other.shape
                and self.data.tobytes() == other.data.tobytes())

    __hash__ = None


def encode_tensor(blob: TensorBlob) -> bytes:
    header = MAGIC + bytes([DTYPE_TAGS[blob.dtype], len(blob.shape)])
    header += struct.pack(f"<{len(blob.shape)}Q", *blob.shape)
    return header + blob.data.tobytes()


def decode_tensor(buf: bytes, source="<bytes>") -> TensorBlob:
    if len(buf) < _HEADER or buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    tag, rank = buf[4], buf[5]
    if tag not in _TAG_NAMES:
        raise FormatError(f"{source}: unknown dtype tag {tag}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{source}: rank {rank} out of range")
    end = _HEADER + 8 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: truncated shape header")
    shape = struct.unpack(f"<{rank}Q", buf[_HEADER:end])
    if any(d < 1 for d in shape):
        raise FormatError(f"{source}: zero-sized dim in {shape}")
    dtype = _TAG_NAMES[tag]
    count = 1
    for d in shape:
        count *= d
    nbytes = count * _NP_DTYPES[dtype].itemsize
    if count >= 2 ** 63 or nbytes >= 2 ** 63:
        raise FormatError(f"{source}: shape {shape} overflows")
    payload = len(buf) - end
    if payload != nbytes:
        raise FormatError(f"{source}: payload is {payload} bytes, shape {shape} needs {nbytes}")
    data = np.frombuffer(buf, dtype=_NP_DTYPES[dtype], count=count, offset=end)
    return TensorBlob(dtype, shape, data.copy())


def write_tensor(blob: TensorBlob, path) -> None:
    if not isinstance(blob, TensorBlob):
        blob = TensorBlob.from_array(blob)
    try:
        with open(path, "wb") as fh:
            fh.write(encode_tensor(blob))
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> TensorBlob:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read tensor {path}: {exc}") from exc
    return decode_tensor(buf, source=str(path))


def save_array(arr, path) -> None:
    write_tensor(TensorBlob.from_array(arr), path)


def load_array(path) -> np.ndarray:
    return read_tensor(path).data


# --------------------------------------------------------------------------
# scenes

@dataclass
class ViewData:
    features: np.ndarray            # H x W x C float32, unit-norm rows
    mask: np.ndarray                # H x W bool, segmentation consumed by matching
    depth: np.ndarray               # H x W float32 meters, 0 = invalid
    camera: PinholeCamera
    gt_mask: Optional[np.ndarray] = None   # H x W bool, object-only pixels
    rgb: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class ScenePair:
    scene_id: str
    anchor: ViewData
    query: ViewData
    gt_pose: RigidTransform
    gt_corr: np.ndarray             # K x 4 int64: uA, vA, uQ, vQ
    model: "object"                 # metrics.ObjectModel
    prompt_text: str = ""
    meta: dict = field(default_factory=dict)


def _check_pose(M, where):
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (4, 4) or not np.all(np.isfinite(M)):
        raise ValidationError(f"{where}: gt_pose_A_to_Q must be a finite 4x4 matrix")
    R = M[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValidationError(f"{where}: gt_pose rotation block is not a proper rotation")
    return RigidTransform.from_matrix(M)


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def _load_view(base: Path, entry: dict, where: str) -> ViewData:
    feats = load_array(_resolve(base, entry["feature_path"]))
    mask = load_array(_resolve(base, entry["mask_path"]))
    depth = load_array(_resolve(base, entry["depth_path"]))
    if feats.ndim != 3:
        raise ValidationError(f"{where}: features must be H x W x C, got {feats.shape}")
    H, W = feats.shape[:2]
    if mask.shape != (H, W):
        raise ValidationError(
            f"{where}: mask_path {mask.shape[:2]} does not match feature_path {(H, W)}")
    if depth.shape != (H, W):
        raise ValidationError(
            f"{where}: depth_path {depth.shape[:2]} does not match feature_path {(H, W)}")
    gt_mask = None
    if entry.get("gt_mask_path"):
        gt_mask = load_array(_resolve(base, entry["gt_mask_path"]))
        if gt_mask.shape != (H, W):
            raise ValidationError(
                f"{where}: gt_mask_path {gt_mask.shape} does not match feature_path {(H, W)}")
        gt_mask = gt_mask != 0
    rgb = None
    if entry.get("rgb_path"):
        rgb = load_array(_resolve(base, entry["rgb_path"]))
    K = np.asarray(entry["intrinsics"], dtype=np.float64)
    cam = PinholeCamera.from_intrinsics(K, W, H)
    return ViewData(feats.astype(np.float32, copy=False), mask != 0,
                    depth.astype(np.float32, copy=False), cam, gt_mask, rgb)


def scene_from_record(record: dict, base_dir) -> ScenePair:
    from .metrics import ObjectModel

    base = Path(base_dir)
    sid = str(record["scene_id"])
    anchor = _load_view(base, record["anchor"], f"{sid}/anchor")
    query = _load_view(base, record["query"], f"{sid}/query")
    pose = _check_pose(record["gt_pose_A_to_Q"], sid)
    diameter = float(record["object_diameter"])
    if not diameter > 0:
        raise ValidationError(f"{sid}: object_diameter must be positive")
    if record.get("gt_corr_path"):
        gt_corr = load_array(_resolve(base, record["gt_corr_path"]))
        if gt_corr.ndim != 2 or gt_corr.shape[1] != 4:
            raise ValidationError(f"{sid}: gt_corr must be K x 4, got {gt_corr.shape}")
        gt_corr = np.rint(gt_corr).astype(np.int64)
    else:
        gt_corr = np.zeros((0, 4), dtype=np.int64)
    points = load_array(_resolve(base, record["object_model_path"])).astype(np.float64)
    syms = [RigidTransform.from_matrix(S) for S in record.get("object_symmetries", [])]
    model = ObjectModel(points, diameter, syms or None)
    return ScenePair(sid, anchor, query, pose, gt_corr, model,
                     str(record.get("prompt_text", "")), dict(record.get("meta", {})))


def load_scene(manifest_path) -> ScenePair:
    """Load one scene from a single-record manifest file."""
    path = Path(manifest_path)
    with open(path) as fh:
        record = json.load(fh)
    return scene_from_record(record, path.parent)


def read_index(index_path) -> list:
    """Records of a line-delimited manifest collection."""
    with open(index_path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def view_entry(prefix: str, view: ViewData) -> dict:
    return {"feature_path": f"{prefix}_features.ftz",
            "mask_path": f"{prefix}_mask.ftz",
            "depth_path": f"{prefix}_depth.ftz",
            "gt_mask_path": f"{prefix}_gt_mask.ftz",
            "intrinsics": view.camera.intrinsics().tolist()}


def save_scene(scene: ScenePair, out_dir) -> Path:
    """Write every tensor of ``scene`` plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    record = {"scene_id": scene.scene_id}
    for name, view in (("anchor", scene.anchor), ("query", scene.query)):
        entry = view_entry(name, view)
        save_array(view.features.astype(np.float32), out / entry["feature_path"])
        save_array(view.mask.astype(np.uint8), out / entry["mask_path"])
        save_array(view.depth.astype(np.float32), out / entry["depth_path"])
        if view.gt_mask is not None:
            save_array(view.gt_mask.astype(np.uint8), out / entry["gt_mask_path"])
        else:
            del entry["gt_mask_path"]
        record[name] = entry
    record["gt_pose_A_to_Q"] = scene.gt_pose.matrix().tolist()
    if len(scene.gt_corr):
        record["gt_corr_path"] = "gt_corr.ftz"
        save_array(scene.gt_corr.astype(np.float64), out / "gt_corr.ftz")
    record["object_model_path"] = "object_model.ftz"
    save_array(np.asarray(scene.model.points, dtype=np.float64), out / "object_model.ftz")
    record["object_diameter"] = float(scene.model.diameter)
    if not scene.model.identity_only:
        record["object_symmetries"] = [S.matrix().tolist() for S in scene.model.symmetries]
    record["prompt_text"] = scene.prompt_text
    if scene.meta:
        record["meta"] = scene.meta
    with open(out / "manifest.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out / "manifest.json"


# --------------------------------------------------------------------------
# parameter directories

def save_param_dir(out_dir, tensors: dict, config: dict, kind: str) -> None:
    """Write named tensors as ``<name>.ftz`` plus an ``index.json`` describing them."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    names = sorted(tensors)
    for name in names:
        save_array(np.asarray(tensors[name], dtype=np.float64), out / f"{name}.ftz")
    index = {"kind": kind, "config": config,
             "tensors": {n: list(np.shape(tensors[n])) for n in names}}
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_param_dir(in_dir, kind: str):
    base = Path(in_dir)
    with open(base / "index.json") as fh:
        index = json.load(fh)
    if index.get("kind") != kind:
        raise ValidationError(f"{base}: expected parameter kind {kind!r}, found {index.get('kind')!r}")
    tensors = {}
    for name, shape in index["tensors"].items():
        arr = load_array(base / f"{name}.ftz")
        if list(arr.shape) != list(shape):
            raise ValidationError(f"{base}/{name}: shape {arr.shape} != indexed {shape}")
        tensors[name] = arr
    return tensors, index["config"]
