"""Binary interchange formats shared across the pipeline boundary.

Tensors travel as flat little-endian arrays behind a 16-byte header
(magic "SLGS", dtype code, channel count, height, width).  Masks are 16-bit
grayscale PNG label maps (0 = unlabeled), images are 8-bit RGB PNG, point
clouds are binary little-endian PLY with x/y/z/r/g/b, and checkpoints extend
the PLY vertex schema with every Gaussian field.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import GaussianCloud, Granularity

TENSOR_MAGIC = b"SLGS"
_DTYPES = {0: "<f4", 1: "u1", 2: "<f8"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
_HEADER = struct.Struct("<4sBBHII")  # magic, dtype, version, channels, height, width


# -- flat tensors -------------------------------------------------------------


def tensor_bytes(array: np.ndarray, dtype="<f4") -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("tensors must be HxW or HxWxC")
    h, w, c = arr.shape
    code = _DTYPE_CODES[np.dtype(dtype)]
    header = _HEADER.pack(TENSOR_MAGIC, code, 1, c, h, w)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def write_tensor(path, array: np.ndarray, dtype="<f4"):
    Path(path).write_bytes(tensor_bytes(array, dtype))


def read_tensor_from(buf: bytes, offset: int = 0):
    """Parse one tensor block; returns (array, next offset)."""
    magic, code, version, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"not a tensor block: bad magic {magic!r}")
    if version != 1 or code not in _DTYPES:
        raise ValueError("unsupported tensor header")
    dt = np.dtype(_DTYPES[code])
    count = h * w * c
    start = offset + _HEADER.size
    end = start + count * dt.itemsize
    if end > len(buf):
        raise ValueError("tensor block truncated")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(h, w, c)
    return arr, end


def read_tensor(path) -> np.ndarray:
    arr, _ = read_tensor_from(Path(path).read_bytes())
    return arr


# -- match fields --------------------------------------------------------------


def write_match_field(path, targets: np.ndarray, valid: np.ndarray):
    """Match field file: an f32 HxWx2 target block then a u8 HxW validity block."""
    blob = tensor_bytes(np.asarray(targets, dtype=np.float32), "<f4")
    blob += tensor_bytes(np.asarray(valid, dtype=np.uint8), "u1")
    Path(path).write_bytes(blob)


def read_match_field(path):
    buf = Path(path).read_bytes()
    targets, off = read_tensor_from(buf)
    valid, _ = read_tensor_from(buf, off)
    return targets.astype(np.float64), valid[:, :, 0].astype(bool)


# -- points-with-validity (per-pixel 3D points) -------------------------------


def write_point_map(path, points: np.ndarray, valid: np.ndarray):
    blob = tensor_bytes(np.asarray(points, dtype=np.float32), "<f4")
    blob += tensor_bytes(np.asarray(valid, dtype=np.uint8), "u1")
    Path(path).write_bytes(blob)


def read_point_map(path):
    buf = Path(path).read_bytes()
    points, off = read_tensor_from(buf)
    valid, _ = read_tensor_from(buf, off)
    return points.astype(np.float64), valid[:, :, 0].astype(bool)


# -- images and label maps -----------------------------------------------------


def write_image(path, image: np.ndarray):
    """8-bit RGB PNG from a float image in [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_label_map(path, labels: np.ndarray):
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels out of uint16 range")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_label_map(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise ValueError(f"unexpected label-map dtype {arr.dtype}")
    return arr.astype(np.uint16)


def write_rle_masks(path, masks, shape):
    """RLE JSON alternative to label maps: may carry overlapping regions."""
    from .alignment import rle_encode

    doc = {
        "shape": [int(shape[0]), int(shape[1])],
        "masks": [{"id": int(mid), "rle": rle_encode(bm)} for mid, bm in masks],
    }
    Path(path).write_text(json.dumps(doc))


def read_masks(path):
    """Read either mask format into a list of (mask_id, bitmap), id-sorted."""
    from .alignment import rle_decode

    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        shape = tuple(doc["shape"])
        out = [(int(m["id"]), rle_decode(m["rle"], shape)) for m in doc["masks"]]
        return sorted(out)
    labels = read_label_map(path)
    return [(int(v), labels == v) for v in sorted(np.unique(labels)) if v != 0]


# -- point-cloud PLY -------------------------------------------------------------


def write_ply(path, points: np.ndarray, colors: np.ndarray):
    """Binary little-endian PLY with x/y/z float32 and r/g/b uint8."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    cols = np.asarray(colors)
    if cols.dtype != np.uint8:
        cols = (np.clip(cols, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    cols = cols.reshape(-1, 3)
    if len(cols) != len(pts):
        raise ValueError("points and colors disagree in length")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(len(pts), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = pts
    rec["rgb"] = cols
    Path(path).write_bytes(header.encode("ascii") + rec.tobytes())


def _parse_ply_header(raw: bytes):
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    fmt = next((l.split()[1] for l in lines if l.startswith("format")), "")
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt!r}")
    count = 0
    props = []
    in_vertex = False
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
            in_vertex = True
        elif parts[0] == "element":
            in_vertex = False
        elif parts[0] == "property" and in_vertex:
            props.append((parts[2], parts[1]))
    return count, props, end + len(b"end_header\n")


_PLY_TYPES = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4", "uint": "<u4"}


def read_ply(path):
    """Returns (points (N,3) float64, colors (N,3) float64 in [0,1])."""
    raw = Path(path).read_bytes()
    count, props, offset = _parse_ply_header(raw)
    dtype = np.dtype([(name, _PLY_TYPES[t]) for name, t in props])
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if all(k in rec.dtype.names for k in ("red", "green", "blue")):
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    else:
        cols = np.full((count, 3), 0.5)
    return pts, cols


# -- Gaussian checkpoints --------------------------------------------------------


def save_checkpoint(path, cloud: GaussianCloud):
    """PLY with extended per-vertex properties carrying every Gaussian field."""
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    fields += [(f"color_{i}", "<f4") for i in range(3)]
    fields += [("opacity_logit", "<f4")]
    fields += [(f"log_scale_{i}", "<f4") for i in range(3)]
    fields += [(f"rot_{i}", "<f4") for i in range(4)]
    for gran in cloud.granularities:
        d = cloud.semantic_dim
        fields += [(f"sem_{gran.name}_{i}", "<f4") for i in range(d)]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.means.T.astype(np.float32)
    for i in range(3):
        rec[f"color_{i}"] = cloud.colors[:, i]
        rec[f"log_scale_{i}"] = cloud.log_scales[:, i]
    rec["opacity_logit"] = cloud.opacity_logits
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i]
    for gran in cloud.granularities:
        codes = cloud.sem_codes[gran]
        for i in range(codes.shape[1]):
            rec[f"sem_{gran.name}_{i}"] = codes[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name, _ in fields]
    header += ["end_header", ""]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes("\n".join(header).encode("ascii") + rec.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    count, props, offset = _parse_ply_header(raw)
    dtype = np.dtype([(name, _PLY_TYPES[t]) for name, t in props])
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    names = rec.dtype.names
    means = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec[f"color_{i}"] for i in range(3)], axis=1).astype(np.float64)
    log_scales = np.stack([rec[f"log_scale_{i}"] for i in range(3)], axis=1).astype(np.float64)
    rots = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    logits = rec["opacity_logit"].astype(np.float64)
    sem = {}
    for gran in Granularity:
        cols = [f"sem_{gran.name}_{i}" for i in range(64) if f"sem_{gran.name}_{i}" in names]
        if cols:
            sem[gran] = np.stack([rec[c] for c in cols], axis=1).astype(np.float64)
    return GaussianCloud(means, log_scales, rots, logits, colors, sem)
