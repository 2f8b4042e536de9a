"""On-disk formats.

A sample directory holds::

    cloud.ply       binary little-endian PLY: x y z (float32), camera_id (uint8)
    keypoints.json  {"labels": [...], "indices": [...], "order_version": 1}
    geodesic.bin    b"GEOF", uint32 n, uint32 m, uint32 reserved, n*m float32 row-major
    meta.json       free-form metadata (units, rig id, seed, ...)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cloud import ORDER_VERSION, AnnotatedSample, KeypointSet, PointCloud
from .errors import MalformedHeader, MissingFile, SampleFormatError, ShapeMismatch
from .geodesy import DIJKSTRA, GeodesicField

GEOF_MAGIC = b"GEOF"
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud):
    path = Path(path)
    cams = cloud.camera_id
    if np.any((cams < 0) | (cams > 255)):
        raise ValueError("camera ids must fit in uint8")
    rec = np.empty(cloud.n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("camera_id", "u1")])
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    rec["camera_id"] = cams.astype(np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {cloud.n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar camera_id\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path, "file not found")
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MalformedHeader(path, "not a PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt, n, props, element = None, None, [], None
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MalformedHeader(path, f"bad element line {line!r}")
            element = tok[1]
            if element == "vertex":
                try:
                    n = int(tok[2])
                except ValueError:
                    raise MalformedHeader(path, f"bad vertex count {tok[2]!r}") from None
            elif int(tok[2]) != 0:
                raise MalformedHeader(path, f"unsupported element {element!r}")
        elif tok[0] == "property" and element == "vertex":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise MalformedHeader(path, f"unsupported property {line!r}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
        else:
            raise MalformedHeader(path, f"unexpected header line {line!r}")
    if fmt != "binary_little_endian":
        raise MalformedHeader(path, f"format must be binary_little_endian, got {fmt!r}")
    if n is None:
        raise MalformedHeader(path, "no vertex element")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise MalformedHeader(path, "vertex element lacks x/y/z")
    dtype = np.dtype(props)
    if len(body) != n * dtype.itemsize:
        raise ShapeMismatch(f"payload is {len(body)} bytes, expected {n * dtype.itemsize}", path)
    rec = np.frombuffer(body, dtype=dtype, count=n)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    cams = rec["camera_id"].astype(np.int64) if "camera_id" in names else None
    try:
        return PointCloud(pts, cams)
    except Exception as exc:  # invalid values, e.g. non-finite coordinates
        raise SampleFormatError(path, str(exc)) from exc


def write_geodesic(path, values):
    values = np.asarray(values, dtype=np.float32)
    n, m = values.shape
    with open(path, "wb") as f:
        f.write(GEOF_MAGIC + struct.pack("<III", n, m, 0))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_geodesic(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path, "file not found")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != GEOF_MAGIC:
        raise MalformedHeader(path, "missing GEOF magic")
    n, m, _ = struct.unpack("<III", data[4:16])
    if len(data) - 16 != 4 * n * m:
        raise ShapeMismatch(f"payload is {len(data) - 16} bytes, expected {4 * n * m} for {n}x{m}", path)
    return np.frombuffer(data[16:], dtype="<f4").reshape(n, m).astype(np.float64)


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path, "file not found")
    try:
        return json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeader(path, f"invalid JSON: {exc}") from None


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_sample(sample: AnnotatedSample, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(directory / "cloud.ply", sample.cloud)
    dump_json(
        directory / "keypoints.json",
        {
            "labels": list(sample.keypoints.labels),
            "indices": [int(i) for i in sample.keypoints.indices],
            "order_version": ORDER_VERSION,
        },
    )
    meta = {k: v for k, v in sample.meta.items() if k != "occluded"}
    geo = directory / "geodesic.bin"
    if sample.geodesic is not None:
        write_geodesic(geo, sample.geodesic.values)
        meta["geodesic_method"] = sample.geodesic.method
    elif geo.exists():
        geo.unlink()
    dump_json(directory / "meta.json", meta)


def load_sample(directory, require_geodesic=False) -> AnnotatedSample:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(directory, "sample directory not found")
    cloud = read_ply(directory / "cloud.ply")
    kp_path = directory / "keypoints.json"
    kp = _read_json(kp_path)
    if not isinstance(kp, dict) or not {"labels", "indices", "order_version"} <= set(kp):
        raise MalformedHeader(kp_path, "expected labels, indices and order_version")
    if kp["order_version"] != ORDER_VERSION:
        raise MalformedHeader(kp_path, f"unsupported order_version {kp['order_version']!r}")
    idx = np.asarray(kp["indices"])
    if len(idx) != len(kp["labels"]) or (len(idx) and not np.issubdtype(idx.dtype, np.integer)):
        raise ShapeMismatch("labels and indices differ in length or indices are not integers", kp_path)
    if np.any(idx < 0) or np.any(idx >= cloud.n) or len(np.unique(idx)) != len(idx):
        raise ShapeMismatch(f"keypoint indices invalid for a cloud of {cloud.n} points", kp_path)
    keypoints = KeypointSet(idx, cloud.points[idx.astype(np.int64)], tuple(kp["labels"]))
    meta = _read_json(directory / "meta.json")
    if not isinstance(meta, dict):
        raise MalformedHeader(directory / "meta.json", "expected a JSON object")

    geo_path = directory / "geodesic.bin"
    geodesic = None
    if geo_path.exists():
        values = read_geodesic(geo_path)
        if values.shape != (cloud.n, keypoints.m):
            raise ShapeMismatch(f"field is {values.shape}, cloud/keypoints need {(cloud.n, keypoints.m)}", geo_path)
        geodesic = GeodesicField(values, meta.get("geodesic_method", DIJKSTRA))
    elif require_geodesic:
        raise MissingFile(geo_path, "geodesic field not precomputed")
    return AnnotatedSample(cloud, keypoints, geodesic, meta)


def list_samples(directory):
    """Sorted sample directories below ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(directory, "dataset directory not found")
    return sorted(p for p in directory.iterdir() if p.is_dir() and (p / "cloud.ply").exists())


def load_dataset(directory, require_geodesic=True):
    return [load_sample(p, require_geodesic) for p in list_samples(directory)]
