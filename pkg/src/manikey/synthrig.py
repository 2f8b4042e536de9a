"""Procedural quadrupeds seen by a virtual multi-camera rig.

The animal stands on the ground plane z = 0, faces +y, and its right side
is +x. The body is an ellipsoid, the legs and neck are cylinders and the
head a small ellipsoid. Surfaces are sampled uniformly by area and points
falling inside another primitive are discarded, which leaves the surface
of the union.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cloud import (
    KEYPOINT_LABELS,
    AnnotatedSample,
    KeypointSet,
    MultiViewCapture,
    PointCloud,
    RorParams,
    SorParams,
    check_rigid,
    filter_outliers,
    merge_views,
    rigid_transform,
)
from .errors import InvalidParams
from .geodesy import DIJKSTRA, GeodesicField, geodesic_field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadrupedParams:
    body_half_length: float = 0.9
    body_half_width: float = 0.35
    body_half_height: float = 0.45
    leg_length: float = 0.75
    leg_radius: float = 0.08
    leg_inset: float = 0.55  # lateral leg position, fraction of body half width
    leg_offset: float = 0.62  # longitudinal leg position, fraction of body half length
    neck_length: float = 0.55
    neck_radius: float = 0.15
    neck_elevation: float = math.radians(35.0)
    head_half_axes: tuple = (0.13, 0.26, 0.15)
    # Per-animal variation.
    size_sigma: float = 0.07
    splay_sigma: float = math.radians(4.0)
    stance_sigma: float = 0.06
    lean_sigma: float = math.radians(4.0)
    density: float = 140.0  # points per square meter

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            sigma = f.name.endswith("_sigma")
            if any(not np.isfinite(x) or x < 0 or (x == 0 and not sigma) for x in vals):
                raise InvalidParams(f"{f.name} must be positive, got {v}")
        if self.leg_inset >= 1 or self.leg_offset >= 1:
            raise InvalidParams("legs must attach under the body")
        if self.leg_radius >= self.body_half_width:
            raise InvalidParams("legs are wider than the body")

    def symmetric(self):
        """Same animal family without stance jitter (per-leg steps and lean), so left and right mirror each other."""
        return dataclasses.replace(self, stance_sigma=0.0, lean_sigma=0.0)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["head_half_axes"] = list(self.head_half_axes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "head_half_axes" in d:
            d["head_half_axes"] = tuple(d["head_half_axes"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Primitives


@dataclass(frozen=True)
class _Ellipsoid:
    center: np.ndarray
    axes: np.ndarray

    def area(self):
        a, b, c = self.axes
        p = 1.6075
        return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample(self, count, rng):
        a = np.asarray(self.axes)
        out = []
        got = 0
        while got < count:
            u = rng.normal(size=(2 * count, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            # Area element of the map sphere -> ellipsoid, relative to its max.
            g = np.sqrt(((u / a) ** 2).sum(axis=1)) * a.min()
            u = u[rng.uniform(size=len(u)) < g]
            out.append(u)
            got += len(u)
        u = np.concatenate(out)[:count]
        pts = self.center + u * a
        nrm = u / a
        return pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    def inside(self, p, margin=0.0):
        q = (p - self.center) / (np.asarray(self.axes) + margin)
        return (q * q).sum(axis=1) < 1.0

    def exit_along(self, origin, direction):
        """Largest s with origin + s * direction on the surface (origin inside)."""
        a = np.asarray(self.axes)
        o = (origin - self.center) / a
        d = direction / a
        A, B, C = d @ d, 2 * o @ d, o @ o - 1
        return (-B + math.sqrt(B * B - 4 * A * C)) / (2 * A)


@dataclass(frozen=True)
class _Cylinder:
    start: np.ndarray
    end: np.ndarray
    radius: float

    def _frame(self):
        axis = self.end - self.start
        length = float(np.linalg.norm(axis))
        d = axis / length
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(d, helper)
        e1 /= np.linalg.norm(e1)
        return d, e1, np.cross(d, e1), length

    def area(self):
        return 2 * math.pi * self.radius * float(np.linalg.norm(self.end - self.start))

    def sample(self, count, rng):
        d, e1, e2, length = self._frame()
        phi = rng.uniform(0, 2 * math.pi, size=count)
        s = rng.uniform(0, length, size=count)
        nrm = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        return self.start + s[:, None] * d + self.radius * nrm, nrm

    def inside(self, p, margin=0.0):
        d, _, _, length = self._frame()
        rel = p - self.start
        s = rel @ d
        radial = rel - s[:, None] * d
        return (s > 0) & (s < length) & ((radial * radial).sum(axis=1) < (self.radius + margin) ** 2)


# ---------------------------------------------------------------------------
# Shape generation


@dataclass(frozen=True)
class _Animal:
    body: _Ellipsoid
    legs: tuple  # order: right-rear, right-front, left-front, left-rear
    neck: _Cylinder
    head: _Ellipsoid
    keypoints: np.ndarray  # 6 x 3, canonical order, before snapping
    posture: np.ndarray  # 4 x 4 whole-body shear applied after sampling

    @property
    def parts(self):
        return (self.body, *self.legs, self.neck, self.head)


def _draw_animal(params: QuadrupedParams, rng) -> _Animal:
    size = 1.0 + params.size_sigma * rng.normal(size=4)
    a = params.body_half_width * size[0]
    b = params.body_half_length * size[1]
    c = params.body_half_height * size[2]
    leg_len = params.leg_length * size[3]
    r = params.leg_radius
    splay = params.splay_sigma * rng.normal()
    stance = params.stance_sigma * rng.normal(size=4)
    lean = params.lean_sigma * rng.normal(size=2)

    zc = leg_len + c * 0.55
    body = _Ellipsoid(np.array([0.0, 0.0, zc]), np.array([a, b, c]))

    legs, leg_kps = [], {}
    # (side sign, front sign) per leg, right = +x, front = +y
    for name, sx, sy, k in (("rr", 1, -1, 0), ("rf", 1, 1, 1), ("lf", -1, 1, 2), ("lr", -1, -1, 3)):
        x = sx * params.leg_inset * a
        y = sy * params.leg_offset * b
        under = zc - c * math.sqrt(max(1 - (x / a) ** 2 - (y / b) ** 2, 1e-6))
        top = np.array([x, y, under + 0.5 * c])  # buried in the body
        tilt = math.radians(3.0) + splay
        foot = np.array([x + sx * leg_len * math.tan(tilt), y + stance[k], 0.0])
        legs.append(_Cylinder(foot, top, r))
        # Top of the leg on its outer side, where the cylinder enters the body.
        d = (top - foot) / np.linalg.norm(top - foot)
        outer = foot + np.array([sx * r, 0.0, 0.0])
        s = _bisect_exit(lambda t: body.inside((outer + t * d)[None])[0], 0.0, leg_len * 1.5)
        leg_kps[name] = outer + s * d

    base = np.array([0.0, 0.72 * b, zc + 0.25 * c])
    el = params.neck_elevation
    nd = np.array([0.0, math.cos(el), math.sin(el)])
    neck_len = params.neck_length + body.exit_along(base, nd)
    neck = _Cylinder(base, base + neck_len * nd, params.neck_radius)
    hx, hy, hz = params.head_half_axes
    head = _Ellipsoid(base + (neck_len + 0.6 * hy) * nd - np.array([0, 0, 0.3 * hz]), np.array([hx, hy, hz]))
    # Neck keypoint: where the top line of the neck leaves the body.
    up = np.array([0.0, -math.sin(el), math.cos(el)])
    top_line = base + params.neck_radius * up
    neck_kp = top_line + body.exit_along(top_line, nd) * nd

    yh = -0.62 * b
    hip = np.array([0.0, yh, zc + c * math.sqrt(1 - (yh / b) ** 2)])

    kps = np.array([leg_kps["rr"], leg_kps["rf"], hip, neck_kp, leg_kps["lf"], leg_kps["lr"]])
    posture = np.eye(4)
    posture[1, 0] = math.tan(lean[0])
    posture[1, 2] = math.tan(lean[1])
    return _Animal(body, tuple(legs), neck, head, kps, posture)


def _bisect_exit(inside, lo, hi, iters=60):
    """First parameter where ``inside`` switches from False to True."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            hi = mid
        else:
            lo = mid
    return hi


def generate_quadruped(params: QuadrupedParams = QuadrupedParams(), rng=None):
    """Sample a random quadruped surface.

    Returns the dense cloud (with outward normals as orientation hints) and the
    six keypoints snapped to the nearest sampled point.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    animal = _draw_animal(params, rng)
    pts, nrm = [], []
    parts = animal.parts
    for k, part in enumerate(parts):
        count = max(int(round(params.density * part.area())), 1)
        p, n = part.sample(count, rng)
        others = np.zeros(len(p), dtype=bool)
        for o, other in enumerate(parts):
            if o != k:
                others |= other.inside(p)
        pts.append(p[~others])
        nrm.append(n[~others])
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)

    T = animal.posture
    pts = pts @ T[:3, :3].T
    nrm = nrm @ np.linalg.inv(T[:3, :3])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    kps = animal.keypoints @ T[:3, :3].T

    cloud = PointCloud(pts, None, nrm)
    idx = snap_keypoints(cloud.points, kps)
    return cloud, KeypointSet.from_cloud(cloud, idx, KEYPOINT_LABELS)


def snap_keypoints(points, targets):
    """Index of the nearest point to each target, kept distinct."""
    tree = cKDTree(points)
    k = min(len(targets) + 1, len(points))
    _, nbr = tree.query(targets, k=k)
    nbr = np.atleast_2d(nbr)
    used, out = set(), []
    for row in nbr:
        pick = next(int(i) for i in row if int(i) not in used)
        used.add(pick)
        out.append(pick)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Virtual rig


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-rig pose for a camera at ``eye`` looking at ``target``.

    Camera frame: +z along the optical axis, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return rigid_transform(np.column_stack([right, down, fwd]), eye)


@dataclass(frozen=True, eq=False)
class RigConfig:
    poses: np.ndarray  # C x 4 x 4 camera-to-rig
    depth_noise: float = 0.003
    max_range: float = 4.0
    fov_half_angles: tuple = (math.radians(22.0), math.radians(18.0))
    rig_id: str = "synthetic-17"

    def __post_init__(self):
        poses = np.array(self.poses, dtype=np.float64).reshape(-1, 4, 4)
        if len(poses) < 1:
            raise InvalidParams("a rig needs at least one camera")
        for T in poses:
            check_rigid(T, tol=1e-9)
        if self.depth_noise < 0 or self.max_range <= 0 or min(self.fov_half_angles) <= 0:
            raise InvalidParams("invalid rig sensor parameters")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "fov_half_angles", tuple(float(x) for x in self.fov_half_angles))

    @property
    def n_cameras(self):
        return len(self.poses)

    def to_dict(self):
        return {
            "poses": self.poses.tolist(),
            "depth_noise": self.depth_noise,
            "max_range": self.max_range,
            "fov_half_angles": list(self.fov_half_angles),
            "rig_id": self.rig_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_rig(**kw) -> RigConfig:
    """17 cameras: on each side two rows of four, plus one above."""
    poses = []
    for side in (1.0, -1.0):
        for height, aim in ((0.55, 0.55), (1.45, 1.05)):
            for y in (-1.05, -0.35, 0.35, 1.05):
                poses.append(look_at((1.45 * side, y, height), (0.0, y, aim)))
    poses.append(look_at((0.0, 0.0, 3.2), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)))
    return RigConfig(np.array(poses), **kw)


def estimate_normals(points, k=12, hint=None):
    """Unit normals from a plane fit to the k nearest neighbours.

    Signs follow ``hint`` when given, otherwise point away from the centroid.
    """
    k = min(k, len(points))
    _, nbr = cKDTree(points).query(points, k=k)
    nbr = nbr.reshape(len(points), -1)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    normals = np.linalg.eigh(cov)[1][:, :, 0]
    ref = hint if hint is not None else points - points.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1
    return normals


def virtual_capture(shape: PointCloud, rig: RigConfig, rng) -> MultiViewCapture:
    """Per-camera visible subsets of ``shape`` with along-ray depth noise.

    A point is visible when it lies in the field of view and range and its
    fitted normal faces the camera. There is no occlusion test.
    """
    if shape.n == 0:
        raise InvalidParams("shape is empty")
    pts = shape.points
    normals = estimate_normals(pts, 12, shape.normals)
    full_fov = min(rig.fov_half_angles) >= math.pi
    views, sources = [], []
    for T in rig.poses:
        R, eye = T[:3, :3], T[:3, 3]
        ray = pts - eye
        dist = np.linalg.norm(ray, axis=1)
        q = ray @ R
        ok = dist <= rig.max_range
        if not full_fov:
            ok &= q[:, 2] > 0
            ok &= np.abs(np.arctan2(q[:, 0], q[:, 2])) <= rig.fov_half_angles[0]
            ok &= np.abs(np.arctan2(q[:, 1], q[:, 2])) <= rig.fov_half_angles[1]
        ok &= np.einsum("ij,ij->i", normals, -ray) > 0
        rows = np.flatnonzero(ok)
        unit = ray[rows] / dist[rows, None]
        noisy = pts[rows] + rng.normal(0.0, rig.depth_noise, size=len(rows))[:, None] * unit if rig.depth_noise > 0 else pts[rows]
        views.append((noisy - eye) @ R)
        sources.append(rows)
    return MultiViewCapture(tuple(views), rig.poses, tuple(sources))


# ---------------------------------------------------------------------------
# Dataset synthesis


@dataclass(frozen=True)
class SynthConfig:
    quadruped: QuadrupedParams = field(default_factory=QuadrupedParams)
    calib_error_rot: float = math.radians(1.0)
    calib_error_trans: float = 0.005
    ror: RorParams = field(default_factory=RorParams)
    sor: SorParams = field(default_factory=SorParams)
    k: int = 16
    epsilon: float = 10.0


def calibration_error(n_cameras, rot_sigma, trans_sigma, rng):
    """Per-camera rigid error to post-compose with true extrinsics."""
    from scipy.spatial.transform import Rotation

    out = np.tile(np.eye(4), (n_cameras, 1, 1))
    axes = rng.normal(size=(n_cameras, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.normal(0.0, rot_sigma, size=n_cameras)
    out[:, :3, :3] = Rotation.from_rotvec(axes * angles[:, None]).as_matrix()
    out[:, :3, 3] = rng.normal(0.0, trans_sigma, size=(n_cameras, 3))
    return out


SPLITS = {"train": 0, "test": 1}


def synthesize_sample(seed, split, index, rig: RigConfig, calib_error, cfg: SynthConfig = SynthConfig()):
    """One annotated sample: shape, capture, merge with miscalibrated extrinsics, filter, snap, precompute."""
    ss = np.random.SeedSequence([int(seed), SPLITS[split], int(index)])
    shape_rng, capture_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    shape, kps = generate_quadruped(cfg.quadruped, shape_rng)
    capture = virtual_capture(shape, rig, capture_rng)
    calibrated = capture.with_extrinsics(np.einsum("cij,cjk->cik", calib_error, capture.extrinsics))
    merged = merge_views(calibrated)
    # Store-once precision: everything downstream sees float32-representable coordinates.
    merged = PointCloud(merged.points.astype(np.float32).astype(np.float64), merged.camera_id)
    merged = filter_outliers(merged, cfg.ror, cfg.sor)
    idx = snap_keypoints(merged.points, kps.positions)
    meta = {
        "units": "m",
        "rig_id": f"{rig.rig_id}-{split}",
        "seed": int(seed),
        "split": split,
        "index": int(index),
        "n_cameras": rig.n_cameras,
        "epsilon": cfg.epsilon,
        "keypoint_order": list(KEYPOINT_LABELS),
    }
    sample = AnnotatedSample(merged, KeypointSet.from_cloud(merged, idx, kps.labels), None, meta)
    sample = geodesic_field(sample, DIJKSTRA, k=cfg.k)
    geo = GeodesicField(sample.geodesic.values.astype(np.float32), DIJKSTRA)
    return sample.replace(geodesic=geo, meta={**meta, "geodesic_method": DIJKSTRA, "k": cfg.k})


def make_dataset(out_dir, n_train, n_test, params: QuadrupedParams | None = None, rig: RigConfig | None = None, seed=0, cfg=None):
    """Write ``out_dir/train/sample_XXXX`` and ``out_dir/test/sample_XXXX``.

    Each split is captured by its own assembly of the rig: an independent
    calibration error is drawn per split and shared by its samples.
    """
    from .io import save_sample

    cfg = cfg or SynthConfig()
    if params is not None:
        cfg = dataclasses.replace(cfg, quadruped=params)
    rig = rig or default_rig()
    out_dir = Path(out_dir)
    written = {}
    for split, count in (("train", n_train), ("test", n_test)):
        err_rng = np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS[split], 2**31 - 1]))
        err = calibration_error(rig.n_cameras, cfg.calib_error_rot, cfg.calib_error_trans, err_rng)
        paths = []
        for i in range(count):
            sample = synthesize_sample(seed, split, i, rig, err, cfg)
            path = out_dir / split / f"sample_{i:04d}"
            save_sample(sample, path)
            paths.append(path)
        written[split] = paths
        log.info("wrote %d %s samples", count, split)
    manifest = {
        "seed": int(seed),
        "n_train": int(n_train),
        "n_test": int(n_test),
        "quadruped": cfg.quadruped.to_dict(),
        "rig": rig.to_dict(),
        "calib_error_rot": cfg.calib_error_rot,
        "calib_error_trans": cfg.calib_error_trans,
        "ror": dataclasses.asdict(cfg.ror),
        "sor": dataclasses.asdict(cfg.sor),
        "k": cfg.k,
        "epsilon": cfg.epsilon,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written
