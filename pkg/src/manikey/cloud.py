"""Point clouds, multi-camera captures, keypoints and outlier filtering.

Coordinates are meters. The rig frame is right-handed with x lateral
(+x is the animal's right), y longitudinal (+y is forward) and z up, so a
mirror about the YZ plane swaps left and right limbs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import AllPointsFiltered, EmptyCapture, InvalidParams, ShapeMismatch

UNKNOWN_CAMERA = 255

KEYPOINT_LABELS = (
    "right_rear_leg",
    "right_front_leg",
    "hip",
    "neck",
    "left_front_leg",
    "left_rear_leg",
)
FLIP_PERMUTATION = (5, 4, 2, 3, 1, 0)
ORDER_VERSION = 1


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """n x 3 points with per-point camera provenance.

    ``normals`` is an optional outward orientation hint (used by the
    synthetic rig only); it is not persisted.
    """

    points: np.ndarray
    camera_id: np.ndarray = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _frozen(self.points, np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"points must be n x 3, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidParams("point coordinates must be finite")
        if self.camera_id is None:
            cam = np.full(len(pts), UNKNOWN_CAMERA, dtype=np.int64)
        else:
            cam = np.asarray(self.camera_id, dtype=np.int64).reshape(-1)
        if len(cam) != len(pts):
            raise ShapeMismatch(f"camera_id has {len(cam)} entries for {len(pts)} points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "camera_id", _frozen(cam, np.int64))
        if self.normals is not None:
            nrm = _frozen(self.normals, np.float64)
            if nrm.shape != pts.shape:
                raise ShapeMismatch(f"normals shape {nrm.shape} != points shape {pts.shape}")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def n(self):
        return len(self.points)

    def subset(self, rows):
        rows = np.asarray(rows)
        normals = None if self.normals is None else self.normals[rows]
        return PointCloud(self.points[rows], self.camera_id[rows], normals)

    def with_points(self, points):
        return PointCloud(points, self.camera_id)

    def equals(self, other):
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.camera_id, other.camera_id)
        )


def rigid_transform(rotation=None, translation=None):
    """4x4 homogeneous matrix from a rotation and a translation."""
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def transform_points(T, points):
    """Apply a 4x4 homogeneous transform to n x 3 points (column-vector convention)."""
    points = np.asarray(points, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


def check_rigid(T, tol=1e-9):
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise InvalidParams(f"extrinsic must be 4x4, got {T.shape}")
    R = T[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidParams("extrinsic rotation is not in SO(3)")
    if not np.allclose(T[3], [0, 0, 0, 1], atol=0, rtol=0):
        raise InvalidParams("extrinsic bottom row must be [0, 0, 0, 1]")


@dataclass(frozen=True, eq=False)
class MultiViewCapture:
    """Per-camera clouds in camera-local frames plus camera-to-rig extrinsics.

    ``source_indices`` optionally records, per view, which input point each
    captured point came from (filled by the virtual rig).
    """

    views: tuple
    extrinsics: np.ndarray
    source_indices: tuple | None = None

    def __post_init__(self):
        views = tuple(_frozen(np.asarray(v, dtype=np.float64).reshape(-1, 3), np.float64) for v in self.views)
        ext = _frozen(self.extrinsics, np.float64)
        if len(views) < 1:
            raise InvalidParams("a capture needs at least one camera")
        if ext.shape != (len(views), 4, 4):
            raise ShapeMismatch(f"expected {len(views)} extrinsics of shape 4x4, got {ext.shape}")
        for T in ext:
            check_rigid(T)
        for v in views:
            if not np.all(np.isfinite(v)):
                raise InvalidParams("view coordinates must be finite")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "extrinsics", ext)
        if self.source_indices is not None:
            src = tuple(_frozen(s, np.int64) for s in self.source_indices)
            if [len(s) for s in src] != [len(v) for v in views]:
                raise ShapeMismatch("source_indices must match view sizes")
            object.__setattr__(self, "source_indices", src)

    @property
    def n_cameras(self):
        return len(self.views)

    def with_extrinsics(self, extrinsics):
        return MultiViewCapture(self.views, extrinsics, self.source_indices)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    indices: np.ndarray
    positions: np.ndarray
    labels: tuple = KEYPOINT_LABELS

    def __post_init__(self):
        idx = _frozen(np.asarray(self.indices).reshape(-1), np.int64)
        pos = _frozen(self.positions, np.float64).reshape(-1, 3)
        labels = tuple(str(s) for s in self.labels)
        if len(idx) != len(pos) or len(idx) != len(labels):
            raise ShapeMismatch(
                f"keypoint arity mismatch: {len(idx)} indices, {len(pos)} positions, {len(labels)} labels"
            )
        if len(np.unique(idx)) != len(idx):
            raise InvalidParams("keypoint indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_cloud(cls, cloud, indices, labels=None):
        indices = np.asarray(indices, dtype=np.int64)
        if labels is None:
            labels = KEYPOINT_LABELS[: len(indices)] if len(indices) <= len(KEYPOINT_LABELS) else tuple(
                f"kp{j}" for j in range(len(indices))
            )
        if np.any(indices < 0) or np.any(indices >= cloud.n):
            raise InvalidParams("keypoint index out of range")
        return cls(indices, cloud.points[indices], labels)

    @property
    def m(self):
        return len(self.indices)

    def check_against(self, cloud):
        if np.any(self.indices >= cloud.n):
            raise ShapeMismatch("keypoint index out of range for cloud")
        if not np.array_equal(cloud.points[self.indices], self.positions):
            raise ShapeMismatch("keypoint positions do not match cloud points")


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    """The dataset tuple: merged cloud, keypoints and (optionally) geodesic field."""

    cloud: PointCloud
    keypoints: KeypointSet
    geodesic: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keypoints.check_against(self.cloud)
        if self.geodesic is not None:
            shape = np.shape(self.geodesic.values)
            if shape != (self.cloud.n, self.keypoints.m):
                raise ShapeMismatch(
                    f"geodesic field is {shape}, expected {(self.cloud.n, self.keypoints.m)}"
                )

    def replace(self, **changes):
        kw = dict(cloud=self.cloud, keypoints=self.keypoints, geodesic=self.geodesic, meta=self.meta)
        kw.update(changes)
        return AnnotatedSample(**kw)


def merge_views(capture: MultiViewCapture) -> PointCloud:
    """Concatenate all views expressed in the rig frame; empty views are skipped."""
    chunks, cams = [], []
    for c, (view, T) in enumerate(zip(capture.views, capture.extrinsics)):
        if len(view) == 0:
            continue
        chunks.append(transform_points(T, view))
        cams.append(np.full(len(view), c, dtype=np.int64))
    if not chunks:
        raise EmptyCapture("every view of the capture is empty")
    return PointCloud(np.concatenate(chunks), np.concatenate(cams))


@dataclass(frozen=True)
class RorParams:
    radius: float = 0.1
    min_neighbors: int = 4


@dataclass(frozen=True)
class SorParams:
    k: int = 16
    std_ratio: float = 3.0


def radius_outlier_mask(points, radius, min_neighbors):
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, r=radius, return_length=True) - 1
    return counts >= min_neighbors


def statistical_outlier_mask(points, k, std_ratio):
    n = len(points)
    k = min(k, n - 1)
    if k < 1:
        return np.ones(n, dtype=bool)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    return mean_d <= mean_d.mean() + std_ratio * mean_d.std()


def outlier_survivors(points, ror: RorParams = RorParams(), sor: SorParams = SorParams()) -> np.ndarray:
    """Row indices kept by radius outlier removal followed by statistical outlier removal."""
    if ror.radius <= 0 or ror.min_neighbors < 1 or sor.k < 1 or sor.std_ratio <= 0:
        raise InvalidParams(f"invalid filter parameters {ror}, {sor}")
    keep = np.flatnonzero(radius_outlier_mask(points, ror.radius, ror.min_neighbors))
    if len(keep) == 0:
        raise AllPointsFiltered("radius outlier removal discarded every point")
    keep = keep[statistical_outlier_mask(points[keep], sor.k, sor.std_ratio)]
    if len(keep) == 0:
        raise AllPointsFiltered("statistical outlier removal discarded every point")
    return keep


def filter_outliers(cloud: PointCloud, ror: RorParams = RorParams(), sor: SorParams = SorParams()) -> PointCloud:
    return cloud.subset(outlier_survivors(cloud.points, ror, sor))


def concatenate(clouds: Sequence[PointCloud]) -> PointCloud:
    return PointCloud(
        np.concatenate([c.points for c in clouds]),
        np.concatenate([c.camera_id for c in clouds]),
    )
