"""Training-time augmentation of annotated samples and their regression targets.

Geometric transforms use the column-vector convention ``p' = T p`` on
homogeneous coordinates. Calibration noise for camera ``c`` is a rigid
transform post-composed with that camera's extrinsic; since
``N_c (E_c q) = N_c p`` this is the same as moving the merged points that
came from camera ``c``, which is how it is applied to merged clouds.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import (
    FLIP_PERMUTATION,
    UNKNOWN_CAMERA,
    AnnotatedSample,
    KeypointSet,
    MultiViewCapture,
    PointCloud,
    transform_points,
)
from .errors import ConfigMismatch, InvalidParams, InvalidPermutation, ShapeMismatch
from .field import DEFAULT_EPSILON, RbfField, rbf_values
from .geodesy import GeodesicField

OCCLUSION_DISTANCE = 0.05
AUGMENTATIONS = ("calibration", "dropout", "scale", "flip", "shear")


@dataclass(frozen=True)
class AugmentationConfig:
    calib_rot_sigma: float = math.radians(1.0)
    calib_trans_sigma: float = 0.005
    camera_keep_prob: float = 0.95
    scale_sigma: float = 0.1
    flip_prob: float = 0.5
    shear_sigma: float = math.pi / 20
    epsilon: float = DEFAULT_EPSILON
    flip_permutation: tuple = FLIP_PERMUTATION

    def __post_init__(self):
        object.__setattr__(self, "flip_permutation", tuple(int(p) for p in self.flip_permutation))
        for name in ("calib_rot_sigma", "calib_trans_sigma", "scale_sigma", "shear_sigma"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be >= 0")
        for name in ("camera_keep_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidParams(f"{name} must lie in [0, 1]")
        if not self.epsilon > 0:
            raise InvalidParams("epsilon must be positive")
        perm = check_permutation(self.flip_permutation, len(self.flip_permutation))
        if not np.array_equal(perm[perm], np.arange(len(perm))):
            raise InvalidPermutation("flip_permutation must be an involution")

    @classmethod
    def identity(cls, **kw):
        """A configuration under which every augmentation is a no-op."""
        base = dict(
            calib_rot_sigma=0.0,
            calib_trans_sigma=0.0,
            camera_keep_prob=1.0,
            scale_sigma=0.0,
            flip_prob=0.0,
            shear_sigma=0.0,
        )
        base.update(kw)
        return cls(**base)

    def without(self, *names):
        """Copy with the named augmentations (see ``AUGMENTATIONS``) switched off."""
        off = {
            "calibration": dict(calib_rot_sigma=0.0, calib_trans_sigma=0.0),
            "dropout": dict(camera_keep_prob=1.0),
            "scale": dict(scale_sigma=0.0),
            "flip": dict(flip_prob=0.0),
            "shear": dict(shear_sigma=0.0),
        }
        changes = {}
        for name in names:
            if name not in off:
                raise InvalidParams(f"unknown augmentation {name!r}")
            changes.update(off[name])
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["flip_permutation"] = list(self.flip_permutation)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AugmentationDraw:
    t_scale: np.ndarray
    t_flip: np.ndarray
    t_sideway: np.ndarray
    t_forward: np.ndarray
    calib_noise: np.ndarray
    camera_mask: np.ndarray
    flipped: bool

    @property
    def n_cameras(self):
        return len(self.camera_mask)

    def composed(self):
        """``T_scale @ T_flip @ T_sideway @ T_forward``."""
        return self.t_scale @ self.t_flip @ self.t_sideway @ self.t_forward


def scale_matrix(sx, sy, sz):
    return np.diag([sx, sy, sz, 1.0])


def flip_matrix(f):
    return np.diag([float(f), 1.0, 1.0, 1.0])


def sideway_shear(h):
    """y' = y + h x."""
    T = np.eye(4)
    T[1, 0] = h
    return T


def forward_shear(h):
    """y' = y + h z."""
    T = np.eye(4)
    T[1, 2] = h
    return T


def sample_draw(config: AugmentationConfig, n_cameras: int, rng, theta_s=None, theta_f=None) -> AugmentationDraw:
    """Draw one realisation of every augmentation.

    ``theta_s`` / ``theta_f`` override the sampled shear angles (the random
    stream is consumed identically either way).
    """
    if n_cameras < 1:
        raise InvalidParams("need at least one camera")
    s = rng.normal(1.0, config.scale_sigma, size=3)
    flipped = bool(rng.uniform() > 1.0 - config.flip_prob)
    th = rng.normal(0.0, config.shear_sigma, size=2)
    if theta_s is not None:
        th[0] = theta_s
    if theta_f is not None:
        th[1] = theta_f

    axes = rng.normal(size=(n_cameras, 3))
    angles = rng.normal(0.0, config.calib_rot_sigma, size=n_cameras)
    trans = rng.normal(0.0, config.calib_trans_sigma, size=(n_cameras, 3))
    norms = np.linalg.norm(axes, axis=1, keepdims=True)
    rotvec = axes / np.where(norms > 0, norms, 1.0) * angles[:, None]
    noise = np.tile(np.eye(4), (n_cameras, 1, 1))
    moved = angles != 0
    if np.any(moved):
        noise[moved, :3, :3] = Rotation.from_rotvec(rotvec[moved]).as_matrix()
    noise[:, :3, 3] = trans

    # Keep camera c when u <= keep_prob, u ~ U[0, 1].
    mask = rng.uniform(size=n_cameras) <= config.camera_keep_prob
    forced = int(rng.integers(n_cameras))
    if not mask.any():
        mask[forced] = True

    return AugmentationDraw(
        t_scale=scale_matrix(*s),
        t_flip=flip_matrix(-1.0 if flipped else 1.0),
        t_sideway=sideway_shear(math.tan(th[0])),
        t_forward=forward_shear(math.tan(th[1])),
        calib_noise=noise,
        camera_mask=mask,
        flipped=flipped,
    )


def _apply(T, points):
    if np.array_equal(T, np.eye(4)):
        return np.array(points, dtype=np.float64)
    return transform_points(T, points)


def apply_geometric(cloud: PointCloud, keypoints: KeypointSet, draw: AugmentationDraw):
    """Transform points and keypoints by the composed scale/flip/shear matrix."""
    keypoints.check_against(cloud)
    moved = cloud.with_points(_apply(draw.composed(), cloud.points))
    return moved, KeypointSet(keypoints.indices, moved.points[keypoints.indices], keypoints.labels)


def apply_calibration_noise(capture: MultiViewCapture, draw: AugmentationDraw) -> MultiViewCapture:
    if capture.n_cameras != draw.n_cameras:
        raise ConfigMismatch(f"capture has {capture.n_cameras} cameras, draw has {draw.n_cameras}")
    return capture.with_extrinsics(np.einsum("cij,cjk->cik", draw.calib_noise, capture.extrinsics))


def jitter_by_camera(cloud: PointCloud, draw: AugmentationDraw) -> PointCloud:
    """Apply each camera's calibration noise to the merged points it produced."""
    cams = cloud.camera_id
    known = cams != UNKNOWN_CAMERA
    if np.any(cams[known] >= draw.n_cameras):
        raise ConfigMismatch(f"cloud references camera {cams[known].max()} but the draw has {draw.n_cameras}")
    out = np.array(cloud.points, dtype=np.float64)
    for c in np.unique(cams[known]):
        rows = cams == c
        out[rows] = _apply(draw.calib_noise[c], out[rows])
    return cloud.with_points(out)


def camera_keep_mask(cloud: PointCloud, draw: AugmentationDraw) -> np.ndarray:
    """Rows of ``cloud`` whose camera survives the draw; unknown provenance is always kept."""
    cams = cloud.camera_id
    known = cams != UNKNOWN_CAMERA
    if np.any(cams[known] >= draw.n_cameras):
        raise ConfigMismatch(f"cloud references camera {cams[known].max()} but the draw has {draw.n_cameras}")
    return ~known | draw.camera_mask[np.where(known, cams, 0)]


def apply_dropout(sample: AnnotatedSample, draw: AugmentationDraw) -> AnnotatedSample:
    """Remove every point from a masked-out camera.

    Geodesic rows follow the points. A keypoint whose point was dropped is
    moved to the surviving point with the smallest precomputed distance in
    its column; ``meta["occluded"]`` flags keypoints whose new point lies
    more than 5 cm away.
    """
    keep = camera_keep_mask(sample.cloud, draw)
    cams = sample.cloud.camera_id
    m = sample.keypoints.m
    if keep.all():
        return sample.replace(meta={**sample.meta, "occluded": [False] * m})
    if sample.geodesic is None:
        raise InvalidParams("dropout needs the precomputed geodesic field")
    rows = np.flatnonzero(keep)
    new_row = np.full(len(cams), -1)
    new_row[rows] = np.arange(len(rows))
    g = sample.geodesic.values[rows]

    old = sample.keypoints.indices
    idx = new_row[old]
    occluded = [False] * m
    used = set(int(i) for i in idx if i >= 0)
    for j in np.flatnonzero(idx < 0):
        order = np.argsort(g[:, j], kind="stable")
        pick = next(int(r) for r in order if int(r) not in used)
        used.add(pick)
        idx[j] = pick
        occluded[j] = bool(g[pick, j] > OCCLUSION_DISTANCE)

    cloud = sample.cloud.subset(rows)
    kps = KeypointSet(idx, cloud.points[idx], sample.keypoints.labels)
    geo = GeodesicField(g, sample.geodesic.method)
    return AnnotatedSample(cloud, kps, geo, {**sample.meta, "occluded": occluded})


def _euclidean(points, keypoints):
    diff = points[:, None, :] - keypoints[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def updated_geodesic(geodesic, P, N, P_star, N_star):
    """Correct precomputed distances by the change in straight-line distance, clamped at 0."""
    g = np.asarray(getattr(geodesic, "values", geodesic), dtype=np.float64)
    P = np.asarray(getattr(P, "points", P), dtype=np.float64)
    P_star = np.asarray(getattr(P_star, "points", P_star), dtype=np.float64)
    N = np.asarray(getattr(N, "positions", N), dtype=np.float64)
    N_star = np.asarray(getattr(N_star, "positions", N_star), dtype=np.float64)
    if P.shape != P_star.shape:
        raise ShapeMismatch(f"clouds are not in correspondence: {P.shape} vs {P_star.shape}")
    if N.shape != N_star.shape:
        raise ShapeMismatch(f"keypoints are not in correspondence: {N.shape} vs {N_star.shape}")
    if g.shape != (len(P), len(N)):
        raise ShapeMismatch(f"geodesic field is {g.shape}, expected {(len(P), len(N))}")
    # Parenthesised so that an identity transform leaves g bit-identical.
    return np.maximum(g + (_euclidean(P_star, N_star) - _euclidean(P, N)), 0.0)


def update_targets(geodesic, P, N, P_star, N_star, epsilon: float = DEFAULT_EPSILON) -> RbfField:
    return RbfField(rbf_values(updated_geodesic(geodesic, P, N, P_star, N_star), epsilon), float(epsilon))


def check_permutation(permutation, m):
    perm = np.asarray(permutation)
    if perm.ndim != 1 or len(perm) != m or not np.issubdtype(perm.dtype, np.integer):
        raise InvalidPermutation(f"permutation {list(np.ravel(perm))} is not valid for {m} keypoints")
    if not np.array_equal(np.sort(perm), np.arange(m)):
        raise InvalidPermutation(f"permutation {perm.tolist()} is not a permutation of 0..{m - 1}")
    return perm.astype(np.int64)


def flip_reindex(field, permutation=FLIP_PERMUTATION):
    """Reorder keypoint columns; returns the same field type (or array) as given."""
    values = np.asarray(getattr(field, "values", field))
    perm = check_permutation(permutation, values.shape[1])
    out = values[:, perm]
    if isinstance(field, RbfField):
        return RbfField(out, field.epsilon)
    if isinstance(field, GeodesicField):
        return GeodesicField(out, field.method)
    return out


def sample_camera_count(sample: AnnotatedSample, capture: MultiViewCapture | None = None) -> int:
    if capture is not None:
        return capture.n_cameras
    if "n_cameras" in sample.meta:
        return int(sample.meta["n_cameras"])
    cams = sample.cloud.camera_id
    known = cams[cams != UNKNOWN_CAMERA]
    return int(known.max()) + 1 if len(known) else 1


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    cloud: PointCloud
    keypoints: KeypointSet
    targets: RbfField
    draw: AugmentationDraw
    occluded: list


def _surviving(sample, draw):
    """New row index of each annotated keypoint after dropout, -1 when dropped."""
    keep = camera_keep_mask(sample.cloud, draw)
    new_row = np.cumsum(keep) - 1
    return np.where(keep[sample.keypoints.indices], new_row[sample.keypoints.indices], -1)


def augment(sample: AnnotatedSample, config: AugmentationConfig, rng, capture: MultiViewCapture | None = None):
    """Full pipeline, returning the intermediate keypoints and draw as well."""
    if sample.geodesic is None:
        raise InvalidParams("augmentation needs the precomputed geodesic field")
    n_cameras = sample_camera_count(sample, capture)
    draw = sample_draw(config, n_cameras, rng)
    kept = apply_dropout(sample, draw)
    if capture is not None:
        # Only validates the camera count: jittering the merged points of
        # camera c is equivalent to post-composing its extrinsic.
        apply_calibration_noise(capture, draw)
    jittered = jitter_by_camera(kept.cloud, draw)
    moved, kps = apply_geometric(
        jittered, KeypointSet(kept.keypoints.indices, jittered.points[kept.keypoints.indices], kept.keypoints.labels), draw
    )
    # Distances in the geodesic field refer to the annotated keypoints, so the
    # straight-line correction uses them too, even when their camera was dropped.
    N, N_star = kept.keypoints.positions.copy(), kps.positions.copy()
    lost = np.flatnonzero(_surviving(sample, draw) < 0)
    if len(lost):
        orig = PointCloud(sample.keypoints.positions[lost], sample.cloud.camera_id[sample.keypoints.indices[lost]])
        N[lost] = orig.points
        N_star[lost] = _apply(draw.composed(), jitter_by_camera(orig, draw).points)
    targets = update_targets(kept.geodesic, kept.cloud, N, moved, N_star, config.epsilon)
    if draw.flipped:
        targets = flip_reindex(targets, config.flip_permutation)
        perm = np.asarray(config.flip_permutation)
        kps = KeypointSet(kps.indices[perm], kps.positions[perm], kps.labels)
    return AugmentedSample(moved, kps, targets, draw, kept.meta["occluded"])


def augment_sample(sample: AnnotatedSample, capture: MultiViewCapture | None, config: AugmentationConfig, rng):
    """Dropout, calibration jitter, scale/flip/shear, label update and flip re-indexing.

    Returns the network input cloud and its RBF targets.
    """
    out = augment(sample, config, rng, capture)
    return out.cloud, out.targets
