"""Small builders shared by the test modules."""
import numpy as np

from manikey.cloud import AnnotatedSample, KeypointSet, PointCloud
from manikey.geodesy import GeodesicField, build_knn_graph, dijkstra_field


def sphere_points(n, seed=0):
    """Deterministic near-uniform points on the unit sphere (Fibonacci lattice, jittered)."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    p = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    jitter = np.random.default_rng(seed).normal(0, 0.01, p.shape)
    p = p + jitter
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def toy_sample(points, keypoints, cameras=None, k=None):
    """Annotated sample with a Dijkstra field on a kNN graph (k defaults to min(8, n-1))."""
    cloud = PointCloud(points, cameras)
    kps = KeypointSet.from_cloud(cloud, keypoints)
    k = k or min(8, cloud.n - 1)
    g = dijkstra_field(build_knn_graph(cloud, k), kps.indices)
    return AnnotatedSample(cloud, kps, GeodesicField(g.values), {"n_cameras": int(cloud.camera_id.max()) + 1 if cameras is not None else 1})
