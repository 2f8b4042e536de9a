import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manikey.cloud import (
    UNKNOWN_CAMERA,
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
from manikey.errors import AllPointsFiltered, EmptyCapture, InvalidParams, ShapeMismatch
from manikey.geodesy import GeodesicField


def rot_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


class TestPointCloud:
    def test_default_provenance_is_unknown(self):
        c = PointCloud(np.zeros((3, 3)))
        assert c.camera_id.tolist() == [UNKNOWN_CAMERA] * 3

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            PointCloud(np.zeros((3, 2)))
        with pytest.raises(ShapeMismatch):
            PointCloud(np.zeros((3, 3)), [0, 1])

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidParams):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_arrays_are_read_only(self):
        c = PointCloud(np.ones((2, 3)), [0, 1])
        with pytest.raises(ValueError):
            c.points[0, 0] = 5.0


class TestKeypointSet:
    def test_positions_must_match_cloud(self):
        cloud = PointCloud(np.eye(3))
        kp = KeypointSet([0, 2], [[1, 0, 0], [0, 0, 1.0]], ("a", "b"))
        kp.check_against(cloud)
        with pytest.raises(ShapeMismatch):
            KeypointSet([0, 1], [[1, 0, 0], [0, 0, 1.0]], ("a", "b")).check_against(cloud)

    def test_indices_distinct(self):
        with pytest.raises(InvalidParams):
            KeypointSet([1, 1], np.zeros((2, 3)), ("a", "b"))

    def test_geodesic_shape_checked(self):
        cloud = PointCloud(np.eye(3))
        kp = KeypointSet.from_cloud(cloud, [0])
        with pytest.raises(ShapeMismatch):
            AnnotatedSample(cloud, kp, GeodesicField(np.zeros((2, 1))))


class TestRigid:
    def test_accepts_rotation(self):
        check_rigid(rigid_transform(rot_z(33), [1, 2, 3]))

    def test_rejects_reflection(self):
        with pytest.raises(InvalidParams):
            check_rigid(rigid_transform(np.diag([-1.0, 1, 1])))

    def test_rejects_scaled_rotation(self):
        with pytest.raises(InvalidParams):
            check_rigid(rigid_transform(1.001 * np.eye(3)))


class TestMergeViews:
    def test_union_size_and_provenance(self, rng):
        caps = MultiViewCapture((rng.normal(size=(100, 3)), rng.normal(size=(150, 3))), np.stack([np.eye(4)] * 2))
        merged = merge_views(caps)
        assert merged.n == 250
        assert np.all(merged.camera_id[:100] == 0) and np.all(merged.camera_id[100:] == 1)

    def test_single_identity_view_exact(self, rng):
        v = rng.normal(size=(20, 3))
        merged = merge_views(MultiViewCapture((v,), np.eye(4)[None]))
        assert np.array_equal(merged.points, v)

    def test_rotation_and_translation(self):
        T = rigid_transform(rot_z(90), [0, 0, 1])
        merged = merge_views(MultiViewCapture((np.array([[1.0, 0, 0]]),), T[None]))
        np.testing.assert_allclose(merged.points, [[0.0, 1.0, 1.0]], atol=1e-15)

    def test_empty_views_skipped(self):
        merged = merge_views(MultiViewCapture((np.zeros((0, 3)), np.ones((2, 3))), np.stack([np.eye(4)] * 2)))
        assert merged.camera_id.tolist() == [1, 1]

    def test_all_empty_raises(self):
        with pytest.raises(EmptyCapture):
            merge_views(MultiViewCapture((np.zeros((0, 3)),), np.eye(4)[None]))

    def test_invalid_extrinsic_rejected(self):
        with pytest.raises(InvalidParams):
            MultiViewCapture((np.ones((1, 3)),), (2 * np.eye(4))[None])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=1, max_size=6), st.integers(0, 2**31))
    def test_count_is_sum_of_views(self, sizes, seed):
        rng = np.random.default_rng(seed)
        views = tuple(rng.normal(size=(s, 3)) for s in sizes)
        ext = np.stack([rigid_transform(rot_z(rng.uniform(0, 360)), rng.normal(size=3)) for _ in sizes])
        cap = MultiViewCapture(views, ext)
        if sum(sizes) == 0:
            with pytest.raises(EmptyCapture):
                merge_views(cap)
        else:
            assert merge_views(cap).n == sum(sizes)


def brute_sor_keep(points, k, std_ratio):
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    mean_knn = np.array([np.sort(np.delete(d[i], i))[:k].mean() for i in range(n)])
    return mean_knn <= mean_knn.mean() + std_ratio * mean_knn.std()


class TestFilterOutliers:
    def cluster(self, rng):
        return PointCloud(np.vstack([rng.uniform(0, 0.5, size=(500, 3)), [[100.0, 100.0, 100.0]]]), np.r_[np.zeros(500), 1])

    def test_isolated_point_removed(self, rng):
        # SOR is made permissive so that only the radius filter is exercised.
        out = filter_outliers(self.cluster(rng), RorParams(0.2, 3), SorParams(16, 10.0))
        assert out.n == 500
        assert not np.any(out.camera_id == 1)

    def test_no_outliers_is_noop(self, rng):
        cloud = PointCloud(rng.uniform(0, 1, size=(200, 3)), rng.integers(0, 3, 200))
        out = filter_outliers(cloud, RorParams(10.0, 1), SorParams(8, 100.0))
        assert out.equals(cloud)

    def test_sor_against_brute_force(self):
        pts = np.vstack([np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)]), [[5.0, 50.0, 0.0]]])
        expected = brute_sor_keep(pts, 3, 1.0)
        assert not expected[-1] and expected[:10].all()
        out = filter_outliers(PointCloud(pts), RorParams(1e6, 1), SorParams(3, 1.0))
        np.testing.assert_array_equal(out.points, pts[expected])

    def test_ror_idempotent_on_cluster(self, rng):
        ror, sor = RorParams(0.2, 3), SorParams(16, 3.0)
        once = filter_outliers(self.cluster(rng), ror, sor)
        assert filter_outliers(once, ror, SorParams(16, 100.0)).equals(once)

    def test_everything_filtered(self):
        with pytest.raises(AllPointsFiltered):
            filter_outliers(PointCloud([[0.0, 0, 0], [10.0, 0, 0]]), RorParams(0.5, 1), SorParams(1, 1.0))

    def test_invalid_parameters(self):
        with pytest.raises(InvalidParams):
            filter_outliers(PointCloud(np.zeros((2, 3))), RorParams(0.0, 1), SorParams())

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(5, 60), st.just(3)), elements=st.floats(-5, 5)))
    def test_survivors_verbatim(self, pts):
        cams = np.arange(len(pts)) % 4
        cloud = PointCloud(pts, cams)
        try:
            out = filter_outliers(cloud, RorParams(1.0, 1), SorParams(3, 2.0))
        except AllPointsFiltered:
            return
        rows = {(tuple(p), c) for p, c in zip(pts.tolist(), cams.tolist())}
        for p, c in zip(out.points.tolist(), out.camera_id.tolist()):
            assert (tuple(p), c) in rows
