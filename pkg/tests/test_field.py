import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manikey.errors import InvalidParams, NonFiniteInput, ShapeMismatch
from manikey.field import DEFAULT_EPSILON, RbfField, extract_keypoints, mse_loss, rbf_map
from manikey.geodesy import GeodesicField, build_knn_graph, dijkstra_field


class TestRbfMap:
    def test_zero_distance_is_one(self):
        assert rbf_map(np.zeros((1, 1))).values[0, 0] == 1.0

    def test_value_at_ten_centimetres(self):
        # exp(-0.1) evaluated independently
        assert rbf_map(np.array([[0.1]]), 10.0).values[0, 0] == pytest.approx(0.9048374180359595, abs=1e-12)
        assert math.exp(-0.1) == pytest.approx(0.904837, abs=1e-6)

    def test_far_distance_underflows(self):
        v = rbf_map(np.array([[10.0]]), 10.0).values
        assert v.astype(np.float32)[0, 0] == 0.0
        assert v[0, 0] == 0.0  # exp(-1000) is below the smallest double subnormal

    def test_default_epsilon(self):
        assert DEFAULT_EPSILON == 10.0
        assert rbf_map(GeodesicField(np.array([[0.5]]))).epsilon == 10.0

    def test_accepts_geodesic_field(self):
        f = rbf_map(GeodesicField(np.array([[0.0, 0.2]])), 10.0)
        assert isinstance(f, RbfField)
        np.testing.assert_allclose(f.values, [[1.0, np.exp(-0.4)]])

    def test_errors(self):
        with pytest.raises(NonFiniteInput):
            rbf_map(np.array([[np.inf]]))
        with pytest.raises(InvalidParams):
            rbf_map(np.array([[1.0]]), 0.0)
        with pytest.raises(InvalidParams):
            rbf_map(np.array([[-0.1]]))

    @given(st.floats(0, 3), st.floats(0, 3), st.floats(0.5, 50))
    def test_strictly_decreasing(self, g1, g2, eps):
        assume(abs(g1 - g2) > 1e-6)
        lo, hi = sorted((g1, g2))
        v = rbf_map(np.array([[lo, hi]]), eps).values[0]
        assume(v[1] > 0)  # both still representable
        assert v[0] > v[1]


class TestExtractKeypoints:
    def test_tie_goes_to_lowest_index(self):
        p = extract_keypoints(np.array([[0.2], [0.9], [0.9]]))
        assert p.indices.tolist() == [1]
        assert p.confidences.tolist() == [0.9]

    def test_confidence_is_column_max(self, rng):
        v = rng.uniform(size=(40, 5))
        p = extract_keypoints(v)
        np.testing.assert_array_equal(p.confidences, v.max(axis=0))

    def test_no_rows(self):
        with pytest.raises(ShapeMismatch):
            extract_keypoints(np.zeros((0, 2)))

    def test_round_trip_on_random_graph(self, rng):
        from manikey.cloud import PointCloud

        cloud = PointCloud(rng.normal(size=(120, 3)))
        src = rng.choice(120, 6, replace=False)
        field = rbf_map(dijkstra_field(build_knn_graph(cloud, 8), src))
        assert extract_keypoints(field).indices.tolist() == src.tolist()

    def test_round_trip_on_quadruped(self, quadruped_sample):
        field = rbf_map(quadruped_sample.geodesic)
        assert np.array_equal(extract_keypoints(field).indices, quadruped_sample.keypoints.indices)


class TestMse:
    def test_equal_is_zero(self, rng):
        a = rng.uniform(size=(5, 3))
        assert mse_loss(a, a) == 0.0

    def test_constant_offset(self, rng):
        a = rng.uniform(size=(7, 4))
        assert mse_loss(a + 0.1, a) == pytest.approx(0.01, rel=1e-9)

    def test_scalar(self):
        assert mse_loss(np.array([[0.3]]), np.array([[0.7]])) == pytest.approx(0.16, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=50)
    @given(
        arrays(np.float64, (6, 3), elements=st.floats(-2, 2)),
        arrays(np.float64, (6, 3), elements=st.floats(-2, 2)),
    )
    def test_nonnegative_symmetric_and_zero_iff_equal(self, a, b):
        la, lb = mse_loss(a, b), mse_loss(b, a)
        assert la >= 0 and la == lb
        assert (la == 0) == np.array_equal(a, b) or np.allclose(a, b, atol=1e-150)
