import time

import numpy as np
import pytest
from helpers import sphere_points
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csgraph
from scipy.stats import spearmanr

from manikey.cloud import AnnotatedSample, KeypointSet, PointCloud
from manikey.errors import InvalidK, InvalidParams, SolveFailed
from manikey.geodesy import (
    DIJKSTRA,
    HEAT,
    GeodesicField,
    build_knn_graph,
    dijkstra_field,
    geodesic_field,
    graph_from_edges,
    graph_laplacian,
    heat_field,
)


def line(n, spacing=1.0):
    return PointCloud(np.column_stack([np.arange(n) * spacing, np.zeros(n), np.zeros(n)]))


def far_mask(d, cutoff=0.1):
    return d > cutoff


class TestKnnGraph:
    def test_collinear_k1(self):
        g = build_knn_graph(line(3), k=1)
        assert g.edges == [(0, 1, 1.0), (1, 2, 1.0)]
        assert g.bridges == 0

    def test_k_equals_n_minus_one_is_complete(self, rng):
        g = build_knn_graph(PointCloud(rng.normal(size=(4, 3))), k=3)
        assert g.n_edges == 6

    def test_two_clusters_bridged_once(self, rng):
        a = rng.normal(0, 0.1, size=(5, 3))
        b = a + [100.0, 0, 0]
        pts = np.vstack([a, b])
        g = build_knn_graph(PointCloud(pts), k=2)
        assert g.bridges == 1
        # brute-force oracle: the bridge is the closest cross-cluster pair
        d = np.linalg.norm(a[:, None] - b[None], axis=2)
        assert np.isclose(g.lengths.max(), d.min())
        n_comp, _ = csgraph.connected_components(g.adjacency(), directed=False)
        assert n_comp == 1

    def test_invalid_k(self, rng):
        cloud = PointCloud(rng.normal(size=(4, 3)))
        with pytest.raises(InvalidK):
            build_knn_graph(cloud, k=4)
        with pytest.raises(InvalidK):
            build_knn_graph(cloud, k=0)

    def test_duplicate_points_rejected(self):
        with pytest.raises(InvalidParams):
            build_knn_graph(PointCloud([[0, 0, 0], [0, 0, 0], [1.0, 0, 0]]), k=1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(6, 60), st.integers(1, 5), st.integers(0, 2**31))
    def test_symmetric_connected_no_self_loops(self, n, k, seed):
        pts = np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))
        g = build_knn_graph(PointCloud(pts), k=k)
        A = g.adjacency()
        assert (A != A.T).nnz == 0
        assert np.all(g.edges_i < g.edges_j)
        assert np.all(g.lengths > 0)
        assert csgraph.connected_components(A, directed=False)[0] == 1
        # every directed kNN relation is present
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        nn = np.argsort(d, axis=1)[:, :k]
        for i in range(n):
            for j in nn[i]:
                assert A[i, j] > 0


class TestDijkstra:
    def test_path_graph(self):
        g = graph_from_edges(3, [(0, 1, 1.0), (1, 2, 1.0)])
        assert dijkstra_field(g, [0]).values[:, 0].tolist() == [0.0, 1.0, 2.0]

    def test_square_sides_only(self):
        g = graph_from_edges(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)])
        assert dijkstra_field(g, [0]).values[2, 0] == 2.0

    def test_source_zero(self, rng):
        cloud = PointCloud(rng.normal(size=(30, 3)))
        f = dijkstra_field(build_knn_graph(cloud, 5), [4, 9])
        assert f.values[4, 0] == 0.0 and f.values[9, 1] == 0.0
        assert f.method == DIJKSTRA

    def test_bad_source(self):
        with pytest.raises(InvalidParams):
            dijkstra_field(graph_from_edges(2, [(0, 1, 1.0)]), [2])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(8, 40), st.integers(2, 5), st.integers(0, 2**31))
    def test_triangle_inequality_and_chord_bound(self, n, k, seed):
        pts = np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))
        g = build_knn_graph(PointCloud(pts), k=k)
        D = dijkstra_field(g, np.arange(n)).values
        assert np.all(D[:, :, None] <= D[:, None, :] + D.T[None, :, :] + 1e-12)
        chord = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        assert np.all(D >= chord - 1e-12)


class TestLaplacian:
    def test_rows_sum_to_zero(self, rng):
        g = build_knn_graph(PointCloud(rng.normal(size=(40, 3))), 6)
        L, mass = graph_laplacian(g)
        np.testing.assert_allclose(np.asarray(L.sum(axis=1)).ravel(), 0, atol=1e-10)
        assert np.all(mass > 0)

    def test_path_mass_is_mean_incident_length(self):
        g = graph_from_edges(3, [(0, 1, 1.0), (1, 2, 3.0)])
        _, mass = graph_laplacian(g)
        assert mass.tolist() == [1.0, 2.0, 3.0]


class TestHeat:
    def test_source_exactly_zero_and_nonnegative(self, rng):
        pts = sphere_points(300, seed=1)
        cloud = PointCloud(pts)
        f = heat_field(build_knn_graph(cloud, 12), cloud, [0, 150])
        assert f.values[0, 0] == 0.0 and f.values[150, 1] == 0.0
        assert np.all(f.values >= 0)
        assert f.method == HEAT

    def test_sphere_200_against_dijkstra(self):
        pts = sphere_points(200, seed=0)
        cloud = PointCloud(pts)
        g = build_knn_graph(cloud, 16)
        for s in (0, 57, 123):
            h = heat_field(g, cloud, [s]).values[:, 0]
            d = dijkstra_field(g, [s]).values[:, 0]
            far = far_mask(d)
            rel = np.mean(np.abs(h[far] - d[far]) / d[far])
            assert rel < 0.10, (s, rel)
            assert spearmanr(h, d).statistic > 0.95

    def test_dense_sphere_tracks_great_circle(self):
        pts = sphere_points(1500, seed=2)
        cloud = PointCloud(pts)
        h = heat_field(build_knn_graph(cloud, 16), cloud, [0]).values[:, 0]
        exact = np.arccos(np.clip(pts @ pts[0], -1, 1))
        far = exact > 0.1
        assert np.mean(np.abs(h[far] - exact[far]) / exact[far]) < 0.06

    def test_path_monotone(self):
        cloud = line(50)
        h = heat_field(build_knn_graph(cloud, 2), cloud, [0]).values[:, 0]
        assert np.all(np.diff(h) >= 0)
        np.testing.assert_allclose(h, np.arange(50.0), rtol=0.05)

    def test_translation_invariant(self, rng):
        pts = sphere_points(200, seed=3)
        a = PointCloud(pts)
        b = PointCloud(pts + [3.0, -2.0, 1.0])
        ha = heat_field(build_knn_graph(a, 10), a, [5]).values
        hb = heat_field(build_knn_graph(b, 10), b, [5]).values
        np.testing.assert_allclose(ha, hb, rtol=1e-6, atol=1e-9)

    def test_invalid_inputs(self, rng):
        cloud = PointCloud(rng.normal(size=(20, 3)))
        g = build_knn_graph(cloud, 4)
        with pytest.raises(InvalidParams):
            heat_field(g, cloud, [0], t_scale=0.0)
        with pytest.raises(InvalidParams):
            heat_field(g, cloud, [20])
        with pytest.raises(InvalidParams):
            heat_field(g, PointCloud(rng.normal(size=(21, 3))), [0])

    def test_disconnected_graph_reports_solve_failure(self):
        pts = np.array([[0, 0, 0], [1.0, 0, 0], [5.0, 0, 0], [6.0, 0, 0]])
        g = graph_from_edges(4, [(0, 1, 1.0), (2, 3, 1.0)])
        with pytest.raises(SolveFailed):
            heat_field(g, PointCloud(pts), [0])

    def test_quadruped_speed_and_agreement(self, quadruped_sample):
        cloud = quadruped_sample.cloud
        t = time.perf_counter()
        g = build_knn_graph(cloud, 16)
        h = heat_field(g, cloud, quadruped_sample.keypoints.indices).values
        assert time.perf_counter() - t < 5.0
        d = dijkstra_field(g, quadruped_sample.keypoints.indices).values
        for j in range(h.shape[1]):
            assert spearmanr(h[:, j], d[:, j]).statistic > 0.95


def three_point_sample():
    cloud = line(3)
    return AnnotatedSample(cloud, KeypointSet.from_cloud(cloud, [0, 2], ("a", "b")))


class TestGeodesicField:
    def test_three_point_path(self):
        s = geodesic_field(three_point_sample(), DIJKSTRA, k=1)
        assert s.geodesic.values.tolist() == [[0, 2], [1, 1], [2, 0]]

    def test_heat_on_tiny_input(self):
        # Tiny systems: either an explicit failure or within 25 % of Dijkstra.
        try:
            s = geodesic_field(three_point_sample(), HEAT, k=1)
        except SolveFailed:
            return
        d = np.array([[0, 2], [1, 1], [2, 0.0]])
        far = d > 0
        assert np.all(np.abs(s.geodesic.values[far] - d[far]) <= 0.25 * d[far])

    def test_bit_identical_recomputation(self, quadruped_sample):
        s = quadruped_sample.replace(geodesic=None)
        a = geodesic_field(s, HEAT).geodesic.values
        b = geodesic_field(s, HEAT).geodesic.values
        assert np.array_equal(a, b)

    def test_overwrite_guard(self):
        s = geodesic_field(three_point_sample(), DIJKSTRA, k=1)
        with pytest.raises(InvalidParams):
            geodesic_field(s, DIJKSTRA, k=1)
        assert geodesic_field(s, HEAT, k=1, overwrite=True).geodesic.method == HEAT

    def test_unknown_method(self):
        with pytest.raises(InvalidParams):
            geodesic_field(three_point_sample(), "fast-marching", k=1)
        with pytest.raises(InvalidParams):
            GeodesicField(np.zeros((2, 1)), "fast-marching")
