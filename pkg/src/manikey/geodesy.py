"""Distances along the sampled surface of a point cloud.

The surface is discretised as a symmetrised k-nearest-neighbour graph.
Two distance routes are provided: exact shortest paths on the graph
(Dijkstra) and the two-solve heat method adapted to the graph.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .cloud import AnnotatedSample, PointCloud
from .errors import InvalidK, InvalidParams, SolveFailed

log = logging.getLogger(__name__)

DIJKSTRA = "dijkstra"
HEAT = "heat"
METHODS = (DIJKSTRA, HEAT)
# Diffusion time in units of h**2; the graph Laplacian diffuses faster than a
# mesh Laplacian, so a smaller factor than the usual 1.0 tracks Dijkstra best.
DEFAULT_T_SCALE = 0.3


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Undirected graph with edges ``(i, j, length)``, ``i < j``.

    ``bridges`` counts edges added to join otherwise disconnected components.
    """

    n: int
    edges_i: np.ndarray
    edges_j: np.ndarray
    lengths: np.ndarray
    bridges: int = 0

    @property
    def edges(self):
        return list(zip(self.edges_i.tolist(), self.edges_j.tolist(), self.lengths.tolist()))

    @property
    def n_edges(self):
        return len(self.lengths)

    def adjacency(self):
        """Symmetric CSR matrix of edge lengths."""
        i = np.concatenate([self.edges_i, self.edges_j])
        j = np.concatenate([self.edges_j, self.edges_i])
        w = np.concatenate([self.lengths, self.lengths])
        return sparse.csr_matrix((w, (i, j)), shape=(self.n, self.n))

    def mean_edge_length(self):
        return float(self.lengths.mean())


@dataclass(frozen=True, eq=False)
class GeodesicField:
    """n x m matrix of on-surface distances (meters) from each point to each keypoint."""

    values: np.ndarray
    method: str = DIJKSTRA

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 1:
            v = v[:, None]
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.method not in METHODS:
            raise InvalidParams(f"unknown geodesic method {self.method!r}")

    @property
    def shape(self):
        return self.values.shape


def graph_from_edges(n, edges):
    """Build a :class:`NeighborGraph` from ``(i, j, length)`` triples (test helper)."""
    e = np.asarray(edges, dtype=np.float64).reshape(-1, 3)
    i, j = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    return NeighborGraph(int(n), lo, hi, e[:, 2].copy())


def _bridge_components(points, i, j, lengths):
    """Join components by repeatedly adding the shortest inter-component edge."""
    n = len(points)
    added = 0
    while True:
        adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
        n_comp, labels = csgraph.connected_components(adj, directed=False)
        if n_comp == 1:
            return i, j, lengths, added
        best = (np.inf, -1, -1)
        # Nearest point of every other component, per component; brute force is
        # fine because disconnection is rare and components are few.
        for c in range(n_comp):
            inside = np.flatnonzero(labels == c)
            outside = np.flatnonzero(labels != c)
            d, k = cKDTree(points[outside]).query(points[inside])
            a = int(np.argmin(d))
            if d[a] < best[0]:
                best = (d[a], int(inside[a]), int(outside[k[a]]))
        d, a, b = best
        i = np.append(i, min(a, b))
        j = np.append(j, max(a, b))
        lengths = np.append(lengths, d)
        added += 1


def build_knn_graph(cloud: PointCloud, k: int = 16) -> NeighborGraph:
    """Symmetrised kNN graph with Euclidean edge lengths, bridged until connected."""
    points = cloud.points
    n = len(points)
    if k < 1 or n <= k:
        raise InvalidK(f"need 1 <= k < n, got k={k}, n={n}")
    dist, nbr = cKDTree(points).query(points, k=k + 1)
    src = np.repeat(np.arange(n), k)
    dst = nbr[:, 1:].reshape(-1)
    d = dist[:, 1:].reshape(-1)
    keep = src != dst
    src, dst, d = src[keep], dst[keep], d[keep]
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key = lo * n + hi
    key, first = np.unique(key, return_index=True)
    lo, hi, d = lo[first], hi[first], d[first]
    if np.any(d <= 0):
        raise InvalidParams("cloud contains duplicate points; edge lengths must be positive")
    lo, hi, d, added = _bridge_components(points, lo, hi, d)
    if added:
        log.warning("kNN graph was disconnected; added %d bridge edge(s)", added)
    order = np.lexsort((hi, lo))
    return NeighborGraph(n, lo[order], hi[order], d[order], bridges=added)


def dijkstra_field(graph: NeighborGraph, sources) -> GeodesicField:
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if np.any(sources < 0) or np.any(sources >= graph.n):
        raise InvalidParams("source index out of range")
    d = csgraph.dijkstra(graph.adjacency(), directed=False, indices=sources)
    return GeodesicField(d.T, DIJKSTRA)


def graph_laplacian(graph: NeighborGraph):
    """Weighted Laplacian (weights 1/length) and lumped mass (mean incident edge length)."""
    n = graph.n
    w = 1.0 / graph.lengths
    i, j = graph.edges_i, graph.edges_j
    W = sparse.csr_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    deg = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    tot = np.bincount(i, weights=graph.lengths, minlength=n) + np.bincount(j, weights=graph.lengths, minlength=n)
    mass = tot / np.maximum(deg, 1)
    return L.tocsc(), mass


def _vertex_gradients(points, graph, u):
    """Least-squares tangential gradient of ``u`` and unit normal at every vertex.

    Solves, per vertex, sum_j w_ij (u_j - u_i - g . e_ij)^2 -> min with a small
    Tikhonov term so that the unconstrained normal direction stays bounded.
    """
    n = graph.n
    i = np.concatenate([graph.edges_i, graph.edges_j])
    j = np.concatenate([graph.edges_j, graph.edges_i])
    e = points[j] - points[i]
    l2 = np.einsum("ij,ij->i", e, e)
    w = 1.0 / l2
    du = u[j] - u[i]
    A = np.zeros((n, 3, 3))
    b = np.zeros((n, 3))
    np.add.at(A, i, w[:, None, None] * e[:, :, None] * e[:, None, :])
    np.add.at(b, i, (w * du)[:, None] * e)
    tr = np.trace(A, axis1=1, axis2=2)
    A += (1e-6 * tr + 1e-300)[:, None, None] * np.eye(3)
    g = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    # Curvature leaks into the normal direction of a 3D linear fit; keep only
    # the tangential part (normal = weakest direction of the edge covariance).
    normal = np.linalg.eigh(A)[1][:, :, 0]
    return g - np.einsum("ij,ij->i", g, normal)[:, None] * normal, normal


def _tangent_rate(X, e, normal):
    """Directional derivative of a unit field ``X`` along edge ``e`` projected to the tangent plane."""
    et = e - np.einsum("ij,ij->i", e, normal)[:, None] * normal
    nt = np.linalg.norm(et, axis=1)
    return np.einsum("ij,ij->i", X, et) / np.where(nt > 0, nt, 1.0)


def heat_field(graph: NeighborGraph, cloud: PointCloud, sources, t_scale: float = DEFAULT_T_SCALE) -> GeodesicField:
    """Heat method on the neighbour graph.

    1. diffuse a unit impulse for time ``t = t_scale * h**2`` (``h`` the mean edge
       length) with one backward Euler step ``(M + t L) u = delta``;
    2. normalise the per-vertex gradient of ``u`` to get the unit direction of
       increasing distance;
    3. integrate it back with a Poisson solve ``L phi = div`` whose discrete
       divergence is consistent with ``L`` (a linear function with unit gradient
       reproduces exactly);
    4. pin ``phi`` to zero at the source and clamp negatives.
    """
    if t_scale <= 0:
        raise InvalidParams("t_scale must be positive")
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    n = graph.n
    if cloud.n != n:
        raise InvalidParams("cloud and graph sizes differ")
    if np.any(sources < 0) or np.any(sources >= n):
        raise InvalidParams("source index out of range")
    points = cloud.points
    L, mass = graph_laplacian(graph)
    h = graph.mean_edge_length()
    t = t_scale * h * h
    try:
        heat_lu = splu((sparse.diags(mass) + t * L).tocsc())
    except RuntimeError as exc:
        raise SolveFailed(f"heat system factorisation failed: {exc}") from exc

    ei, ej = graph.edges_i, graph.edges_j
    e = points[ej] - points[ei]
    w = 1.0 / graph.lengths
    out = np.empty((n, len(sources)))
    poisson_cache = {}
    for col, s in enumerate(sources):
        rhs = np.zeros(n)
        rhs[s] = 1.0
        u = heat_lu.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise SolveFailed("heat solve produced non-finite values")
        g, normal = _vertex_gradients(points, graph, u)
        norm = np.linalg.norm(g, axis=1)
        X = -g / np.where(norm > 0, norm, 1.0)[:, None]
        # Increment of the distance along each edge, measured in the tangent
        # plane at both ends so that long chords on curved patches are not
        # foreshortened.
        rate = 0.5 * (_tangent_rate(X[ei], e, normal[ei]) + _tangent_rate(X[ej], e, normal[ej]))
        # The source has no usable gradient; its incident edges point straight out.
        rate[ei == s] = 1.0
        rate[ej == s] = -1.0
        flux = w * rate * graph.lengths
        # div_i = sum_j w_ij X_ij . (p_i - p_j)
        div = np.bincount(ej, weights=flux, minlength=n) - np.bincount(ei, weights=flux, minlength=n)

        if s not in poisson_cache:
            keep = np.ones(n, dtype=bool)
            keep[s] = False
            sub = L[keep][:, keep].tocsc()
            try:
                poisson_cache[s] = (keep, splu(sub))
            except RuntimeError as exc:
                raise SolveFailed(f"Poisson system factorisation failed: {exc}") from exc
        keep, lu = poisson_cache[s]
        phi = np.zeros(n)
        phi[keep] = lu.solve(div[keep])
        resid = float(np.linalg.norm(L @ phi - div))
        if not np.all(np.isfinite(phi)) or resid > 1e-6 * max(1.0, float(np.linalg.norm(div))):
            raise SolveFailed("Poisson solve did not converge", resid)
        out[:, col] = np.maximum(phi - phi[s], 0.0)
    return GeodesicField(out, HEAT)


def geodesic_field(
    sample: AnnotatedSample, method: str = DIJKSTRA, k: int = 16, t_scale: float = DEFAULT_T_SCALE, overwrite: bool = False
) -> AnnotatedSample:
    """Attach the n x m distance field for the sample's keypoints."""
    if sample.geodesic is not None and not overwrite:
        raise InvalidParams("sample already has a geodesic field; pass overwrite=True")
    if method not in METHODS:
        raise InvalidParams(f"unknown method {method!r}")
    graph = build_knn_graph(sample.cloud, k)
    if method == DIJKSTRA:
        fld = dijkstra_field(graph, sample.keypoints.indices)
    else:
        fld = heat_field(graph, sample.cloud, sample.keypoints.indices, t_scale)
    return sample.replace(geodesic=fld)
