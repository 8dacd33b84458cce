"""Graph geodesics on meshes, point clouds and SDF surface samples.

All three representations reduce to a weighted undirected graph whose
edge weights are Euclidean lengths; distances are exact shortest paths
on that graph (Dijkstra via :mod:`scipy.sparse.csgraph`).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from ._io import atomic_write, fmt_float
from .errors import ConnectivityError, ParameterError, ValidationError
from .geometry import Mesh, PointCloud, SampleSet, SdfGrid, sample_surface, snap_to_samples


@dataclass(frozen=True, eq=False)
class GeodesicGraph:
    """Symmetric sparse graph over surface nodes.

    ``adjacency`` is a CSR matrix: row i lists (neighbor, edge length).
    ``landmarks`` are the node ids of the shape's landmarks (snapped to
    the nearest sample for SDF grids); ``surface_area`` is only known for
    meshes.
    """

    node_positions: np.ndarray
    adjacency: sparse.csr_matrix
    kind: str
    landmarks: np.ndarray
    surface_area: float | None = None
    samples: SampleSet | None = None

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def n_edges(self):
        return self.adjacency.nnz // 2

    def edges(self):
        """Undirected edge list (i < j) and lengths."""
        upper = sparse.triu(self.adjacency, k=1).tocoo()
        return np.column_stack([upper.row, upper.col]), upper.data

    def neighbors(self, i):
        a = self.adjacency
        lo, hi = a.indptr[i], a.indptr[i + 1]
        return list(zip(a.indices[lo:hi].tolist(), a.data[lo:hi].tolist()))


def _graph_from_edges(n, i, j, lengths):
    lo = np.minimum(i, j).astype(np.int64)
    hi = np.maximum(i, j).astype(np.int64)
    lengths = np.asarray(lengths, dtype=float)
    keep = (lengths > 0) & (lo != hi)
    lo, hi, lengths = lo[keep], hi[keep], lengths[keep]
    # parallel edges: keep the shortest
    order = np.lexsort((lengths, hi, lo))
    lo, hi, lengths = lo[order], hi[order], lengths[order]
    first = np.ones(len(lo), dtype=bool)
    first[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
    lo, hi, lengths = lo[first], hi[first], lengths[first]
    a = sparse.coo_matrix((np.concatenate([lengths, lengths]), (np.concatenate([lo, hi]), np.concatenate([hi, lo]))),
                          shape=(n, n)).tocsr()
    a.sort_indices()
    n_comp, _ = csgraph.connected_components(a, directed=False)
    if n_comp != 1:
        raise ConnectivityError(n_comp)
    return a


def mesh_graph(mesh):
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    return _graph_from_edges(mesh.n, e[:, 0], e[:, 1], lengths)


def knn_graph(points, k=8):
    """Symmetrized k-nearest-neighbor graph over raw points."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k < 1 or k >= n:
        raise ParameterError(f"k must be in [1, n), got k={k} with n={n}")
    dist, idx = cKDTree(pts).query(pts, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    return _graph_from_edges(n, rows, idx[:, 1:].ravel(), dist[:, 1:].ravel())


def radius_graph(points, radius):
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    lengths = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    return _graph_from_edges(len(points), pairs[:, 0], pairs[:, 1], lengths)


def build_graph(shape, k=8, samples=None, n_samples=4000, seed=0):
    """Geodesic graph for any supported shape.

    Meshes use their edges, clouds a symmetrized ``k``-NN graph, SDF grids
    a radius graph (2 voxel spacings) over zero-set samples; pass
    ``samples`` to reuse an existing :class:`SampleSet`.
    """
    if isinstance(shape, Mesh):
        return GeodesicGraph(shape.vertices, mesh_graph(shape), "mesh-edge", shape.landmark_ids, shape.area())
    if isinstance(shape, PointCloud):
        return GeodesicGraph(shape.points, knn_graph(shape.points, k), "knn", shape.landmark_ids)
    if isinstance(shape, SdfGrid):
        if samples is None:
            samples = sample_surface(shape, n_samples, seed)
        pos = samples.positions
        adj = radius_graph(pos, 2.0 * float(shape.spacing.max()))
        lm = snap_to_samples(pos, shape.landmark_points) if len(shape.landmark_points) else np.zeros(0, np.int64)
        if len(set(lm.tolist())) != len(lm):
            raise ValidationError("two SDF landmarks snap to the same sample")
        return GeodesicGraph(pos, adj, "voxel", lm, samples=samples)
    raise TypeError(f"cannot build a graph for {type(shape).__name__}")


def single_source(graph, source):
    if not 0 <= source < graph.n:
        raise ValidationError(f"source {source} out of range [0, {graph.n})")
    return csgraph.dijkstra(graph.adjacency, directed=False, indices=int(source))


def landmark_distances(graph, landmarks):
    """n x |L| matrix whose column j holds distances to ``landmarks[j]``."""
    lm = np.asarray(landmarks, dtype=np.int64).reshape(-1)
    if len(lm) < 1:
        raise ValidationError("need at least one landmark")
    if len(np.unique(lm)) != len(lm):
        raise ValidationError("duplicate landmark")
    if lm.min() < 0 or lm.max() >= graph.n:
        raise ValidationError(f"landmark out of range [0, {graph.n})")
    return csgraph.dijkstra(graph.adjacency, directed=False, indices=lm).T.copy()


def normalization_scale(graph):
    """sqrt(surface area) for meshes, double-sweep graph diameter otherwise."""
    if graph.surface_area is not None:
        return float(np.sqrt(graph.surface_area))
    d0 = single_source(graph, 0)
    far = int(np.argmax(d0))
    return float(single_source(graph, far).max())


def save_distance_csv(matrix, path, header=None):
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    header = header or [f"L{j}" for j in range(m.shape[1])]
    with atomic_write(os.fspath(path)) as fh:
        fh.write(",".join(header) + "\n")
        for row in m:
            fh.write(",".join(fmt_float(x) for x in row) + "\n")
