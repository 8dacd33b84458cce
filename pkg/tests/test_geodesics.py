import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from flowcorr.errors import ConnectivityError, ParameterError, ValidationError
from flowcorr.geodesics import (GeodesicGraph, _graph_from_edges, build_graph, knn_graph, landmark_distances,
                                normalization_scale, save_distance_csv, single_source)
from flowcorr.geometry import Mesh, PointCloud, load_mesh
from flowcorr.harness import sample_unit_sphere, sphere_mesh


def floyd_warshall(n, edges, weights):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (i, j), w in zip(edges, weights):
        d[i, j] = min(d[i, j], w)
        d[j, i] = min(d[j, i], w)
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def random_connected_graph(rng, n, dyadic=True):
    # random spanning tree plus extra (possibly parallel) edges; dyadic
    # weights keep every path sum exact in floating point
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    extra = rng.integers(0, n, size=(rng.integers(0, 2 * n + 1), 2))
    edges += [(int(a), int(b)) for a, b in extra if a != b]
    if dyadic:
        w = rng.integers(1, 33, size=len(edges)) / 16.0
    else:
        w = rng.uniform(0.1, 2.0, size=len(edges))
    return edges, w


def graph_of(n, edges, w):
    e = np.array(edges)
    adj = _graph_from_edges(n, e[:, 0], e[:, 1], w)
    return GeodesicGraph(np.zeros((n, 3)), adj, "knn", np.zeros(0, dtype=np.int64))


def path_graph(weights):
    n = len(weights) + 1
    return graph_of(n, [(i, i + 1) for i in range(n - 1)], np.asarray(weights, float))


def test_path_graph_distances():
    g = path_graph([1.0, 1.0])
    np.testing.assert_array_equal(single_source(g, 0), [0, 1, 2])


def test_dijkstra_equals_floyd_warshall_20():
    rng = np.random.default_rng(20)
    edges, w = random_connected_graph(rng, 20)
    g = graph_of(20, edges, w)
    fw = floyd_warshall(20, edges, w)
    for s in range(20):
        np.testing.assert_array_equal(single_source(g, s), fw[s])


def test_dijkstra_real_weights_close_to_floyd_warshall():
    rng = np.random.default_rng(21)
    edges, w = random_connected_graph(rng, 30, dyadic=False)
    g = graph_of(30, edges, w)
    fw = floyd_warshall(30, edges, w)
    for s in range(30):
        np.testing.assert_allclose(single_source(g, s), fw[s], rtol=1e-12)


def test_self_distance_zero():
    rng = np.random.default_rng(3)
    edges, w = random_connected_graph(rng, 15)
    g = graph_of(15, edges, w)
    for s in range(15):
        assert single_source(g, s)[s] == 0.0


def test_cube_graph_counts(data_path):
    mesh = load_mesh(data_path("cube.off"))
    g = build_graph(mesh)
    # independent count: distinct sorted vertex pairs over triangle sides
    sides = {tuple(sorted(p)) for t in mesh.triangles.tolist() for p in itertools.combinations(t, 2)}
    assert g.n == 8
    assert g.n_edges == len(sides) == 18
    assert g.kind == "mesh-edge"


def test_two_point_knn():
    adj = knn_graph(np.array([[0, 0, 0], [1, 0, 0.0]]), k=1)
    assert adj.shape == (2, 2)
    assert sp.triu(adj).nnz == 1


def test_k_at_least_n_is_rejected():
    with pytest.raises(ParameterError):
        knn_graph(np.random.default_rng(0).normal(size=(5, 3)), k=5)


def test_disjoint_spheres_disconnected():
    a = sample_unit_sphere(200, 0)
    b = sample_unit_sphere(200, 1) + [10.0, 0, 0]
    with pytest.raises(ConnectivityError, match="2 components"):
        build_graph(PointCloud(np.vstack([a, b])), k=8)


def test_adjacency_symmetric_positive():
    v, t = sphere_mesh(300)
    g = build_graph(Mesh(v, t))
    assert (g.adjacency != g.adjacency.T).nnz == 0
    assert g.adjacency.data.min() > 0


def test_single_landmark_column():
    g = path_graph([1.0, 2.0, 0.5])
    np.testing.assert_array_equal(landmark_distances(g, [1])[:, 0], single_source(g, 1))


def test_mirror_landmarks_on_path():
    g = path_graph([1.0, 1.0, 1.0, 1.0])
    d = landmark_distances(g, [0, 4])
    np.testing.assert_array_equal(d[:, 0], d[::-1, 1])


def test_duplicate_landmark_rejected():
    g = path_graph([1.0, 1.0])
    with pytest.raises(ValidationError):
        landmark_distances(g, [0, 0])
    with pytest.raises(ValidationError):
        single_source(g, 5)


def test_sphere_landmarks_zero_only_at_landmark_rows():
    v, t = sphere_mesh(500)
    lm = [0, 100, 200, 300, 400]
    g = build_graph(Mesh(v, t, lm))
    d = landmark_distances(g, lm)
    fw_rows = np.stack([single_source(g, i) for i in lm], axis=1)
    np.testing.assert_array_equal(d, fw_rows)
    near_zero = d < 1e-12
    assert near_zero.sum() == 5
    assert set(np.flatnonzero(near_zero.any(axis=1))) == set(lm)


def test_normalization_scales():
    tri = Mesh(np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert normalization_scale(build_graph(tri)) == pytest.approx(1.0)
    v, t = sphere_mesh(2000)
    assert normalization_scale(build_graph(Mesh(v, t))) == pytest.approx(np.sqrt(4 * np.pi), rel=0.02)
    assert normalization_scale(path_graph([1.0, 1.0, 1.0])) == 3.0


def test_distance_csv(tmp_path):
    g = path_graph([1.0, 1.0])
    save_distance_csv(landmark_distances(g, [0, 2]), tmp_path / "d.csv")
    text = (tmp_path / "d.csv").read_text().splitlines()
    assert text[0] == "L0,L1"
    assert [float(x) for x in text[1].split(",")] == [0.0, 2.0]
