"""Map quality metrics and divergence estimators."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from ._io import atomic_write
from .errors import ValidationError
from .geodesics import GeodesicGraph, normalization_scale

MIN_DISTANCE = 1e-12
LOG2 = float(np.log(2.0))


def _map(corr):
    return np.asarray(corr.map if hasattr(corr, "map") else corr, dtype=np.int64).reshape(-1)


def _check(c, gt, n2=None):
    if len(c) != len(gt):
        raise ValidationError(f"correspondence has {len(c)} entries, ground truth {len(gt)}")
    if n2 is not None and len(c) and (max(c.max(), gt.max()) >= n2 or min(c.min(), gt.min()) < 0):
        raise ValidationError(f"target index out of range [0, {n2})")


def euclidean_error(corr, gt, target_positions, scale=1.0):
    """Mean distance between predicted and true target points, divided by ``scale``."""
    c, g = _map(corr), _map(gt)
    y = np.asarray(target_positions, dtype=float)
    _check(c, g, len(y))
    return float(np.linalg.norm(y[c] - y[g], axis=1).mean() / scale)


def geodesic_error(corr, gt, target_graph: GeodesicGraph, scale=None, chunk=256):
    """Mean graph-geodesic distance between predicted and true targets.

    One Dijkstra run per distinct ground-truth target.  ``scale`` defaults
    to :func:`normalization_scale` of the target graph.
    """
    c, g = _map(corr), _map(gt)
    _check(c, g, target_graph.n)
    if scale is None:
        scale = normalization_scale(target_graph)
    sources, inverse = np.unique(g, return_inverse=True)
    err = np.empty(len(c))
    for s in range(0, len(sources), chunk):
        block = sources[s:s + chunk]
        dist = csgraph.dijkstra(target_graph.adjacency, directed=False, indices=block)
        rows = np.flatnonzero((inverse >= s) & (inverse < s + len(block)))
        err[rows] = dist[inverse[rows] - s, c[rows]]
    return float(err.mean() / scale)


def dirichlet_energy(corr, source_graph: GeodesicGraph, target_positions, normalizer=None):
    """Sum over source edges (i, j) of |y_c(i) - y_c(j)|^2 / len(i, j), divided by ``normalizer``.

    ``normalizer`` defaults to the source surface area for meshes and the
    squared normalization scale otherwise.
    """
    c = _map(corr)
    if len(c) != source_graph.n:
        raise ValidationError("correspondence length differs from the source node count")
    y = np.asarray(target_positions, dtype=float)
    if normalizer is None:
        normalizer = source_graph.surface_area or normalization_scale(source_graph) ** 2
    e, length = source_graph.edges()
    diff = y[c[e[:, 0]]] - y[c[e[:, 1]]]
    return float((np.einsum("ij,ij->i", diff, diff) / length).sum() / normalizer)


def coverage(corr, n2):
    """Fraction of the ``n2`` target points hit by the map."""
    return len(np.unique(_map(corr))) / n2


def kl_knn(A, B, k=5):
    """k-NN estimate of KL(P_A || P_B) from samples.

    (d/m) sum_i log(nu_k(i) / rho_k(i)) + log(n / (m - 1)), with rho_k the
    k-th neighbour distance of A_i within A (self excluded) and nu_k its
    k-th neighbour distance within B.  When B is the same sample as A the
    self match is excluded from nu_k as well.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValidationError("sample dimensions differ")
    m, d = A.shape
    n = len(B)
    if m <= k or n < k:
        raise ValidationError(f"need more than k={k} samples")
    rho = cKDTree(A).query(A, k=k + 1)[0][:, k]
    same = A.shape == B.shape and np.array_equal(A, B)
    if same:
        nu = rho.copy()
    else:
        nu = cKDTree(B).query(A, k=k)[0]
        nu = nu[:, k - 1] if k > 1 else nu.reshape(-1)
    if (rho < MIN_DISTANCE).any() or (nu < MIN_DISTANCE).any():
        warnings.warn(f"duplicate points: k-NN distances clamped at {MIN_DISTANCE}", stacklevel=2)
        rho = np.maximum(rho, MIN_DISTANCE)
        nu = np.maximum(nu, MIN_DISTANCE)
    return float(d / m * np.log(nu / rho).sum() + np.log(n / (m - 1)))


def js_hist(A, B, bins=64):
    """Per-dimension histogram Jensen-Shannon divergence (nats), averaged over dimensions."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValidationError("sample dimensions differ")
    out = []
    for j in range(A.shape[1]):
        lo = min(A[:, j].min(), B[:, j].min())
        hi = max(A[:, j].max(), B[:, j].max())
        if hi <= lo:
            out.append(0.0)
            continue
        p = np.histogram(A[:, j], bins=bins, range=(lo, hi))[0] / len(A)
        q = np.histogram(B[:, j], bins=bins, range=(lo, hi))[0] / len(B)
        mix = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            kp = np.where(p > 0, p * np.log(p / mix), 0.0).sum()
            kq = np.where(q > 0, q * np.log(q / mix), 0.0).sum()
        out.append(max(0.0, 0.5 * (kp + kq)))
    return float(np.mean(out))


@dataclass
class EvalReport:
    """Metrics for one correspondence.

    ``similarity`` is ``1 - js_after / log 2``: a normalized JS similarity
    between the mapped source embedding and the target embedding.
    """

    euclidean_error: float
    geodesic_error: float
    dirichlet_energy: float
    coverage: float
    kl_before: float | None = None
    kl_after: float | None = None
    js_before: float | None = None
    js_after: float | None = None
    similarity: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValidationError("coverage must lie in [0, 1]")
        if min(self.euclidean_error, self.geodesic_error, self.dirichlet_energy) < 0:
            raise ValidationError("errors must be nonnegative")
        for name in ("kl_before", "kl_after", "js_before", "js_after"):
            v = getattr(self, name)
            if v is not None and v < -0.05:
                warnings.warn(f"{name}={v:.3f} is below the estimator noise floor; check the inputs",
                              stacklevel=2)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with atomic_write(os.fspath(path)) as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(os.fspath(path)) as fh:
            return cls.from_json(fh.read())

    SUMMARY_FIELDS = ("euclidean_error", "geodesic_error", "dirichlet_energy", "coverage",
                      "kl_before", "kl_after", "js_before", "js_after", "similarity")


def evaluate_pair(corr, gt, source_graph, target_graph, E1=None, E2=None, mapped=None,
                  kl_k=5, js_bins=64, metadata=None, after=True):
    """Every metric for one correspondence.

    Divergences are only computed when the embeddings are supplied:
    "before" compares ``E1`` with ``E2``, "after" compares ``mapped``
    (defaults to ``corr.mapped_embeddings``) with ``E2``.  Pass
    ``after=False`` when the method does not move the source embedding
    into the target's coordinates.
    """
    y = target_graph.node_positions
    scale_t = normalization_scale(target_graph)
    rep = dict(
        euclidean_error=euclidean_error(corr, gt, y, scale_t),
        geodesic_error=geodesic_error(corr, gt, target_graph, scale_t),
        dirichlet_energy=dirichlet_energy(corr, source_graph, y),
        coverage=coverage(corr, target_graph.n),
    )
    if E1 is not None and E2 is not None:
        v1 = getattr(E1, "values", E1)
        v2 = getattr(E2, "values", E2)
        if not after:
            mapped = None
        elif mapped is None and hasattr(corr, "mapped_embeddings"):
            mapped = corr.mapped_embeddings
        rep["kl_before"] = kl_knn(v1, v2, kl_k)
        rep["js_before"] = js_hist(v1, v2, js_bins)
        if mapped is not None:
            rep["kl_after"] = kl_knn(mapped, v2, kl_k)
            rep["js_after"] = js_hist(mapped, v2, js_bins)
            rep["similarity"] = 1.0 - rep["js_after"] / LOG2
    meta = dict(metadata or {})
    if hasattr(corr, "method"):
        meta.setdefault("method", corr.method)
    return EvalReport(**rep, metadata=meta)
