"""Point-to-point maps from flow composition, plus embedding-space baselines."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from ._io import atomic_write
from .embedding import EmbeddingMatrix
from .errors import ContractError, FormatError, ParameterError, ValidationError
from .flow import FlowModel, integrate_backward, integrate_forward

METHODS = ("fuse", "knn", "knn-in-gauss", "sinkhorn")
BRUTE_FORCE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class Correspondence:
    map: np.ndarray
    mapped_embeddings: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.int64).reshape(-1)
        q = np.asarray(self.mapped_embeddings, dtype=float)
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if len(q) != len(m):
            raise ValidationError("map and mapped embeddings differ in length")
        if not np.all(np.isfinite(q)):
            raise ValidationError("mapped embeddings must be finite")
        if len(m) and m.min() < 0:
            raise ValidationError("negative target index")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)
        object.__setattr__(self, "mapped_embeddings", q)

    @property
    def n(self):
        return len(self.map)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    epsilon: float
    iterations: int
    converged: bool
    marginal_error: float


def _values(E):
    return E.values if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=float)


def compose_map(src: FlowModel, tgt: FlowModel, E1, steps=64):
    """Map standardized source rows through the anchor into the target space."""
    X = _values(E1)
    if src.d != tgt.d or X.shape[1] != src.d:
        raise ContractError(f"dimension mismatch: source flow d={src.d}, target flow d={tgt.d}, "
                            f"embedding d={X.shape[1]}")
    if isinstance(E1, EmbeddingMatrix):
        if E1.norm is None or not E1.norm.allclose(src.norm):
            raise ContractError("source embedding must be standardized with the source flow's transform")
    return integrate_forward(tgt, integrate_backward(src, X, steps), steps)


def _brute_nn(queries, ref, chunk=256):
    out = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        diff = queries[s:s + chunk, None, :] - ref[None, :, :]
        # argmin returns the first minimum, i.e. the smallest index on ties
        out[s:s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def nearest_search(queries, E2):
    """Exact Euclidean 1-NN of each query row in ``E2``; ties go to the smallest index."""
    q = np.atleast_2d(_values(queries))
    ref = np.atleast_2d(_values(E2))
    if q.shape[1] != ref.shape[1]:
        raise ContractError(f"query width {q.shape[1]} != reference width {ref.shape[1]}")
    if len(ref) <= BRUTE_FORCE_LIMIT:
        return _brute_nn(q, ref)
    tree = cKDTree(ref)
    dist, idx = tree.query(q, k=2)
    out = idx[:, 0].astype(np.int64)
    tied = np.flatnonzero(dist[:, 1] <= dist[:, 0])
    for i in tied:
        # tree order is arbitrary among equidistant points; rescan exactly
        cand = np.asarray(tree.query_ball_point(q[i], dist[i, 0] * (1 + 1e-12) + 1e-300))
        d2 = ((ref[cand] - q[i]) ** 2).sum(axis=1)
        best = cand[d2 == d2.min()]
        out[i] = best.min()
    return out


def match_fuse(src, tgt, E1, E2, steps=64):
    mapped = compose_map(src, tgt, E1, steps)
    return Correspondence(nearest_search(mapped, E2), mapped, "fuse", {"steps": steps})


def match_knn(E1, E2):
    q = _values(E1)
    return Correspondence(nearest_search(q, E2), q, "knn")


def match_knn_in_gauss(src, tgt, E1, E2, steps=64):
    """Nearest neighbours between the two embeddings after both are pulled back to the anchor."""
    g1 = integrate_backward(src, _values(E1), steps)
    g2 = integrate_backward(tgt, _values(E2), steps)
    return Correspondence(nearest_search(g1, g2), g1, "knn-in-gauss", {"steps": steps})


def _sinkhorn_loop(C, epsilon, f, g, log_a, log_b, max_iters, tol, check_every):
    """Alternating log-domain scaling at one epsilon; f, g are unscaled dual potentials."""
    K = -C / epsilon
    u, v = f / epsilon, g / epsilon
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        u = log_a - logsumexp(K + v[None, :], axis=1)
        v = log_b - logsumexp(K + u[:, None], axis=0)
        if it % check_every == 0 or it == max_iters:
            # columns are exact right after their update; measure the rows
            rows = np.exp(logsumexp(K + u[:, None] + v[None, :], axis=1))
            err = float(np.abs(rows - np.exp(log_a)).max())
            if err < tol:
                break
    return u * epsilon, v * epsilon, it, err


def sinkhorn(E1, E2, epsilon=1e-2, max_iters=1000, tol=1e-6, check_every=10, anneal=True):
    """Entropic OT between uniform measures on the rows, squared Euclidean cost.

    Runs in the log domain on the dual potentials and stops once the
    row-marginal violation is below ``tol`` (checked every
    ``check_every`` iterations).  With ``anneal`` the potentials are
    first warm-started by a few sweeps at geometrically decreasing
    epsilon (from the cost scale down to ``epsilon``), which avoids the
    very slow plain iteration at small epsilon.  ``max_iters`` bounds the
    final-epsilon loop; ``iterations`` reports the total.
    """
    if not epsilon > 0:
        raise ParameterError("epsilon must be > 0")
    X, Y = _values(E1), _values(E2)
    if X.shape[1] != Y.shape[1]:
        raise ContractError("embedding widths differ")
    n1, n2 = len(X), len(Y)
    C = (X ** 2).sum(1)[:, None] + (Y ** 2).sum(1)[None, :] - 2.0 * X @ Y.T
    C = np.maximum(C, 0.0)
    log_a = np.full(n1, -np.log(n1))
    log_b = np.full(n2, -np.log(n2))
    f, g = np.zeros(n1), np.zeros(n2)
    total = 0
    if anneal:
        eps = max(float(C.max()), epsilon)
        while eps > epsilon * 2.0:
            f, g, it, _ = _sinkhorn_loop(C, eps, f, g, log_a, log_b, 50, tol, check_every)
            total += it
            eps *= 0.5
    f, g, it, err = _sinkhorn_loop(C, epsilon, f, g, log_a, log_b, max_iters, tol, check_every)
    total += it
    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    return TransportPlan(P, float(epsilon), total, err < tol, err)


def match_sinkhorn(E1, E2, epsilon=1e-2, max_iters=1000, tol=1e-6):
    plan = sinkhorn(E1, E2, epsilon, max_iters, tol)
    # argmax returns the first maximum: ties go to the smallest index
    corr = np.argmax(plan.plan, axis=1)
    return Correspondence(corr, _values(E1), "sinkhorn",
                          {"epsilon": epsilon, "iterations": plan.iterations, "converged": plan.converged})


def match(method, E1, E2, src=None, tgt=None, steps=64, **sinkhorn_params):
    """Dispatch on a method tag from :data:`METHODS`."""
    if method == "fuse":
        return match_fuse(src, tgt, E1, E2, steps)
    if method == "knn":
        return match_knn(E1, E2)
    if method == "knn-in-gauss":
        return match_knn_in_gauss(src, tgt, E1, E2, steps)
    if method == "sinkhorn":
        return match_sinkhorn(E1, E2, **sinkhorn_params)
    raise ParameterError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def save_correspondence(corr: Correspondence, path, **sidecar):
    """Two-column CSV (source, target) plus ``<path>.json`` describing the run."""
    path = os.fspath(path)
    with atomic_write(path) as fh:
        fh.write("source,target\n")
        for i, j in enumerate(corr.map):
            fh.write(f"{i},{int(j)}\n")
    meta = {"method": corr.method, "n": corr.n, **corr.meta, **sidecar}
    with atomic_write(path + ".json") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_correspondence(path):
    """Target index per source index, from a correspondence CSV or a one-column file."""
    rows = []
    with open(os.fspath(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("source"):
                continue
            parts = line.replace(",", " ").split()
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise FormatError("non-integer index", lineno) from None
            if len(vals) == 2:
                if vals[0] != len(rows):
                    raise FormatError(f"source index {vals[0]} out of order", lineno)
                rows.append(vals[1])
            elif len(vals) == 1:
                rows.append(vals[0])
            else:
                raise FormatError("expected 1 or 2 columns", lineno)
    return np.array(rows, dtype=np.int64)
