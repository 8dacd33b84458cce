"""Pointwise embeddings and their standardization."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._io import atomic_write, fmt_float
from .errors import FormatError, ValidationError
from .geodesics import GeodesicGraph, landmark_distances
from .geometry import Mesh, PointCloud, SampleSet

MIN_SCALE = 1e-8
KINDS = ("geodesic", "xyz")


@dataclass(frozen=True, eq=False)
class NormalizationTransform:
    """Per-dimension affine map ``y = (x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        shift = np.array(self.shift, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float).reshape(-1)
        if shift.shape != scale.shape:
            raise ValidationError("shift and scale must have the same length")
        if np.any(scale < MIN_SCALE) or not np.all(np.isfinite(scale)):
            raise ValidationError(f"scale entries must be finite and >= {MIN_SCALE}")
        shift.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    @property
    def d(self):
        return len(self.shift)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def invert(self, y):
        return np.asarray(y, dtype=float) * self.scale + self.shift

    def then(self, other):
        """Transform equivalent to applying ``self`` and then ``other``."""
        return NormalizationTransform(self.shift + self.scale * other.shift, self.scale * other.scale)

    def to_dict(self):
        return {"shift": [float(x) for x in self.shift], "scale": [float(x) for x in self.scale]}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["shift"], dtype=float), np.array(data["scale"], dtype=float))

    def allclose(self, other, rtol=1e-12):
        return (self.d == other.d and np.allclose(self.shift, other.shift, rtol=rtol, atol=rtol)
                and np.allclose(self.scale, other.scale, rtol=rtol, atol=0))


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """n x d feature matrix.

    ``norm`` is the transform that produced ``values`` from the raw
    features, or None when the values are raw.
    """

    values: np.ndarray
    kind: str
    landmark_count: int = 0
    norm: NormalizationTransform | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValidationError(f"embedding must be 2D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding entries must be finite")
        if self.kind not in KINDS:
            raise ValidationError(f"unknown embedding kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "geodesic" and v.shape[1] != self.landmark_count:
            raise ValidationError("geodesic embedding width must equal the landmark count")
        if self.kind == "xyz" and v.shape[1] != 3:
            raise ValidationError("xyz embedding must have 3 columns")
        if self.norm is not None and self.norm.d != v.shape[1]:
            raise ValidationError("normalization width does not match embedding")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def standardized(self):
        return self.norm is not None

    def raw(self):
        return self.values if self.norm is None else self.norm.invert(self.values)


def geodesic_embedding(graph: GeodesicGraph, landmarks=None) -> EmbeddingMatrix:
    """Row i holds the geodesic distances from node i to each landmark, in order."""
    lm = graph.landmarks if landmarks is None else np.asarray(landmarks, dtype=np.int64)
    if len(lm) < 2:
        warnings.warn("geodesic embedding with fewer than 2 landmarks gives a 1D flow", stacklevel=2)
    values = landmark_distances(graph, lm)
    return EmbeddingMatrix(values, "geodesic", landmark_count=len(lm))


def xyz_embedding(shape) -> EmbeddingMatrix:
    if isinstance(shape, (Mesh, PointCloud, SampleSet, GeodesicGraph)):
        pos = shape.node_positions if isinstance(shape, GeodesicGraph) else shape.positions
    else:
        pos = np.asarray(shape, dtype=float)
    return EmbeddingMatrix(pos, "xyz")


def fit_standardization(values):
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise ValidationError("standardization needs at least 2 rows")
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    small = std < MIN_SCALE
    if small.any():
        warnings.warn(f"zero-variance dimensions {np.flatnonzero(small).tolist()} clamped to scale {MIN_SCALE}",
                      stacklevel=2)
        std = np.where(small, MIN_SCALE, std)
    return NormalizationTransform(mean, std)


def standardize(E: EmbeddingMatrix) -> EmbeddingMatrix:
    """Zero mean, unit (population) variance per column.

    When ``E`` is already standardized the new step is composed onto its
    existing transform, so ``result.norm`` always maps raw features.
    """
    step = fit_standardization(E.values)
    norm = step if E.norm is None else E.norm.then(step)
    return replace(E, values=step.apply(E.values), norm=norm)


def save_embedding(E: EmbeddingMatrix, path):
    """CSV with a one-line ``#``-prefixed JSON header (kind, d, n, transform)."""
    head = {"kind": E.kind, "d": E.d, "n": E.n, "landmark_count": E.landmark_count,
            "transform": None if E.norm is None else E.norm.to_dict()}
    with atomic_write(os.fspath(path)) as fh:
        fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
        for row in E.values:
            fh.write(",".join(fmt_float(x) for x in row) + "\n")


def load_embedding(path) -> EmbeddingMatrix:
    with open(os.fspath(path)) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise FormatError("missing embedding header", 1)
        try:
            head = json.loads(first[1:])
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad embedding header: {exc}", 1) from None
        rows = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise FormatError("non-numeric value", lineno) from None
    values = np.array(rows, dtype=float).reshape(-1, head["d"]) if rows else np.zeros((0, head["d"]))
    if len(values) != head["n"]:
        raise FormatError(f"header says n={head['n']} but file has {len(values)} rows")
    norm = None if head.get("transform") is None else NormalizationTransform.from_dict(head["transform"])
    return EmbeddingMatrix(values, head["kind"], head.get("landmark_count", 0), norm)
