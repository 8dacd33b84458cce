"""Shape containers, file loaders and surface sampling.

Three representations are supported: triangle meshes (OFF/OBJ), point
clouds (whitespace-separated XYZ) and signed distance grids (ASCII
header followed by a float64 little-endian payload, see
:func:`load_sdf_grid`).  All containers are frozen; their arrays are
marked read-only on construction.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ._io import atomic_write, fmt_float
from .errors import (
    EmptySurfaceError,
    FormatError,
    SamplingError,
    TruncationError,
    UnsupportedFaceError,
    ValidationError,
)

DEGENERATE_AREA = 1e-12
SDF_MAGIC = "SDFGRID"
SDF_VERSION = 1


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_landmark_ids(ids, n):
    if len(set(ids.tolist())) != len(ids):
        raise ValidationError("landmark ids must be distinct")
    if len(ids) and (ids.min() < 0 or ids.max() >= n):
        raise ValidationError(f"landmark id out of range [0, {n})")


def triangle_areas(vertices, triangles):
    v = np.asarray(vertices, dtype=float)
    t = np.asarray(triangles)
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        t = _frozen(self.triangles, np.int64)
        lm = _frozen(self.landmark_ids, np.int64).reshape(-1)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be n x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices must be finite")
        t = t.reshape(-1, 3) if t.size else np.zeros((0, 3), dtype=np.int64)
        if len(t) == 0:
            raise ValidationError("mesh has no triangles (no surface)")
        if t.min() < 0 or t.max() >= len(v):
            raise ValidationError(f"triangle index out of range [0, {len(v)})")
        areas = triangle_areas(v, t)
        bad = np.flatnonzero(areas < DEGENERATE_AREA)
        if len(bad):
            raise ValidationError(f"degenerate triangle {int(bad[0])} (area {areas[bad[0]]:.3g})")
        _check_landmark_ids(lm, len(v))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "landmark_ids", lm)

    @property
    def n(self):
        return len(self.vertices)

    @property
    def positions(self):
        return self.vertices

    def areas(self):
        return triangle_areas(self.vertices, self.triangles)

    def area(self):
        return float(self.areas().sum())

    def with_landmarks(self, ids):
        return replace(self, landmark_ids=np.asarray(ids, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        p = _frozen(self.points, np.float64)
        lm = _frozen(self.landmark_ids, np.int64).reshape(-1)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValidationError(f"points must be n x 3, got {p.shape}")
        if len(p) < 4:
            raise ValidationError(f"point cloud needs at least 4 points, got {len(p)}")
        if not np.all(np.isfinite(p)):
            raise ValidationError("points must be finite")
        _check_landmark_ids(lm, len(p))
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "landmark_ids", lm)

    @property
    def n(self):
        return len(self.points)

    @property
    def positions(self):
        return self.points

    def with_landmarks(self, ids):
        return replace(self, landmark_ids=np.asarray(ids, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distances sampled on a regular grid.

    ``values[i, j, k]`` is the distance at ``origin + (i, j, k) * spacing``.
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    landmark_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        origin = _frozen(self.origin, np.float64).reshape(3)
        spacing = _frozen(np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,)), np.float64)
        values = _frozen(self.values, np.float64)
        lm = _frozen(self.landmark_points, np.float64).reshape(-1, 3)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValidationError(f"values must be a 3D array with every dim >= 2, got {values.shape}")
        if np.any(spacing <= 0):
            raise ValidationError("spacing must be positive")
        if not np.all(np.isfinite(values)):
            raise ValidationError("SDF values must be finite")
        if not len(_crossing_voxels(values, spacing)):
            raise EmptySurfaceError("SDF grid has no sign change (empty zero level set)")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "landmark_points", lm)

    @property
    def dims(self):
        return self.values.shape

    @property
    def min_spacing(self):
        return float(self.spacing.min())

    def interpolate(self, points):
        """Trilinear interpolation; points outside the grid are clamped."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        dims = np.array(self.values.shape)
        u = (p - self.origin) / self.spacing
        u = np.clip(u, 0.0, dims - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), dims - 2)
        f = u - i0
        out = np.zeros(len(p))
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    out += wx * wy * wz * self.values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out

    def gradient(self, points):
        """Central differences of the trilinear interpolant, one voxel wide."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        g = np.empty_like(p)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = 0.5 * self.spacing[axis]
            g[:, axis] = (self.interpolate(p + step) - self.interpolate(p - step)) / self.spacing[axis]
        return g

    def voxel_id(self, points):
        dims = np.array(self.values.shape)
        u = (np.atleast_2d(points) - self.origin) / self.spacing
        ijk = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
        return np.ravel_multi_index(ijk.T, tuple(dims - 1))


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Surface samples with a reference back to where each came from.

    ``source_ids`` holds the triangle id (meshes), the point index
    (clouds) or the flat voxel id (SDF grids); ``barycentric`` is only
    set for meshes.
    """

    positions: np.ndarray
    source_ids: np.ndarray
    kind: str
    seed: int
    barycentric: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValidationError("sample positions must be n x 3 with n >= 1")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("sample positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "source_ids", _frozen(self.source_ids, np.int64))
        if self.barycentric is not None:
            bc = _frozen(self.barycentric, np.float64)
            if np.any(bc < 0) or np.any(np.abs(bc.sum(axis=1) - 1.0) > 1e-9):
                raise ValidationError("barycentric coordinates must be nonnegative and sum to 1")
            object.__setattr__(self, "barycentric", bc)

    @property
    def n(self):
        return len(self.positions)


# ----------------------------------------------------------------------------
# loaders


def _tokens(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _floats(tokens, lineno):
    try:
        return [float(x) for x in tokens]
    except ValueError as exc:
        raise FormatError(f"non-numeric token ({exc})", lineno) from None


def _ints(tokens, lineno):
    try:
        return [int(x) for x in tokens]
    except ValueError as exc:
        raise FormatError(f"non-integer token ({exc})", lineno) from None


def load_mesh(path):
    """Read an OFF or OBJ triangle mesh; vertex order is kept from the file."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        vertices, triangles = _read_obj(path)
    else:
        vertices, triangles = _read_off(path)
    return Mesh(np.array(vertices, dtype=float).reshape(-1, 3), np.array(triangles, dtype=np.int64).reshape(-1, 3))


def _read_off(path):
    it = _tokens(path)
    try:
        lineno, toks = next(it)
    except StopIteration:
        raise FormatError("empty file", 1) from None
    if not toks[0].upper().endswith("OFF"):
        raise FormatError("missing OFF header", lineno)
    toks = toks[1:]
    if not toks:
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise FormatError("missing element counts", lineno) from None
    counts = _ints(toks[:3], lineno)
    if len(counts) < 2:
        raise FormatError("expected vertex and face counts", lineno)
    nv, nf = counts[0], counts[1]
    vertices, triangles = [], []
    for _ in range(nv):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise FormatError(f"expected {nv} vertices, got {len(vertices)}", lineno) from None
        xyz = _floats(toks[:3], lineno)
        if len(xyz) != 3:
            raise FormatError("vertex needs 3 coordinates", lineno)
        vertices.append(xyz)
    for _ in range(nf):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise FormatError(f"expected {nf} faces, got {len(triangles)}", lineno) from None
        face = _ints(toks, lineno)
        if face[0] != 3:
            raise UnsupportedFaceError(f"face with {face[0]} vertices (only triangles supported)", lineno)
        if len(face) < 4:
            raise FormatError("truncated face", lineno)
        triangles.append(face[1:4])
    return vertices, triangles


def _read_obj(path):
    vertices, triangles = [], []
    for lineno, toks in _tokens(path):
        tag = toks[0]
        if tag == "v":
            xyz = _floats(toks[1:4], lineno)
            if len(xyz) != 3:
                raise FormatError("vertex needs 3 coordinates", lineno)
            vertices.append(xyz)
        elif tag == "f":
            refs = toks[1:]
            if len(refs) != 3:
                raise UnsupportedFaceError(f"face with {len(refs)} vertices (only triangles supported)", lineno)
            idx = _ints([r.split("/")[0] for r in refs], lineno)
            # OBJ is 1-based; negative indices count back from the last vertex
            triangles.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
    return vertices, triangles


def load_point_cloud(path):
    points = []
    for lineno, toks in _tokens(os.fspath(path)):
        xyz = _floats(toks, lineno)
        if len(xyz) != 3:
            raise FormatError(f"expected 3 coordinates, got {len(xyz)}", lineno)
        points.append(xyz)
    return PointCloud(np.array(points, dtype=float).reshape(-1, 3))


def load_sdf_grid(path):
    """Read an SDF grid file.

    Layout::

        SDFGRID 1
        origin <x> <y> <z>
        spacing <sx> <sy> <sz>
        dims <nx> <ny> <nz>
        encoding binary|ascii
        end
        <nx*ny*nz values, x fastest>

    The binary payload is little-endian float64; the ascii payload is
    whitespace separated.
    """
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    header, fields = {}, {}
    pos, lineno = 0, 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("header not terminated by 'end'", lineno + 1)
        lineno += 1
        line = data[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if lineno == 1 or not header:
            if toks[0] != SDF_MAGIC:
                raise FormatError("missing SDFGRID header", lineno)
            header["version"] = _ints(toks[1:2], lineno)[0] if len(toks) > 1 else SDF_VERSION
            continue
        if toks[0] == "end":
            break
        fields[toks[0]] = (toks[1:], lineno)
    for key in ("origin", "spacing", "dims"):
        if key not in fields:
            raise FormatError(f"header missing '{key}'", lineno)
    origin = _floats(*fields["origin"])
    spacing = _floats(*fields["spacing"])
    dims = _ints(*fields["dims"])
    if len(origin) != 3 or len(dims) != 3 or len(spacing) not in (1, 3):
        raise FormatError("origin/dims need 3 entries, spacing 1 or 3", lineno)
    if min(dims) < 1:
        raise ValidationError("dims must be positive")
    count = int(np.prod(dims))
    encoding = fields.get("encoding", (["binary"], lineno))[0][0]
    payload = data[pos:]
    if encoding == "binary":
        if len(payload) < 8 * count:
            raise TruncationError(f"expected {count} values, got {len(payload) // 8}")
        flat = np.frombuffer(payload[: 8 * count], dtype="<f8").astype(np.float64)
    elif encoding == "ascii":
        try:
            flat = np.array(payload.split(), dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"non-numeric value in payload ({exc})") from None
        if len(flat) < count:
            raise TruncationError(f"expected {count} values, got {len(flat)}")
        flat = flat[:count]
    else:
        raise FormatError(f"unknown encoding {encoding!r}")
    values = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return SdfGrid(np.array(origin), np.array(spacing), values)


def load_landmarks(path):
    """One landmark per line: an integer index, or a 3D point for SDF grids."""
    rows = [(lineno, toks) for lineno, toks in _tokens(os.fspath(path))]
    if not rows:
        raise FormatError("empty landmark file", 1)
    if all(len(toks) == 1 for _, toks in rows):
        return np.array([_ints(toks, lineno)[0] for lineno, toks in rows], dtype=np.int64)
    pts = []
    for lineno, toks in rows:
        xyz = _floats(toks, lineno)
        if len(xyz) != 3:
            raise FormatError("landmark must be an index or 3 coordinates", lineno)
        pts.append(xyz)
    return np.array(pts)


def load_shape(path, landmarks=None):
    """Dispatch on extension: .off/.obj mesh, .sdf grid, anything else XYZ."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext in (".off", ".obj"):
        shape = load_mesh(path)
    elif ext == ".sdf":
        shape = load_sdf_grid(path)
    else:
        shape = load_point_cloud(path)
    if landmarks is None:
        return shape
    lm = load_landmarks(landmarks) if isinstance(landmarks, (str, os.PathLike)) else np.asarray(landmarks)
    if isinstance(shape, SdfGrid):
        if lm.ndim != 2:
            raise ValidationError("SDF landmarks must be 3D points")
        return replace(shape, landmark_points=lm)
    if lm.ndim != 1:
        raise ValidationError("mesh/cloud landmarks must be indices")
    return shape.with_landmarks(lm)


# ----------------------------------------------------------------------------
# writers


def save_mesh(mesh, path):
    with atomic_write(path) as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(fmt_float(c) for c in v) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def save_point_cloud(points, path):
    pts = points.positions if hasattr(points, "positions") else np.asarray(points)
    with atomic_write(path) as fh:
        for p in pts:
            fh.write(" ".join(fmt_float(c) for c in p) + "\n")


def save_sdf_grid(grid, path, encoding="binary"):
    nx, ny, nz = grid.values.shape
    head = (
        f"{SDF_MAGIC} {SDF_VERSION}\n"
        f"origin {' '.join(fmt_float(c) for c in grid.origin)}\n"
        f"spacing {' '.join(fmt_float(c) for c in grid.spacing)}\n"
        f"dims {nx} {ny} {nz}\n"
        f"encoding {encoding}\n"
        "end\n"
    )
    flat = grid.values.transpose(2, 1, 0).ravel()
    with atomic_write(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        if encoding == "binary":
            fh.write(flat.astype("<f8").tobytes())
        else:
            fh.write((" ".join(fmt_float(v) for v in flat) + "\n").encode("ascii"))


def save_landmarks(landmarks, path):
    lm = np.asarray(landmarks)
    with atomic_write(path) as fh:
        for row in lm:
            if lm.ndim == 1:
                fh.write(f"{int(row)}\n")
            else:
                fh.write(" ".join(fmt_float(c) for c in row) + "\n")


# ----------------------------------------------------------------------------
# sampling


def sample_surface(shape, n, seed=0):
    """Draw ``n`` points on the surface of ``shape``.

    Meshes: area-weighted triangle choice then uniform barycentric
    coordinates.  Clouds: indices drawn uniformly with replacement.
    SDF grids: uniform candidates in voxels that straddle the zero set,
    pushed onto it with :func:`project_to_zero_set`.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(shape, Mesh):
        areas = shape.areas()
        cdf = np.cumsum(areas)
        tri = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        tri = np.minimum(tri, len(areas) - 1)
        uv = rng.random((n, 2))
        flip = uv.sum(axis=1) > 1.0
        uv[flip] = 1.0 - uv[flip]
        bc = np.column_stack([1.0 - uv.sum(axis=1), uv])
        bc = np.clip(bc, 0.0, 1.0)
        corners = shape.vertices[shape.triangles[tri]]
        pos = np.einsum("ni,nij->nj", bc, corners)
        return SampleSet(pos, tri, "mesh", seed, barycentric=bc)
    if isinstance(shape, PointCloud):
        idx = rng.integers(0, shape.n, size=n)
        return SampleSet(shape.points[idx], idx, "cloud", seed)
    if isinstance(shape, SdfGrid):
        return _sample_sdf(shape, n, rng, seed)
    raise TypeError(f"cannot sample {type(shape).__name__}")


def _crossing_voxels(values, spacing):
    """Flat ids of voxels whose corner values change sign.

    Voxels with any corner farther than the voxel diagonal are dropped:
    for a true distance field that never happens at a crossing, so these
    are sign jumps (e.g. past the boundary of an open surface), not zeros.
    """
    corners = [values[dx:values.shape[0] - 1 + dx, dy:values.shape[1] - 1 + dy, dz:values.shape[2] - 1 + dz]
               for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    stack = np.stack(corners)
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    diag = float(np.linalg.norm(spacing))
    ok = (lo <= 0) & (hi >= 0) & (lo < hi) & (np.abs(stack).max(axis=0) <= diag)
    return np.flatnonzero(ok.ravel())


def project_to_zero_set(grid, points, max_iter=20, tol=None):
    """Move points onto f = 0 by p <- p - f grad f / |grad f|^2.

    Returns (projected points, converged mask).
    """
    tol = 1e-3 * grid.min_spacing if tol is None else tol
    p = np.array(points, dtype=float)
    active = np.ones(len(p), dtype=bool)
    converged = np.zeros(len(p), dtype=bool)
    lo = grid.origin
    hi = grid.origin + grid.spacing * (np.array(grid.values.shape) - 1)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        f = grid.interpolate(p[idx])
        done = np.abs(f) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        idx, f = idx[~done], f[~done]
        if not len(idx):
            break
        g = grid.gradient(p[idx])
        g2 = np.einsum("ij,ij->i", g, g)
        flat = g2 < 1e-12
        active[idx[flat]] = False
        idx, f, g, g2 = idx[~flat], f[~flat], g[~flat], g2[~flat]
        p[idx] -= (f / g2)[:, None] * g
        outside = np.any((p[idx] < lo) | (p[idx] > hi), axis=1)
        active[idx[outside]] = False
    return p, converged


def _sample_sdf(grid, n, rng, seed, max_failure=0.10):
    voxels = _crossing_voxels(grid.values, grid.spacing)
    vdims = tuple(np.array(grid.values.shape) - 1)
    kept, kept_vox = [], []
    total = failed = 0
    need = n
    while need > 0:
        m = int(np.ceil(need * 1.15)) + 8
        vox = voxels[rng.integers(0, len(voxels), size=m)]
        ijk = np.column_stack(np.unravel_index(vox, vdims))
        cand = grid.origin + (ijk + rng.random((m, 3))) * grid.spacing
        proj, ok = project_to_zero_set(grid, cand)
        total += m
        failed += int((~ok).sum())
        if failed > max_failure * total:
            raise SamplingError(f"zero-set projection failed on {failed}/{total} candidates")
        proj = proj[ok][:need]
        kept.append(proj)
        kept_vox.append(grid.voxel_id(proj))
        need -= len(proj)
    pos = np.concatenate(kept)
    if failed:
        warnings.warn(f"SDF sampling: {failed}/{total} candidates failed to project", stacklevel=3)
    return SampleSet(pos, np.concatenate(kept_vox), "sdf", seed)


def snap_to_samples(samples, points):
    """Index of the sample nearest to each query point."""
    pos = samples.positions if hasattr(samples, "positions") else np.asarray(samples)
    _, idx = cKDTree(pos).query(np.atleast_2d(points))
    return np.asarray(idx, dtype=np.int64)


# ----------------------------------------------------------------------------
# mesh -> signed distance


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, row-wise.

    Region tests follow Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    take((d1 <= 0) & (d2 <= 0), a)
    take((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        take(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def _incident_triangles(n_vertices, triangles):
    """(n_vertices, max_valence) table of incident triangle ids, -1 padded."""
    flat = triangles.ravel()
    order = np.argsort(flat, kind="stable")
    vert_of = flat[order]
    counts = np.bincount(vert_of, minlength=n_vertices)
    table = -np.ones((n_vertices, counts.max()), dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    table[vert_of, np.arange(len(order)) - starts[vert_of]] = order // 3
    return table


def _signed_distance_to_candidates(p, cand, V, T, normals):
    best_d2 = np.full(len(p), np.inf)
    best_sign = np.ones(len(p))
    best_align = np.full(len(p), -1.0)
    for col in range(cand.shape[1]):
        tri = cand[:, col]
        rows = np.flatnonzero(tri >= 0)
        if not len(rows):
            continue
        t = tri[rows]
        q = closest_point_on_triangles(p[rows], V[T[t, 0]], V[T[t, 1]], V[T[t, 2]])
        diff = p[rows] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        dot = np.einsum("ij,ij->i", diff, normals[t])
        align = np.abs(dot) / np.sqrt(np.maximum(d2, 1e-300))
        # on ties (edges/vertices shared by several faces) keep the face
        # whose normal is most aligned with the offset
        prev = best_d2[rows]
        better = d2 < prev * (1 - 1e-9)
        tie = ~better & (d2 <= prev * (1 + 1e-9)) & (align > best_align[rows])
        upd = better | tie
        r = rows[upd]
        best_d2[r] = np.minimum(d2[upd], prev[upd])
        best_sign[r] = np.where(dot[upd] >= 0, 1.0, -1.0)
        best_align[r] = align[upd]
    return best_sign * np.sqrt(best_d2)


def mesh_signed_distance(mesh, points, k=16, band=None, chunk=20000):
    """Signed distance from points to a triangle mesh.

    Candidate triangles are those incident to the ``k`` nearest vertices,
    which is exact for well-shaped meshes near the surface.  Points farther
    than ``band`` from every vertex only look at the nearest vertex's
    triangles.  The sign comes from the normal of the closest triangle
    (positive on the normal side), so open surfaces get a two-sided field.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    V, T = mesh.vertices, mesh.triangles
    normals = np.cross(V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    incident = _incident_triangles(len(V), T)
    tree = cKDTree(V)
    k = min(k, len(V))
    if band is None:
        band = np.inf
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        dv, nn = tree.query(p, k=1)
        near = np.flatnonzero(dv <= band)
        far = np.flatnonzero(dv > band)
        res = np.empty(len(p))
        if len(far):
            res[far] = _signed_distance_to_candidates(p[far], incident[nn[far]], V, T, normals)
        if len(near):
            _, knn = tree.query(p[near], k=k)
            cand = incident[knn.reshape(len(near), -1)].reshape(len(near), -1)
            res[near] = _signed_distance_to_candidates(p[near], cand, V, T, normals)
        out[s:s + chunk] = res
    return out


def mesh_to_sdf(mesh, resolution=64, padding=4, landmark_points=None):
    """Voxelize a mesh into a cubic-voxel SDF grid of ``resolution``^3 nodes."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    h = extent / (resolution - 1 - 2 * padding)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * h * (resolution - 1)
    ax = origin[:, None] + h * np.arange(resolution)[None, :]
    X, Y, Z = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    edge = np.linalg.norm(mesh.vertices[mesh.triangles] - mesh.vertices[np.roll(mesh.triangles, 1, axis=1)], axis=2)
    band = 3.0 * h + float(edge.max())
    values = mesh_signed_distance(mesh, pts, band=band).reshape(resolution, resolution, resolution)
    if landmark_points is None:
        landmark_points = mesh.vertices[mesh.landmark_ids]
    return SdfGrid(origin, np.full(3, h), values, landmark_points)
