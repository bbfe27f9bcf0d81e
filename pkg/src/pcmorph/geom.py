"""Geometry types, mesh/point file I/O, normalization, sampling and neighbor search.

Point clouds are stored as ``(n, 3)`` float64 arrays wrapped in small immutable
containers. Row order is meaningful: row ``i`` is the identity of point ``i``
through every transformation, which is what makes mesh export possible.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LEAF_SIZE = 16


class GeometryError(ValueError):
    """Invalid geometric input (degenerate cloud, bad graph, etc.)."""


class MeshParseError(ValueError):
    """Malformed mesh or point file. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"point cloud must have shape (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(verts)):
            raise GeometryError("mesh has non-finite vertex coordinates")
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(verts):
                raise GeometryError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise GeometryError("face with repeated vertex index")
        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "faces", _frozen(faces))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces))

    __hash__ = None


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric adjacency over point indices; ``adjacency[i]`` is sorted ascending."""

    adjacency: tuple

    def __post_init__(self):
        adj = tuple(_frozen(np.asarray(a, dtype=np.int64)) for a in self.adjacency)
        n = len(adj)
        sets = [set(a.tolist()) for a in adj]
        for i, s in enumerate(sets):
            if not s:
                raise GeometryError(f"index {i} has no neighbors")
            if i in s:
                raise GeometryError(f"self-loop at index {i}")
            for j in s:
                if not 0 <= j < n:
                    raise GeometryError(f"neighbor index {j} out of range")
                if i not in sets[j]:
                    raise GeometryError(f"asymmetric adjacency between {i} and {j}")
        object.__setattr__(self, "adjacency", adj)

    def __len__(self) -> int:
        return len(self.adjacency)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborGraph):
            return NotImplemented
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.adjacency, other.adjacency))

    __hash__ = None

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All ``(i, j)`` with ``j in N(i)``, ordered by ``i`` then ``j``.

        Each undirected edge shows up twice, once from each endpoint.
        """
        src = np.concatenate([np.full(len(a), i, dtype=np.int64)
                              for i, a in enumerate(self.adjacency)])
        dst = np.concatenate(self.adjacency)
        return src, dst


@dataclass(frozen=True)
class NormTransform:
    """Maps raw coordinates ``x`` to ``(x - translation) / scale``."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise GeometryError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation


def sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every row of ``points`` to ``q``.

    The component sum is spelled out (x, then y, then z) so every caller in the
    package produces bit-identical distances for the same pair of points.
    """
    d = points - q
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


# --------------------------------------------------------------------------
# File formats


def _text_lines(data) -> list[str]:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("ascii", errors="strict")
    return data.splitlines()


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _drop_degenerate(faces: list[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    kept = [f for f in faces if len(set(f)) == 3]
    if len(kept) != len(faces):
        log.warning("dropped %d degenerate triangles", len(faces) - len(kept))
    return kept


def load_off(data: bytes | str) -> TriMesh:
    """Parse an ASCII OFF document. Polygons are fan-triangulated."""
    lines = _text_lines(data)
    # (lineno, tokens) with comments and blank lines removed
    rows = []
    for no, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            rows.append((no, text.split()))
    last_line = len(lines)
    if not rows or not rows[0][1][0].startswith("OFF"):
        raise MeshParseError("missing OFF header", rows[0][0] if rows else 1)
    head_no, head = rows[0]
    # ModelNet ships some files with the counts glued onto the header ("OFF490 518 0")
    rest = [head[0][3:]] + head[1:] if head[0] != "OFF" else head[1:]
    rest = [t for t in rest if t]
    pos = 1
    if rest:
        counts_no, counts = head_no, rest
    else:
        if len(rows) < 2:
            raise MeshParseError("missing counts line", last_line)
        counts_no, counts = rows[1]
        pos = 2
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshParseError("malformed counts line", counts_no) from None
    if nv < 0 or nf < 0:
        raise MeshParseError("negative element count", counts_no)

    verts = []
    for k in range(nv):
        if pos >= len(rows):
            raise MeshParseError(
                f"unexpected end of file: header declares {nv} vertices, found {k}",
                last_line)
        no, toks = rows[pos]
        pos += 1
        if len(toks) != 3:
            raise MeshParseError(f"expected 3 vertex coordinates, got {len(toks)}", no)
        try:
            verts.append([float(t) for t in toks])
        except ValueError:
            raise MeshParseError("non-numeric vertex coordinate", no) from None

    faces = []
    for k in range(nf):
        if pos >= len(rows):
            raise MeshParseError(
                f"unexpected end of file: header declares {nf} faces, found {k}",
                last_line)
        no, toks = rows[pos]
        pos += 1
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise MeshParseError("non-integer face entry", no) from None
        m = vals[0]
        if m < 3 or len(vals) < m + 1:
            raise MeshParseError(f"face declares {m} vertices, line has {len(vals) - 1}", no)
        poly = vals[1:m + 1]
        for idx in poly:
            if not 0 <= idx < nv:
                raise MeshParseError(f"face index {idx} out of range [0, {nv})", no)
        faces.extend(_fan(poly))
    if pos < len(rows):
        raise MeshParseError("trailing data after declared elements", rows[pos][0])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(_drop_degenerate(faces), dtype=np.int64).reshape(-1, 3))


def load_obj(data: bytes | str) -> TriMesh:
    """Parse ASCII OBJ ``v``/``f`` records; other record types are ignored."""
    verts = []
    pending = []  # (lineno, polygon with raw 1-based or negative indices, vcount at line)
    for no, raw in enumerate(_text_lines(data), start=1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] == "v":
            if len(toks) < 4:
                raise MeshParseError("vertex record needs 3 coordinates", no)
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError:
                raise MeshParseError("non-numeric vertex coordinate", no) from None
        elif toks[0] == "f":
            if len(toks) < 4:
                raise MeshParseError("face record needs at least 3 vertices", no)
            try:
                poly = [int(t.split("/", 1)[0]) for t in toks[1:]]
            except ValueError:
                raise MeshParseError("malformed face index", no) from None
            pending.append((no, poly, len(verts)))

    nv = len(verts)
    faces = []
    for no, poly, seen in pending:
        resolved = []
        for idx in poly:
            if idx < 0:
                idx = seen + idx + 1
            if idx < 1 or idx > nv:
                raise MeshParseError(f"face index {idx} out of range [1, {nv}]", no)
            resolved.append(idx - 1)
        faces.extend(_fan(resolved))
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(_drop_degenerate(faces), dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriMesh:
    """Load an OFF or OBJ file, dispatching on extension."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if path.lower().endswith(".obj"):
        return load_obj(data)
    return load_off(data)


def write_obj(mesh: TriMesh, comment: str | None = None) -> bytes:
    out = io.StringIO()
    if comment:
        out.write(f"# {comment}\n")
    for x, y, z in mesh.vertices:
        out.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
    for a, b, c in mesh.faces:
        out.write(f"f {a + 1} {b + 1} {c + 1}\n")
    return out.getvalue().encode("ascii")


def write_off(mesh: TriMesh) -> bytes:
    out = io.StringIO()
    out.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for x, y, z in mesh.vertices:
        out.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
    for a, b, c in mesh.faces:
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue().encode("ascii")


def write_ply_points(cloud: PointCloud, comment: str | None = None) -> bytes:
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    if comment:
        out.write(f"comment {comment}\n")
    out.write(f"element vertex {len(cloud)}\n")
    out.write("property double x\nproperty double y\nproperty double z\nend_header\n")
    for x, y, z in cloud.points:
        out.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
    return out.getvalue().encode("ascii")


def read_ply_points(data: bytes | str) -> PointCloud:
    """Read the x, y, z vertex columns of an ASCII PLY file."""
    lines = _text_lines(data)
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing ply magic", 1)
    n = None
    props = []
    in_vertex = False
    body = None
    for no, raw in enumerate(lines[1:], start=2):
        toks = raw.split()
        if not toks:
            continue
        if toks[0] == "format" and toks[1:2] != ["ascii"]:
            raise MeshParseError("only ASCII PLY is supported", no)
        if toks[0] == "element":
            in_vertex = toks[1] == "vertex"
            if in_vertex:
                n = int(toks[2])
        elif toks[0] == "property" and in_vertex:
            props.append(toks[-1])
        elif toks[0] == "end_header":
            body = no
            break
    if n is None or body is None:
        raise MeshParseError("PLY header lacks vertex element or end_header", len(lines))
    try:
        cols = [props.index(c) for c in "xyz"]
    except ValueError:
        raise MeshParseError("PLY vertex element lacks x/y/z properties", body) from None
    pts = []
    for k in range(n):
        no = body + 1 + k
        if no > len(lines):
            raise MeshParseError(f"expected {n} vertex lines, found {k}", len(lines))
        toks = lines[no - 1].split()
        try:
            pts.append([float(toks[c]) for c in cols])
        except (ValueError, IndexError):
            raise MeshParseError("malformed vertex line", no) from None
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


# --------------------------------------------------------------------------
# Normalization and sampling


def normalize_unit_sphere(cloud: PointCloud) -> tuple[PointCloud, NormTransform]:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points
    centroid = pts.mean(axis=0)
    radius = float(np.sqrt(sqdist(pts - centroid, np.zeros(3)).max()))
    if not radius > 0:
        raise GeometryError("degenerate cloud: all points coincide (zero radius)")
    tf = NormTransform(centroid, radius)
    return PointCloud(tf.apply(pts)), tf


def sample_points(mesh: TriMesh, n: int, seed: int = 0) -> tuple[PointCloud, np.ndarray]:
    """Draw ``n`` points from ``mesh``.

    Returns the cloud and a ``source_map`` holding the mesh vertex index of each
    point, or -1 for points sampled from face interiors. With ``n`` equal to the
    vertex count the result is exactly the vertex list (the mode mesh export
    relies on).
    """
    verts = mesh.vertices
    nv = len(verts)
    if nv == 0:
        raise GeometryError("mesh has no vertices")
    if n < 1:
        raise GeometryError(f"sample count must be >= 1, got {n}")
    if n == nv:
        return PointCloud(verts), np.arange(nv, dtype=np.int64)
    if n < nv:
        chosen, seen = [], set()
        for i, v in enumerate(map(tuple, verts)):
            if v not in seen:
                seen.add(v)
                chosen.append(i)
                if len(chosen) == n:
                    break
        if len(chosen) < n:
            raise GeometryError(f"mesh has only {len(chosen)} distinct vertices, need {n}")
        idx = np.array(chosen, dtype=np.int64)
        return PointCloud(verts[idx]), idx

    extra = n - nv
    if len(mesh.faces) == 0:
        raise GeometryError("cannot sample beyond the vertex count of a mesh without faces")
    rng = np.random.default_rng(seed)
    tri = verts[mesh.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero surface area")
    pick = rng.choice(len(areas), size=extra, p=areas / total)
    r1, r2 = rng.random(extra), rng.random(extra)
    u = np.sqrt(r1)
    w = np.stack([1.0 - u, u * (1.0 - r2), u * r2], axis=1)
    samples = np.einsum("kj,kjd->kd", w, tri[pick])
    pts = np.concatenate([verts, samples])
    src = np.concatenate([np.arange(nv, dtype=np.int64), np.full(extra, -1, dtype=np.int64)])
    return PointCloud(pts), src


# --------------------------------------------------------------------------
# Neighbor graphs


def mesh_edge_graph(mesh: TriMesh) -> NeighborGraph:
    """1-ring adjacency: ``j in N(i)`` iff ``(i, j)`` is an edge of some face."""
    nv = len(mesh.vertices)
    nbrs = [set() for _ in range(nv)]
    for a, b, c in mesh.faces.tolist():
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    isolated = [i for i, s in enumerate(nbrs) if not s]
    if isolated:
        raise GeometryError(
            f"{len(isolated)} vertices belong to no face (first: {isolated[0]})")
    return NeighborGraph(tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs))


def knn_graph(cloud: PointCloud, k: int) -> NeighborGraph:
    """k-nearest-neighbor graph symmetrized by union (degrees may exceed k)."""
    pts = cloud.points
    n = len(pts)
    if not 1 <= k < n:
        raise GeometryError(f"k must satisfy 1 <= k < n={n}, got {k}")
    nbrs = [set() for _ in range(n)]
    for i in range(n):
        d = sqdist(pts, pts[i])
        d[i] = np.inf
        # stable sort keeps lower indices first among equal distances
        for j in np.argsort(d, kind="stable")[:k].tolist():
            nbrs[i].add(j)
            nbrs[j].add(i)
    return NeighborGraph(tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs))


# --------------------------------------------------------------------------
# kd-tree


@dataclass(frozen=True, eq=False)
class KdIndex:
    """Median-split kd-tree over a fixed point set.

    Nodes are stored in flat arrays. ``axis[k] == -1`` marks a leaf covering
    ``order[lo[k]:hi[k]]``; otherwise ``left[k]``/``right[k]`` are children and
    ``split[k]`` is the coordinate of the median point on ``axis[k]``.
    """

    points: np.ndarray
    order: np.ndarray
    axis: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    _leaf_pts: list = field(default_factory=list, repr=False)


def build_kdtree(cloud: PointCloud, leaf_size: int = LEAF_SIZE) -> KdIndex:
    pts = cloud.points
    order = np.arange(len(pts), dtype=np.int64)
    axis, split, left, right, lo, hi = [], [], [], [], [], []

    def new_node():
        for arr in (axis, split, left, right, lo, hi):
            arr.append(0)
        return len(axis) - 1

    stack = [(new_node(), 0, len(pts))]
    while stack:
        k, a, b = stack.pop()
        lo[k], hi[k] = a, b
        if b - a <= leaf_size:
            axis[k], left[k], right[k] = -1, -1, -1
            continue
        idx = order[a:b]
        sub = pts[idx]
        ax = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        # sort by coordinate, ties by point index, so the build is deterministic
        srt = np.lexsort((idx, sub[:, ax]))
        order[a:b] = idx[srt]
        mid = a + (b - a) // 2
        axis[k] = ax
        split[k] = pts[order[mid], ax]
        l, r = new_node(), new_node()
        left[k], right[k] = l, r
        stack.append((r, mid, b))
        stack.append((l, a, mid))

    axis_a = np.array(axis, dtype=np.int64)
    lo_a, hi_a = np.array(lo, dtype=np.int64), np.array(hi, dtype=np.int64)
    leaf_pts = [pts[order[lo_a[k]:hi_a[k]]] if axis_a[k] == -1 else None
                for k in range(len(axis_a))]
    return KdIndex(pts, order, axis_a, np.array(split, dtype=np.float64),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   lo_a, hi_a, leaf_pts)


def nearest(index: KdIndex, query) -> tuple[int, float]:
    """Nearest stored point to ``query`` as ``(point_index, squared_distance)``.

    Agrees exactly with an exhaustive scan, including the lower-index tie rule.
    """
    q = np.asarray(query, dtype=np.float64)
    best_d, best_i = np.inf, -1
    axis, split, left, right = index.axis, index.split, index.left, index.right
    order, lo, hi, leaf_pts = index.order, index.lo, index.hi, index._leaf_pts
    stack = [(0, 0.0)]
    while stack:
        k, bound = stack.pop()
        if bound > best_d:
            continue
        ax = axis[k]
        if ax == -1:
            d = sqdist(leaf_pts[k], q)
            m = d.min()
            if m <= best_d:
                ids = order[lo[k]:hi[k]]
                i = int(ids[d == m].min())
                if m < best_d or i < best_i:
                    best_d, best_i = float(m), i
            continue
        diff = q[ax] - split[k]
        plane = diff * diff
        # points with coordinate == split may sit on either side
        if diff <= 0:
            near, far = left[k], right[k]
        else:
            near, far = right[k], left[k]
        stack.append((far, max(bound, plane)))
        stack.append((near, bound))
    return best_i, best_d


def nearest_many(index: KdIndex, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of :func:`nearest` over the rows of ``queries``."""
    queries = np.asarray(queries, dtype=np.float64)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for r, q in enumerate(queries):
        idx[r], dist[r] = nearest(index, q)
    return idx, dist


def nearest_scan(points: np.ndarray, query) -> tuple[int, float]:
    """Exhaustive nearest-point search; the reference for :func:`nearest`."""
    d = sqdist(points, np.asarray(query, dtype=np.float64))
    i = int(np.argmin(d))
    return i, float(d[i])
