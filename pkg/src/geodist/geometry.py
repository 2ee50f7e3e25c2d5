"""Triangle meshes: OBJ loading, normalization, surface sampling, distance queries."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Malformed or unusable mesh input."""


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, zero-based
    colors: np.ndarray | None = None  # (V, 3) per-vertex color, optional

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError(f"face index out of range for {len(v)} vertices")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face with repeated vertex index")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.ascontiguousarray(self.colors, dtype=np.float64)
            if c.shape != v.shape:
                raise MeshError("colors must match vertices in shape")
            object.__setattr__(self, "colors", c)
        v.flags.writeable = False
        f.flags.writeable = False

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def channels(self) -> int:
        return 3 if self.colors is None else 6

    def face_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.faces)

    def area(self) -> float:
        return float(self.face_areas().sum())


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def drop_degenerate(mesh: Mesh, threshold: float = DEGENERATE_AREA) -> Mesh:
    areas = mesh.face_areas()
    keep = areas >= threshold
    n_bad = int((~keep).sum())
    if n_bad == len(keep):
        raise MeshError("mesh has zero total area")
    if n_bad:
        log.warning("dropped %d degenerate faces", n_bad)
        return Mesh(mesh.vertices, mesh.faces[keep], mesh.colors)
    return mesh


# --------------------------------------------------------------------------
# OBJ


def parse_obj(text: str, source: str = "<string>") -> Mesh:
    verts: list[list[float]] = []
    cols: list[list[float] | None] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            try:
                vals = [float(t) for t in parts[1:]]
            except ValueError:
                raise MeshError(f"{source}:{lineno}: bad vertex record {raw!r}") from None
            if len(vals) in (3, 4):
                verts.append(vals[:3])
                cols.append(None)
            elif len(vals) in (6, 7):
                verts.append(vals[:3])
                cols.append(vals[3:6] if len(vals) == 6 else vals[4:7])
            else:
                raise MeshError(f"{source}:{lineno}: vertex needs 3 or 6 values, got {len(vals)}")
        elif tag == "f":
            if len(parts) < 4:
                raise MeshError(f"{source}:{lineno}: face needs at least 3 vertices")
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/", 1)[0])
                except ValueError:
                    raise MeshError(f"{source}:{lineno}: bad face index {tok!r}") from None
                if i == 0:
                    raise MeshError(f"{source}:{lineno}: OBJ indices are 1-based, got 0")
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise MeshError(f"{source}:{lineno}: face index {tok} out of range ({len(verts)} vertices)")
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not faces:
        raise MeshError(f"{source}: empty mesh ({len(verts)} vertices, {len(faces)} faces)")
    v = np.asarray(verts, dtype=np.float64)
    colors = None
    if all(c is not None for c in cols):
        colors = np.asarray(cols, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if repeated.any():
        log.warning("dropped %d faces with repeated vertices", int(repeated.sum()))
        f = f[~repeated]
        if len(f) == 0:
            raise MeshError(f"{source}: no valid faces")
    mesh = Mesh(v, f, colors)
    diag2 = float(np.sum((v.max(0) - v.min(0)) ** 2))
    return drop_degenerate(mesh, DEGENERATE_AREA * max(diag2, 1e-300))


def load_mesh(path) -> Mesh:
    """Read a Wavefront OBJ; polygons are fan-triangulated, degenerate faces dropped."""
    path = Path(path)
    return parse_obj(path.read_text(), str(path))


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        rows = mesh.vertices if mesh.colors is None else np.hstack([mesh.vertices, mesh.colors])
        for row in rows.tolist():
            fh.write("v " + " ".join(repr(x) for x in row) + "\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# --------------------------------------------------------------------------
# test shapes


def icosphere(subdivisions: int = 5, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected to a sphere (20 * 4^k faces)."""
    t = (1 + 5**0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = np.asarray(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.asarray(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mids = v[uniq[:, 0]] + v[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        v = np.concatenate([v, mids])
        f = np.concatenate([
            np.stack([f[:, 0], m[:, 0], m[:, 2]], 1),
            np.stack([f[:, 1], m[:, 1], m[:, 0]], 1),
            np.stack([f[:, 2], m[:, 2], m[:, 1]], 1),
            m,
        ])
    return Mesh(v * radius, f)


def torus(major: float = 1.0, minor: float = 0.4, n_major: int = 96, n_minor: int = 48) -> Mesh:
    u = np.arange(n_major) * (2 * np.pi / n_major)
    w = np.arange(n_minor) * (2 * np.pi / n_minor)
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    f = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return Mesh(v, f)


# --------------------------------------------------------------------------
# sampling and normalization


def sample_surface(mesh: Mesh, n: int, seed=0) -> np.ndarray:
    """``n`` points uniform w.r.t. surface area, shape (n, 3) or (n, 6) with colors.

    ``seed`` is anything ``np.random.default_rng`` accepts; equal seeds give
    bit-identical output.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    np.minimum(face, len(areas) - 1, out=face)
    uv = rng.random((n, 2))
    fold = uv.sum(axis=1) > 1
    uv[fold] = 1 - uv[fold]
    u, v = uv[:, :1], uv[:, 1:]
    f = mesh.faces[face]
    a, b, c = (mesh.vertices[f[:, i]] for i in range(3))
    pts = a + u * (b - a) + v * (c - a)
    if mesh.colors is None:
        return pts
    ca, cb, cc = (mesh.colors[f[:, i]] for i in range(3))
    return np.concatenate([pts, ca + u * (cb - ca) + v * (cc - ca)], axis=1)


@dataclass(frozen=True)
class Normalization:
    """Global scalar shift and scale: ``normalized = (x - shift) / scale``."""

    shift: float
    scale: float

    @property
    def shift_vector(self) -> np.ndarray:
        return np.full(3, self.shift)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=np.float64, copy=True)
        out[:, :3] = (out[:, :3] - self.shift) / self.scale
        return out

    def invert(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=np.float64, copy=True)
        out[:, :3] = out[:, :3] * self.scale + self.shift
        return out

    def to_dict(self) -> dict:
        return {"shift": self.shift, "scale": self.scale}


IDENTITY = Normalization(0.0, 1.0)


def normalize_mesh(mesh: Mesh, n_norm_samples: int = 10_000_000, seed=0) -> tuple[Mesh, np.ndarray, float]:
    """Shift by the mean and divide by the std of all sampled coordinates.

    Both statistics are scalars over every entry of the (n, 3) sample, so the
    shift is the same on all three axes.
    """
    norm = normalization_transform(mesh, n_norm_samples, seed)
    verts = (mesh.vertices - norm.shift) / norm.scale
    out = drop_degenerate(Mesh(verts, mesh.faces, mesh.colors))
    return out, norm.shift_vector, norm.scale


def normalization_transform(mesh: Mesh, n_norm_samples: int = 10_000_000, seed=0) -> Normalization:
    if n_norm_samples < 1000:
        raise ValueError("n_norm_samples must be >= 1000")
    if mesh.area() <= 0:
        raise MeshError("mesh has zero total area")
    pts = sample_surface(Mesh(mesh.vertices, mesh.faces), n_norm_samples, seed)
    return Normalization(float(pts.mean()), float(pts.std()))


# --------------------------------------------------------------------------
# closest point queries


@numba.njit(cache=True)
def _closest_on_segment(px, py, pz, ax, ay, az, bx, by, bz):
    dx, dy, dz = bx - ax, by - ay, bz - az
    dd = dx * dx + dy * dy + dz * dz
    t = 0.0
    if dd > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / dd
        t = min(max(t, 0.0), 1.0)
    return ax + t * dx, ay + t * dy, az + t * dz


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # Voronoi-region walk over vertices, edges, then the face interior.
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0 and d1 - d3 > 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0 and d2 - d6 > 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0 and (d4 - d3) + (d5 - d6) > 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = va + vb + vc
    if denom > 0.0:
        v = vb / denom
        w = vc / denom
        if v >= 0.0 and w >= 0.0 and v + w <= 1.0:
            return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w
    # Degenerate (collinear) triangle or rounding: best of the three edges.
    best = (ax, ay, az)
    bd = np.inf
    for k in range(3):
        if k == 0:
            q = _closest_on_segment(px, py, pz, ax, ay, az, bx, by, bz)
        elif k == 1:
            q = _closest_on_segment(px, py, pz, bx, by, bz, cx, cy, cz)
        else:
            q = _closest_on_segment(px, py, pz, cx, cy, cz, ax, ay, az)
        dd = (q[0] - px) ** 2 + (q[1] - py) ** 2 + (q[2] - pz) ** 2
        if dd < bd:
            bd = dd
            best = q
    return best


def point_triangle_closest(p, tri) -> tuple[np.ndarray, float]:
    """Exact closest point on triangle ``tri`` (3x3) to ``p`` and its squared distance."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(tri, dtype=np.float64)
    q = np.array(_closest_on_triangle(p[0], p[1], p[2], *t[0], *t[1], *t[2]))
    return q, float(np.sum((q - p) ** 2))


@numba.njit(cache=True)
def _brute_kernel(points, tris, out_pt, out_d2, out_face):
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for f in range(tris.shape[0]):
            q = _closest_on_triangle(px, py, pz, tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                                     tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                                     tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2])
            d = (q[0] - px) ** 2 + (q[1] - py) ** 2 + (q[2] - pz) ** 2
            if d < best:
                best = d
                out_pt[i, 0], out_pt[i, 1], out_pt[i, 2] = q
                out_face[i] = f
        out_d2[i] = best


@numba.njit(cache=True)
def _box_d2(px, py, pz, lo, hi):
    d = 0.0
    for k, pk in enumerate((px, py, pz)):
        if pk < lo[k]:
            d += (lo[k] - pk) ** 2
        elif pk > hi[k]:
            d += (pk - hi[k]) ** 2
    return d


@numba.njit(cache=True)
def _bvh_kernel(points, tris, order, lo, hi, left, right, start, count, out_pt, out_d2, out_face):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bface = -1
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(px, py, pz, lo[node], hi[node]) > best:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    f = order[j]
                    q = _closest_on_triangle(px, py, pz, tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                                             tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                                             tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2])
                    d = (q[0] - px) ** 2 + (q[1] - py) ** 2 + (q[2] - pz) ** 2
                    if d < best or (d == best and f < bface):
                        best = d
                        bface = f
                        out_pt[i, 0], out_pt[i, 1], out_pt[i, 2] = q
                continue
            l, r = left[node], right[node]
            dl = _box_d2(px, py, pz, lo[l], hi[l])
            dr = _box_d2(px, py, pz, lo[r], hi[r])
            # push the farther child first so the nearer one is popped next
            if dl <= dr:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
        out_d2[i] = best
        out_face[i] = bface


class TriangleBVH:
    """Median-split AABB hierarchy over a mesh's faces for exact nearest-face queries."""

    def __init__(self, mesh: Mesh, leaf_size: int = 4):
        self.tris = np.ascontiguousarray(mesh.triangles)
        nf = len(self.tris)
        tmin = self.tris.min(axis=1)
        tmax = self.tris.max(axis=1)
        cent = self.tris.mean(axis=1)
        order = np.arange(nf)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s, e):
            idx = order[s:e]
            lo.append(tmin[idx].min(0))
            hi.append(tmax[idx].max(0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        root = new_node(0, nf)
        work = [(root, 0, nf)]
        while work:
            node, s, e = work.pop()
            if e - s <= leaf_size:
                continue
            idx = order[s:e]
            c = cent[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            mid = (e - s) // 2
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            ln = new_node(s, s + mid)
            rn = new_node(s + mid, e)
            left[node], right[node] = ln, rn
            count[node] = 0
            work.append((ln, s, s + mid))
            work.append((rn, s + mid, e))
        self.order = order
        self.lo = np.asarray(lo)
        self.hi = np.asarray(hi)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(closest points, squared distances, face indices) for (N, >=3) points."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
        n = len(pts)
        out_pt = np.zeros((n, 3))
        out_d2 = np.zeros(n)
        out_face = np.zeros(n, dtype=np.int64)
        if n:
            _bvh_kernel(pts, self.tris, self.order, self.lo, self.hi, self.left, self.right,
                        self.start, self.count, out_pt, out_d2, out_face)
        return out_pt, out_d2, out_face


def closest_points_brute(points: np.ndarray, mesh: Mesh):
    """O(N*F) reference for :meth:`TriangleBVH.query`."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    n = len(pts)
    out_pt, out_d2, out_face = np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=np.int64)
    _brute_kernel(pts, np.ascontiguousarray(mesh.triangles), out_pt, out_d2, out_face)
    return out_pt, out_d2, out_face


def closest_points(points: np.ndarray, mesh: Mesh, bvh: TriangleBVH | None = None):
    bvh = bvh or TriangleBVH(mesh)
    pt, d2, _ = bvh.query(points)
    return pt, d2


def point_mesh_distance(points: np.ndarray, mesh: Mesh, bvh: TriangleBVH | None = None) -> np.ndarray:
    """Unsigned L2 distance from each point (first three channels) to the mesh surface."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError(f"points must be (N, >=3), got {pts.shape}")
    _, d2 = closest_points(pts, mesh, bvh)
    return np.sqrt(d2)
