"""Nearest neighbours, Chamfer distance and model evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Mesh, Normalization, TriangleBVH, IDENTITY, point_mesh_distance, sample_surface
from .sampler import karras_schedule, sample_forward


class KdTree3:
    """Exact 3-d nearest-neighbour index over the position columns of a point set.

    Exact duplicates are collapsed before building so a query always reports
    the lowest original index among coincident points.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError(f"points must be (N, >=3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot build a KD-tree over an empty point set")
        pts = np.ascontiguousarray(pts[:, :3])
        uniq, first = np.unique(pts, axis=0, return_index=True)
        self.points = pts
        self._index = first
        self._tree = cKDTree(uniq, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(distances, indices) of the nearest stored point for each query row."""
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None]
        if len(q) == 0:
            return np.zeros(0), np.zeros(0, dtype=np.int64)
        q = np.ascontiguousarray(q[:, :3])
        if self._tree.n < 2:
            dist, idx = self._tree.query(q, k=1)
            return dist, self._index[idx]
        dist2, idx2 = self._tree.query(q, k=2)
        dist, idx = dist2[:, 0].copy(), self._index[idx2[:, 0]]
        # equidistant distinct points: resolve to the lowest original index
        for r in np.flatnonzero(dist2[:, 1] <= dist2[:, 0] * (1 + 1e-12)):
            cand = np.asarray(self._tree.query_ball_point(q[r], dist2[r, 0] * (1 + 1e-12) + 1e-300))
            d2 = np.sum((self._tree.data[cand] - q[r]) ** 2, axis=1)
            best = cand[d2 == d2.min()]
            j = best[np.argmin(self._index[best])]
            idx[r] = self._index[j]
            dist[r] = np.sqrt(d2.min())
        return dist, idx


def nearest(tree: KdTree3, p) -> tuple[int, float]:
    dist, idx = tree.query(np.asarray(p, dtype=np.float64).reshape(1, -1))
    return int(idx[0]), float(dist[0])


@dataclass
class ChamferTerms:
    ref_to_gen: float
    gen_to_ref: float
    ref_to_gen_sq: float
    gen_to_ref_sq: float

    @property
    def chamfer(self) -> float:
        return self.ref_to_gen + self.gen_to_ref

    @property
    def chamfer_sq(self) -> float:
        return self.ref_to_gen_sq + self.gen_to_ref_sq


def chamfer_terms(ref: np.ndarray, gen: np.ndarray) -> ChamferTerms:
    if len(ref) == 0 or len(gen) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    d1, _ = KdTree3(gen).query(ref)
    d2, _ = KdTree3(ref).query(gen)
    return ChamferTerms(float(np.mean(d1)), float(np.mean(d2)),
                        float(np.mean(d1**2)), float(np.mean(d2**2)))


def chamfer(ref: np.ndarray, gen: np.ndarray) -> float:
    """Sum of the mean (unsquared) nearest-neighbour distances in both directions."""
    t = chamfer_terms(ref, gen)
    return t.chamfer


def compression_ratio(model_or_count, n_points: float) -> float:
    """Floats needed for ``n_points`` xyz points over floats stored in the network."""
    count = model_or_count if isinstance(model_or_count, (int, float, np.integer)) else model_or_count.param_count()
    return 3.0 * n_points / float(count)


@dataclass
class EvalReport:
    chamfer: float
    chamfer_sq: float
    n_points: int
    steps: int
    error_p50: float
    error_p90: float
    error_p99: float
    error_max: float
    error_mean: float
    param_count: int | None = None
    points: np.ndarray | None = field(default=None, repr=False)
    errors: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        keys = ["chamfer", "chamfer_sq", "n_points", "steps", "error_mean", "error_p50", "error_p90",
                "error_p99", "error_max", "param_count"]
        return {k: getattr(self, k) for k in keys}

    def write_csv(self, path, extra: dict | None = None, header_comment: str | None = None) -> None:
        rows = dict(self.summary())
        rows.update(extra or {})
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in rows.items():
                w.writerow([k, "" if v is None else repr(v)])


def error_stats(errors: np.ndarray) -> dict:
    if len(errors) == 0:
        return dict(error_mean=0.0, error_p50=0.0, error_p90=0.0, error_p99=0.0, error_max=0.0)
    p50, p90, p99 = np.percentile(errors, [50, 90, 99])
    return dict(error_mean=float(errors.mean()), error_p50=float(p50), error_p90=float(p90),
                error_p99=float(p99), error_max=float(errors.max()))


def eval_points(gen: np.ndarray, mesh: Mesh, ref: np.ndarray, bvh: TriangleBVH | None = None, steps: int = 0,
                param_count: int | None = None) -> EvalReport:
    """Chamfer against ``ref`` plus per-point distance to ``mesh`` for generated points."""
    terms = chamfer_terms(ref[:, :3], gen[:, :3])
    errors = point_mesh_distance(gen, mesh, bvh)
    return EvalReport(terms.chamfer, terms.chamfer_sq, len(gen), steps, param_count=param_count,
                      points=gen, errors=errors, **error_stats(errors))


def eval_model(model, mesh: Mesh, n: int = 1_000_000, n_steps: int = 64, seed: int = 0, solver: str = "heun",
               init: str = "gaussian", normalization: Normalization = IDENTITY) -> EvalReport:
    """Generate ``n`` points and compare with ``n`` fresh surface samples of ``mesh``.

    ``mesh`` is in original units; generated points are mapped back through
    ``normalization`` before comparison.
    """
    ss = np.random.SeedSequence([seed, 0xE7A1])
    gen_ss, ref_ss = ss.spawn(2)
    sched = karras_schedule(n_steps)
    gen, _ = sample_forward(model, n, sched, init=init, seed=gen_ss, solver=solver)
    gen = normalization.invert(gen)
    ref = sample_surface(mesh, n, seed=ref_ss)
    pc = model.param_count() if hasattr(model, "param_count") else None
    return eval_points(gen, mesh, ref, steps=n_steps, param_count=pc)
