"""Covariance approximation from camera neighbourhoods of a large scene.

Each sub-reconstruction yields an upper bound on the covariance of its
cameras; running several decompositions and keeping, per camera, the block
with the smallest trace tightens the bound.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .covariance import CovarianceResult, compute_covariance
from .errors import CamcovError, SceneError
from .oracle import error_from_blocks, normalization_matrix
from .scene import MIN_OBS_PER_CAMERA, MIN_TRACK_LENGTH, Reconstruction

log = logging.getLogger(__name__)

DEFAULT_K = 100
DEFAULT_DECOMPOSITIONS = 3
SWEEP_KS = (5, 10, 20, 40, 80)
SWEEP_SUBSETS = 25


class UncoveredCameraError(CamcovError):
    pass


@dataclass(frozen=True)
class ViewGraph:
    """Cameras joined by edges weighted with their number of shared points."""

    weights: sp.csr_matrix   # (n, n) symmetric, zero diagonal

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def neighbors(self, i: int):
        row = self.weights.getrow(i)
        return row.indices, row.data

    def weight(self, i: int, k: int) -> int:
        return int(self.weights[i, k])

    def components(self) -> np.ndarray:
        return connected_components(self.weights, directed=False)[1]

    def edges(self):
        coo = sp.triu(self.weights, k=1).tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.astype(int).tolist()))


def build_view_graph(rec: Reconstruction, min_covis: int = 1) -> ViewGraph:
    V = sp.csr_matrix((np.ones(rec.t), (rec.obs_cam, rec.obs_pt)), shape=(rec.n, rec.m))
    W = (V @ V.T).tolil()
    W.setdiag(0)
    W = W.tocsr()
    W.data[W.data < min_covis] = 0
    W.eliminate_zeros()
    return ViewGraph(W.astype(np.int64))


@dataclass(frozen=True)
class SubReconstruction:
    rec: Reconstruction
    cameras: np.ndarray      # original indices, ascending
    points: np.ndarray       # original indices, ascending
    center: int | None = None
    component_too_small: bool = False


def induced_subreconstruction(rec: Reconstruction, cameras, center: int | None = None) -> SubReconstruction:
    """Cameras ``cameras`` with the points that at least two of them observe.

    Cameras left with fewer than four observations are dropped together with
    the points that then fall below two observers, until the subset is stable.
    """
    keep_cam = np.zeros(rec.n, dtype=bool)
    keep_cam[np.asarray(cameras, dtype=np.int64)] = True
    while True:
        obs = keep_cam[rec.obs_cam]
        track = np.bincount(rec.obs_pt[obs], minlength=rec.m)
        keep_pt = track >= MIN_TRACK_LENGTH
        obs &= keep_pt[rec.obs_pt]
        per_cam = np.bincount(rec.obs_cam[obs], minlength=rec.n)
        weak = keep_cam & (per_cam < MIN_OBS_PER_CAMERA)
        if not weak.any():
            break
        keep_cam &= ~weak
    if center is not None and not keep_cam[center]:
        raise SceneError(f"camera {center} cannot be part of its own sub-reconstruction "
                         f"(too few points shared with its neighbours)")
    cams = np.flatnonzero(keep_cam)
    pts = np.flatnonzero(keep_pt)
    if cams.size == 0 or pts.size == 0:
        raise SceneError("empty sub-reconstruction")
    cam_map = np.full(rec.n, -1, dtype=np.int64)
    cam_map[cams] = np.arange(cams.size)
    pt_map = np.full(rec.m, -1, dtype=np.int64)
    pt_map[pts] = np.arange(pts.size)
    sub = Reconstruction(rec.cams[cams], rec.points[pts], cam_map[rec.obs_cam[obs]],
                         pt_map[rec.obs_pt[obs]], rec.uv[obs], rec.sigma[obs])
    return SubReconstruction(sub, cams, pts, center)


def grow_neighborhood(graph: ViewGraph, center: int, k: int):
    """Greedy expansion from ``center``: repeatedly add the outside camera with
    the largest total co-observation weight to the current set (lowest index
    on ties). Returns ``(cameras, component_too_small)``."""
    if k < 2:
        raise ValueError(f"neighbourhood size must be at least 2, got {k}")
    W = graph.weights
    score = np.zeros(graph.n)
    inside = np.zeros(graph.n, dtype=bool)
    chosen = [center]
    inside[center] = True
    row = W.getrow(center)
    score[row.indices] += row.data
    while len(chosen) < k:
        cand = np.where(inside, -1.0, score)
        b = int(np.argmax(cand))
        if cand[b] <= 0:
            return np.sort(chosen), True
        chosen.append(b)
        inside[b] = True
        row = W.getrow(b)
        score[row.indices] += row.data
    return np.sort(chosen), False


def extract_neighborhood(rec: Reconstruction, graph: ViewGraph, center: int, k: int) -> SubReconstruction:
    cams, small = grow_neighborhood(graph, center, k)
    if small:
        log.info("camera %d: connected component has fewer than %d cameras; using all of it", center, k)
    sub = induced_subreconstruction(rec, cams, center)
    return SubReconstruction(sub.rec, sub.cameras, sub.points, center, small)


@dataclass
class SubRecPlan:
    k: int
    subsets: list = field(default_factory=list)        # SubReconstruction
    decomposition: list = field(default_factory=list)  # decomposition id per subset

    def covered(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        for s in self.subsets:
            mask[s.cameras] = True
        return mask


def plan_decompositions(rec: Reconstruction, k: int, n_decompositions: int, seed: int = 0,
                        graph: ViewGraph | None = None) -> SubRecPlan:
    """Cover every camera ``n_decompositions`` times with greedy neighbourhoods.

    Decomposition ``d`` depends only on ``(seed, d)``, so adding decompositions
    never changes the earlier ones.
    """
    if n_decompositions < 1:
        raise ValueError("n_decompositions must be at least 1")
    graph = graph or build_view_graph(rec)
    plan = SubRecPlan(k)
    for d in range(n_decompositions):
        rng = np.random.default_rng([seed, d])
        uncovered = np.ones(rec.n, dtype=bool)
        while uncovered.any():
            center = int(rng.choice(np.flatnonzero(uncovered)))
            try:
                sub = extract_neighborhood(rec, graph, center, k)
            except SceneError as e:
                raise UncoveredCameraError(f"camera {center} cannot be covered: {e}") from e
            uncovered[sub.cameras] = False
            plan.subsets.append(sub)
            plan.decomposition.append(d)
    return plan


@dataclass
class AggregatedCovariance:
    cameras: np.ndarray   # (n, 8, 8) min-trace blocks
    traces: np.ndarray    # (n,)
    source: np.ndarray    # (n,) index into plan.subsets
    plan: SubRecPlan


def _run_subsets(subsets, threads, backend):
    def job(s):
        return compute_covariance(s.rec, threads=1, backend=backend, keep_inverse=False)
    if threads and threads > 1 and len(subsets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, subsets))
    return [job(s) for s in subsets]


def aggregate_min_trace(n: int, plan: SubRecPlan, results) -> AggregatedCovariance:
    best = np.full(n, np.inf)
    cams = np.zeros((n, 8, 8))
    source = np.full(n, -1, dtype=np.int64)
    for sid, (sub, res) in enumerate(zip(plan.subsets, results)):
        tr = res.traces()
        better = tr < best[sub.cameras]
        idx = sub.cameras[better]
        best[idx] = tr[better]
        cams[idx] = res.cameras[better]
        source[idx] = sid
    missing = np.flatnonzero(source < 0)
    if missing.size:
        raise UncoveredCameraError(f"camera {missing[0]} is not covered by any sub-reconstruction")
    return AggregatedCovariance(cams, best, source, plan)


def approximate_covariances(rec: Reconstruction, k: int = DEFAULT_K,
                            n_decompositions: int = DEFAULT_DECOMPOSITIONS, seed: int = 0, *,
                            threads: int | None = 1, backend: str | None = None) -> AggregatedCovariance:
    """Min-trace covariance blocks over ``n_decompositions`` neighbourhood decompositions."""
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    plan = plan_decompositions(rec, k, n_decompositions, seed)
    try:
        results = _run_subsets(plan.subsets, threads, backend)
    except CamcovError as e:
        raise CamcovError(f"sub-reconstruction failed: {e}") from e
    return aggregate_min_trace(rec.n, plan, results)


@dataclass
class MonotonicityReport:
    cameras: np.ndarray
    trace_small: np.ndarray
    trace_large: np.ndarray
    violations: list       # (camera, trace_small, trace_large)
    tol: float

    @property
    def ok(self) -> bool:
        return not self.violations


def monotonicity_check(rec: Reconstruction, subset_small, subset_large, tol: float = 1e-8,
                       backend: str | None = None) -> MonotonicityReport:
    """Check that enlarging a sub-reconstruction never increases a camera's trace."""
    small = np.unique(np.asarray(subset_small, dtype=np.int64))
    large = np.unique(np.asarray(subset_large, dtype=np.int64))
    if not np.isin(small, large).all():
        raise ValueError("the small subset must be contained in the large subset")
    a = induced_subreconstruction(rec, small)
    b = induced_subreconstruction(rec, large)
    ra = compute_covariance(a.rec, threads=1, backend=backend, keep_inverse=False)
    rb = compute_covariance(b.rec, threads=1, backend=backend, keep_inverse=False)
    shared = np.intersect1d(a.cameras, b.cameras)
    ta = ra.traces()[np.searchsorted(a.cameras, shared)]
    tb = rb.traces()[np.searchsorted(b.cameras, shared)]
    bad = np.flatnonzero(ta < tb - tol * np.abs(tb))
    viol = [(int(shared[i]), float(ta[i]), float(tb[i])) for i in bad]
    return MonotonicityReport(shared, ta, tb, viol, tol)


# ---------------------------------------------------------------------------
# error-vs-size experiment

SWEEP_COLUMNS = ("k", "subset_id", "camera_id", "err_relative", "err_absolute", "trace")


@dataclass
class SweepResult:
    records: list                       # dicts keyed by SWEEP_COLUMNS plus "trace_full"
    full: CovarianceResult

    def summary(self) -> dict:
        out = {}
        for k in sorted({r["k"] for r in self.records}):
            rows = [r for r in self.records if r["k"] == k]
            rel = np.array([r["err_relative"] for r in rows])
            ab = np.array([r["err_absolute"] for r in rows])
            out[k] = {"mean_relative": float(rel.mean()), "median_relative": float(np.median(rel)),
                      "mean_absolute": float(ab.mean()), "median_absolute": float(np.median(ab)),
                      "records": len(rows)}
        return out

    def upper_bound_violations(self, tol: float = 1e-8):
        return [r for r in self.records if r["trace"] < r["trace_full"] - tol * abs(r["trace_full"])]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(SWEEP_COLUMNS)
            for r in self.records:
                w.writerow([r[c] for c in SWEEP_COLUMNS])


def error_sweep(rec: Reconstruction, ks=SWEEP_KS, n_subsets: int = SWEEP_SUBSETS, seed: int = 0, *,
                full: CovarianceResult | None = None, threads: int | None = 1,
                backend: str | None = None) -> SweepResult:
    """Errors of neighbourhood covariances against the full-scene covariance.

    For every ``k`` in ``ks``, ``n_subsets`` centres are drawn at random and
    grown into neighbourhoods through the view graph. The relative error is
    the normalised per-camera metric; the absolute error is the mean absolute
    entry difference of the 8x8 blocks.
    """
    if full is None:
        full = compute_covariance(rec, threads=threads, backend=backend, keep_inverse=False)
    graph = build_view_graph(rec)
    O, _ = normalization_matrix(rec)
    full_tr = full.traces()
    records = []
    for k in ks:
        rng = np.random.default_rng([seed, int(k)])
        centers = rng.choice(rec.n, size=n_subsets, replace=n_subsets > rec.n)
        subsets = [extract_neighborhood(rec, graph, int(c), int(k)) for c in centers]
        results = _run_subsets(subsets, threads, backend)
        for sid, (sub, res) in enumerate(zip(subsets, results)):
            gt = full.cameras[sub.cameras]
            rel = error_from_blocks(gt, res.cameras, O)
            ab = np.abs(gt - res.cameras).mean(axis=(1, 2))
            tr = res.traces()
            for q, cam in enumerate(sub.cameras):
                records.append({"k": int(k), "subset_id": sid, "camera_id": int(cam),
                                "err_relative": float(rel[q]), "err_absolute": float(ab[q]),
                                "trace": float(tr[q]), "trace_full": float(full_tr[cam])})
    return SweepResult(records, full)


def count_inversions(values) -> int:
    """Number of adjacent increases in a sequence expected to be nonincreasing."""
    v = np.asarray(values, dtype=float)
    return int((np.diff(v) > 0).sum())
