"""First-stage K-means, Davies-Bouldin scoring and second-stage refinement."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import FeatureSet

log = logging.getLogger(__name__)

OUTLIER = -1


class ClusteringError(RuntimeError):
    pass


@dataclass
class ClusterSet:
    """Row-aligned cluster assignment of a FeatureSet.

    ``assignments[i]`` is the cluster of row ``i`` or ``OUTLIER`` (refined stage only).
    """

    assignments: np.ndarray
    centroids: np.ndarray
    source_ids: np.ndarray
    stage: str = "initial"
    trace: list = field(default_factory=list)
    reference_ids: Optional[np.ndarray] = None
    threshold: Optional[float] = None

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments[self.assignments >= 0], minlength=self.k)

    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.assignments == OUTLIER)


def _as_matrix(features) -> np.ndarray:
    return features.values if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)


def _source_ids(features, n):
    return features.source_ids.copy() if isinstance(features, FeatureSet) else np.arange(n)


def _means(x, assign, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=k)
    return sums / np.maximum(counts, 1)[:, None], counts


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _sse(x, assign, centroids) -> float:
    mask = assign >= 0
    diff = x[mask] - centroids[assign[mask]]
    return float((diff * diff).sum())


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[centers].copy()


def _lloyd(x, centroids, max_iter, tol):
    n, k = len(x), len(centroids)
    assign = np.full(n, -1)
    trace = []
    prev = np.inf
    for _ in range(max_iter):
        new_assign = np.argmin(_sq_dists(x, centroids), axis=1)
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        new_c, counts = _means(x, assign, k)
        for j in np.flatnonzero(counts == 0):
            # reseed the empty cluster with the farthest point that can be spared
            far = ((x - centroids[j]) ** 2).sum(axis=1)
            spare = np.bincount(assign, minlength=k)[assign] > 1
            far[~spare] = -np.inf
            assign[int(np.argmax(far))] = j
            new_c, counts = _means(x, assign, k)
        shift = float(np.sqrt(((new_c - centroids) ** 2).sum(axis=1)).max())
        centroids = new_c
        j_val = _sse(x, assign, centroids)
        if j_val > prev * (1 + 1e-12) + 1e-12:
            raise ClusteringError(f"objective increased from {prev} to {j_val}")
        trace.append(j_val)
        prev = j_val
        if not changed or shift < tol:
            break
    return assign, centroids, trace


def _hartigan(x, assign, k, trace, max_pass=100):
    """Single-point transfers (Hartigan-Wong style) polishing a Lloyd fixed point.

    Moving point i from cluster s (size n_s) to t (size n_t) changes J by
    n_t/(n_t+1)*|x_i-c_t|^2 - n_s/(n_s-1)*|x_i-c_s|^2, so every accepted move
    strictly lowers J. This escapes Lloyd optima whose basin holds no seed.
    """
    assign = assign.copy()
    cent, counts = _means(x, assign, k)
    counts = counts.astype(float)
    for _ in range(max_pass):
        moved = False
        for i in range(len(x)):
            s = assign[i]
            if counts[s] <= 1:
                continue
            d2 = ((cent - x[i]) ** 2).sum(axis=1)
            cost = counts / (counts + 1) * d2
            cost[s] = counts[s] / (counts[s] - 1) * d2[s]
            t = int(np.argmin(cost))
            if t == s or not cost[t] < cost[s] * (1 - 1e-12):
                continue
            cent[s] = (cent[s] * counts[s] - x[i]) / (counts[s] - 1)
            cent[t] = (cent[t] * counts[t] + x[i]) / (counts[t] + 1)
            counts[s] -= 1
            counts[t] += 1
            assign[i] = t
            moved = True
        if not moved:
            break
        cent, _ = _means(x, assign, k)  # drop incremental rounding drift
        j_val = _sse(x, assign, cent)
        if j_val > trace[-1] * (1 + 1e-12) + 1e-12:
            raise ClusteringError(f"objective increased from {trace[-1]} to {j_val}")
        trace.append(j_val)
    cent, _ = _means(x, assign, k)
    return assign, cent, trace


def kmeans(features, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10,
           n_init: int = 10) -> ClusterSet:
    """Lloyd's algorithm from k-means++ seeds, polished by single-point transfers;
    best of ``n_init`` restarts by objective."""
    x = _as_matrix(features)
    n = len(x)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        assign, cent, trace = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        assign, cent, trace = _hartigan(x, assign, k, trace)
        if best is None or trace[-1] < best[2][-1]:
            best = (assign, cent, trace)
    assign, cent, trace = best
    return ClusterSet(assign, cent, _source_ids(features, n), "initial", trace)


def objective(features, clusters: ClusterSet) -> float:
    x = _as_matrix(features)
    if len(x) != len(clusters.assignments):
        raise ValueError("feature rows and assignments differ in length")
    return _sse(x, clusters.assignments, clusters.centroids)


# ---------------------------------------------------------------------------


@dataclass
class DbiReport:
    intra: np.ndarray
    centroid_distances: np.ndarray
    dbi: float

    @property
    def quality(self) -> str:
        if self.dbi == 0:
            return "perfect"
        return "acceptable" if self.dbi <= 1 else "poor"

    def to_dict(self) -> dict:
        return {"dbi": self.dbi, "quality": self.quality, "intra": [float(v) for v in self.intra]}


def davies_bouldin(features, clusters: ClusterSet) -> DbiReport:
    x = _as_matrix(features)
    k = clusters.k
    if k < 2:
        raise ClusteringError("Davies-Bouldin index needs at least 2 clusters")
    intra = np.empty(k)
    for c in range(k):
        rows = clusters.members(c)
        if len(rows) == 0:
            raise ClusteringError(f"cluster {c} is empty")
        intra[c] = np.sqrt(((x[rows] - clusters.centroids[c]) ** 2).sum(axis=1)).mean()
    dist = np.sqrt(_sq_dists(clusters.centroids, clusters.centroids))
    off = ~np.eye(k, dtype=bool)
    if np.any(dist[off] == 0):
        raise ClusteringError("two clusters share a centroid; DBI is undefined")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (intra[:, None] + intra[None, :]) / dist
    ratio[~off] = -np.inf
    return DbiReport(intra, dist, float(ratio.max(axis=1).mean()))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    """Second-stage settings.

    ``neighbor_rule="centroid"``: a cluster is a reference when at least
    ``neighbor_min`` other centroids lie within the median inter-centroid distance.
    ``neighbor_rule="member"``: a cluster is a reference when at least
    ``neighbor_min`` feature vectors lie within ``distance_threshold`` of its centroid.
    """

    neighbor_min: int = 3
    distance_threshold: float = 0.8
    sweep_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    neighbor_rule: str = "centroid"

    def __post_init__(self):
        if self.neighbor_min < 1:
            raise ValueError("neighbor_min must be >= 1")
        if not 0 < self.distance_threshold <= 1:
            raise ValueError("distance_threshold must lie in (0, 1]")
        grid = list(self.sweep_grid)
        if any(not 0 < t <= 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep_grid must be strictly increasing values in (0, 1]")
        if self.neighbor_rule not in ("centroid", "member"):
            raise ValueError(f"unknown neighbor_rule {self.neighbor_rule!r}")


def minmax_scale(x: np.ndarray):
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (x - lo) / span, lo, span


def reference_clusters(xn: np.ndarray, cn: np.ndarray, assign: np.ndarray, cfg: RefineConfig,
                       threshold: float) -> np.ndarray:
    k = len(cn)
    if cfg.neighbor_rule == "centroid":
        if k < 2:
            return np.zeros(0, dtype=int)
        d = np.sqrt(_sq_dists(cn, cn))
        radius = np.median(d[np.triu_indices(k, 1)])
        counts = (d <= radius).sum(axis=1) - 1
    else:
        inside = np.sqrt(_sq_dists(xn[assign >= 0], cn)) <= threshold
        counts = inside.sum(axis=0)
    return np.flatnonzero(counts >= cfg.neighbor_min)


def refine(features, initial: ClusterSet, cfg: RefineConfig = RefineConfig(),
           threshold: Optional[float] = None) -> ClusterSet:
    if initial.stage != "initial":
        raise ClusteringError("refine expects an initial-stage ClusterSet")
    thr = cfg.distance_threshold if threshold is None else threshold
    x = _as_matrix(features)
    xn, lo, span = minmax_scale(x)
    cn = (initial.centroids - lo) / span
    refs = reference_clusters(xn, cn, initial.assignments, cfg, thr)
    if len(refs) == 0:
        raise ClusteringError(
            f"no reference cluster has >= {cfg.neighbor_min} neighbours; "
            "lower neighbor_min or raise the distance threshold"
        )
    dist = np.sqrt(_sq_dists(xn, cn[refs]))
    dist[dist > thr] = np.inf
    dist[initial.assignments < 0] = np.inf
    nearest = np.argmin(dist, axis=1)
    captured = np.isfinite(dist[np.arange(len(x)), nearest])
    raw = np.where(captured, nearest, OUTLIER)
    # drop references that captured nothing and renumber 0..m-1
    used = np.unique(raw[raw >= 0])
    remap = np.full(len(refs), OUTLIER)
    remap[used] = np.arange(len(used))
    assign = np.where(raw >= 0, remap[np.maximum(raw, 0)], OUTLIER)
    centroids, _ = _means(x[assign >= 0], assign[assign >= 0], len(used))
    return ClusterSet(assign, centroids, initial.source_ids.copy(), "refined",
                      reference_ids=refs[used], threshold=float(thr))


@dataclass
class SweepResult:
    best_threshold: float
    reports: list  # (threshold, DbiReport or None, error message or None)
    best: ClusterSet

    def to_dict(self) -> dict:
        return {
            "best_threshold": self.best_threshold,
            "grid": [
                {"threshold": t, "dbi": None if r is None else r.dbi, "error": e}
                for t, r, e in self.reports
            ],
        }


def sweep_threshold(features, initial: ClusterSet, cfg: RefineConfig = RefineConfig()) -> SweepResult:
    """Refine at every grid threshold; keep the one with the lowest DBI (ties -> smaller)."""
    if not cfg.sweep_grid:
        raise ValueError("sweep grid is empty")
    reports = []
    best = None
    for t in cfg.sweep_grid:
        try:
            refined = refine(features, initial, cfg, threshold=t)
            rep = davies_bouldin(_as_matrix(features), refined)
        except ClusteringError as exc:
            reports.append((t, None, str(exc)))
            continue
        reports.append((t, rep, None))
        if best is None or rep.dbi < best[1].dbi:
            best = (t, rep, refined)
    if best is None:
        raise ClusteringError("refinement failed at every grid threshold: "
                              + "; ".join(f"{t}: {e}" for t, _, e in reports))
    log.info("threshold sweep picked %.2f (DBI %.4f)", best[0], best[1].dbi)
    return SweepResult(best[0], reports, best[2])


def choose_k(features, ks, seed: int = 0) -> int:
    """Pick k from ``ks`` by the lowest DBI of the K-means solution."""
    scores = []
    for k in ks:
        cs = kmeans(features, k, seed=seed)
        try:
            scores.append((davies_bouldin(features, cs).dbi, k))
        except ClusteringError:
            continue
    if not scores:
        raise ClusteringError("no k in the grid produced a valid clustering")
    return min(scores)[1]


# ---------------------------------------------------------------------------


def write_clusters_csv(clusters: ClusterSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "cluster"])
        for sid, c in zip(clusters.source_ids, clusters.assignments):
            w.writerow([int(sid), int(c)])


def read_clusters_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        rows = [(int(rec["source_id"]), int(rec["cluster"])) for rec in r]
    return np.array([s for s, _ in rows]), np.array([c for _, c in rows])


def write_dbi_json(report: DbiReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
