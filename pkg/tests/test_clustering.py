import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfcp_moe.clustering import (
    OUTLIER,
    ClusteringError,
    ClusterSet,
    RefineConfig,
    choose_k,
    davies_bouldin,
    kmeans,
    minmax_scale,
    objective,
    read_clusters_csv,
    refine,
    sweep_threshold,
    write_clusters_csv,
    write_dbi_json,
)

CUBE = np.array(list(itertools.product([0.0, 1.0], repeat=3)))


def cube_blobs(per=20, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([c + noise * rng.standard_normal((per, 3)) for c in CUBE])
    return x, np.repeat(np.arange(8), per)


def cluster_set(x, assign, stage="initial"):
    assign = np.asarray(assign)
    k = assign.max() + 1
    cent = np.array([x[assign == c].mean(axis=0) for c in range(k)])
    return ClusterSet(assign, cent, np.arange(len(x)), stage)


def best_two_partition(x):
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        j = sum(((x[s] - x[s].mean(axis=0)) ** 2).sum() for s in (side, ~side))
        best = min(best, j)
    return best


def brute_dbi(x, assign, k):
    cents = [x[assign == u].mean(axis=0) for u in range(k)]
    intra = [np.mean([np.linalg.norm(p - cents[u]) for p in x[assign == u]]) for u in range(k)]
    total = 0.0
    for u in range(k):
        worst = -np.inf
        for v in range(k):
            if v != u:
                worst = max(worst, (intra[u] + intra[v]) / np.linalg.norm(cents[u] - cents[v]))
        total += worst
    return total / k


# kmeans ---------------------------------------------------------------------

def test_kmeans_symmetric_example():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    cs = kmeans(x, 2, seed=0)
    got = sorted(map(tuple, cs.centroids))
    assert got == [(0.0, 0.5), (10.0, 0.5)]
    assert objective(x, cs) == pytest.approx(1.0, abs=1e-12)


def test_kmeans_k_equals_n():
    x = np.random.default_rng(1).normal(size=(6, 2))
    cs = kmeans(x, 6, seed=0)
    assert objective(x, cs) == 0.0


def test_kmeans_matches_exhaustive_two_partitions():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(3, 9))
        x = rng.normal(size=(n, 2)) * rng.uniform(0.5, 3)
        cs = kmeans(x, 2, seed=int(rng.integers(1000)), n_init=10)
        assert objective(x, cs) == pytest.approx(best_two_partition(x), rel=1e-9, abs=1e-12)


def test_kmeans_trace_non_increasing():
    x, _ = cube_blobs(noise=0.4, seed=3)
    cs = kmeans(x, 8, seed=0, n_init=3)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(cs.trace, cs.trace[1:]))
    assert cs.trace[-1] == pytest.approx(objective(x, cs))


def test_kmeans_errors():
    x = np.zeros((3, 2))
    with pytest.raises(ValueError):
        kmeans(x, 4)
    with pytest.raises(ValueError):
        kmeans(x, 0)
    with pytest.raises(ValueError):
        kmeans(x, 2, max_iter=0)


def test_kmeans_duplicate_points_repairs_empty_clusters():
    x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    cs = kmeans(x, 3, seed=0, n_init=2)
    assert set(cs.assignments.tolist()) == {0, 1, 2}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_centroids_are_member_means(seed, k):
    x = np.random.default_rng(seed).normal(size=(20, 3))
    cs = kmeans(x, k, seed=seed, n_init=2)
    for c in range(k):
        np.testing.assert_allclose(cs.centroids[c], x[cs.members(c)].mean(axis=0), atol=1e-9)


# objective ------------------------------------------------------------------

def test_objective_cases():
    x = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert objective(x, cluster_set(x, [0, 0])) == 0.0
    x = np.array([[0.0], [2.0]])
    assert objective(x, cluster_set(x, [0, 0])) == 2.0


def test_objective_matches_resummation():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 4))
    assign = rng.integers(0, 3, size=30)
    cs = cluster_set(x, assign)
    oracle = 0.0
    for i in range(30):
        for d in range(4):
            oracle += (x[i, d] - cs.centroids[assign[i], d]) ** 2
    assert abs(objective(x, cs) - oracle) <= 1e-9


# davies-bouldin -------------------------------------------------------------

def test_dbi_worked_example():
    x = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
    rep = davies_bouldin(x, cluster_set(x, [0, 0, 1, 1]))
    np.testing.assert_array_equal(rep.intra, [1.0, 1.0])
    assert rep.dbi == 0.2
    assert rep.quality == "acceptable"


def test_dbi_singletons():
    x = np.array([[0.0], [3.0]])
    rep = davies_bouldin(x, cluster_set(x, [0, 1]))
    assert rep.dbi == 0.0 and rep.quality == "perfect"


def test_dbi_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=(12, 2))
        assign = np.r_[0, 1, 2, rng.integers(0, 3, size=9)]
        got = davies_bouldin(x, cluster_set(x, assign)).dbi
        assert abs(got - brute_dbi(x, assign, 3)) <= 1e-9


def test_dbi_errors():
    x = np.array([[0.0], [1.0], [0.0], [1.0]])
    with pytest.raises(ClusteringError):
        davies_bouldin(x, cluster_set(x, [0, 0, 1, 1]))  # identical centroids
    with pytest.raises(ClusteringError):
        davies_bouldin(x, cluster_set(x, [0, 0, 0, 0]))
    cs = ClusterSet(np.array([0, 0, 0, 0]), np.array([[0.5], [9.0]]), np.arange(4))
    with pytest.raises(ClusteringError, match="empty"):
        davies_bouldin(x, cs)


# refinement -----------------------------------------------------------------

def test_refine_fixed_point_on_separated_blobs():
    x, y = cube_blobs()
    initial = cluster_set(x, y)
    refined = refine(x, initial, RefineConfig())
    assert refined.stage == "refined"
    assert len(refined.outliers()) == 0
    assert np.array_equal(refined.assignments, y)
    np.testing.assert_allclose(refined.centroids, initial.centroids, atol=1e-12)


def test_refine_far_point_goes_to_outlier_bucket():
    x, y = cube_blobs()
    s = 1.0 / (1.0 - 0.95 / np.sqrt(3.0))  # ~0.95 from the bare vertex; the member pulls its centroid slightly closer
    x = np.vstack([x, [s, s, s]])
    y = np.r_[y, 7]
    initial = cluster_set(x, y)
    xn, lo, span = minmax_scale(x)
    dn = np.linalg.norm((initial.centroids - lo) / span - xn[-1], axis=1)
    assert 0.85 < dn.min() < 1.0  # beyond the 0.8 threshold
    refined = refine(x, initial, RefineConfig())
    assert refined.assignments[-1] == OUTLIER
    assert np.array_equal(refined.assignments[:-1], y[:-1])


def test_refine_ties_go_to_lower_index():
    # a point equidistant from two reference centroids joins the lower one
    x = np.array([[0.0], [0.0], [0.0], [2.0], [2.0], [2.0], [1.0]])
    initial = cluster_set(x, [0, 0, 0, 1, 1, 1, 1])
    initial.centroids = np.array([[0.0], [2.0]])
    cfg = RefineConfig(neighbor_min=1, distance_threshold=0.5, neighbor_rule="member")
    refined = refine(x, initial, cfg)
    assert refined.assignments[-1] == 0


def test_refine_without_reference_clusters():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 6.0]])
    with pytest.raises(ClusteringError, match="neighbor_min"):
        refine(x, cluster_set(x, [0, 0, 1, 1]), RefineConfig(neighbor_min=3))


def test_refine_requires_initial_stage():
    x, y = cube_blobs()
    with pytest.raises(ClusteringError):
        refine(x, cluster_set(x, y, stage="refined"))


def test_refine_is_idempotent():
    x, y = cube_blobs(noise=0.15, seed=6)
    cfg = RefineConfig(distance_threshold=0.3)
    once = refine(x, kmeans(x, 8, seed=0), cfg)
    again = refine(x, ClusterSet(once.assignments.copy(), once.centroids.copy(), once.source_ids), cfg)
    assert len(once.outliers()) > 0
    assert np.array_equal(again.assignments, once.assignments)


def test_every_row_in_exactly_one_bucket():
    x, _ = cube_blobs(noise=0.2, seed=7)
    refined = refine(x, kmeans(x, 8, seed=1), RefineConfig(distance_threshold=0.3))
    a = refined.assignments
    assert np.all((a == OUTLIER) | ((a >= 0) & (a < refined.k)))
    assert refined.sizes().sum() + len(refined.outliers()) == len(x)


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(neighbor_min=0)
    with pytest.raises(ValueError):
        RefineConfig(distance_threshold=1.5)
    with pytest.raises(ValueError):
        RefineConfig(sweep_grid=(0.5, 0.4))
    with pytest.raises(ValueError):
        RefineConfig(neighbor_rule="radius")


# threshold sweep ------------------------------------------------------------

def test_sweep_singleton_grid():
    x, y = cube_blobs()
    res = sweep_threshold(x, cluster_set(x, y), RefineConfig(sweep_grid=(0.8,)))
    assert res.best_threshold == 0.8


def test_sweep_ties_pick_smaller_threshold():
    x, y = cube_blobs()
    res = sweep_threshold(x, cluster_set(x, y), RefineConfig(sweep_grid=(0.5, 0.6)))
    assert res.reports[0][1].dbi == res.reports[1][1].dbi
    assert res.best_threshold == 0.5


def test_sweep_matches_exhaustive_grid_on_overlapping_blobs():
    rng = np.random.default_rng(8)
    x = np.vstack([rng.normal(0, 1, (40, 2)), rng.normal(1.5, 1, (40, 2)), rng.normal((6, 0), 1, (40, 2)),
                   rng.normal((0, 6), 1, (40, 2))])
    initial = kmeans(x, 4, seed=0)
    cfg = RefineConfig(neighbor_min=3, neighbor_rule="member")
    res = sweep_threshold(x, initial, cfg)
    best_t, best_d = None, np.inf
    for t in cfg.sweep_grid:
        try:
            r = refine(x, initial, cfg, threshold=t)
        except ClusteringError:
            continue
        keep = r.assignments >= 0
        d = brute_dbi(x[keep], r.assignments[keep], r.k)
        if d < best_d - 1e-12:
            best_t, best_d = t, d
    assert res.best_threshold == best_t
    assert res.best.threshold == best_t


def test_sweep_beats_initial_dbi_on_separable_blobs():
    x, _ = cube_blobs(noise=0.12, seed=9)
    initial = kmeans(x, 8, seed=0)
    res = sweep_threshold(x, initial, RefineConfig())
    assert davies_bouldin(x, res.best).dbi < davies_bouldin(x, initial).dbi


def test_sweep_all_fail():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 6.0]])
    with pytest.raises(ClusteringError, match="every grid threshold"):
        sweep_threshold(x, cluster_set(x, [0, 0, 1, 1]), RefineConfig(neighbor_min=3))


def test_choose_k_prefers_true_count():
    x, _ = cube_blobs(noise=0.05)
    assert choose_k(x, [2, 4, 8], seed=0) == 8


# export ---------------------------------------------------------------------

def test_exports(tmp_path):
    x = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
    cs = cluster_set(x, [0, 0, 1, 1])
    cs.assignments[1] = OUTLIER
    write_clusters_csv(cs, tmp_path / "c.csv")
    ids, assign = read_clusters_csv(tmp_path / "c.csv")
    assert ids.tolist() == [0, 1, 2, 3] and assign.tolist() == [0, -1, 1, 1]
    write_dbi_json(davies_bouldin(x, cluster_set(x, [0, 0, 1, 1])), tmp_path / "d.json")
    data = json.loads((tmp_path / "d.json").read_text())
    assert data["dbi"] == 0.2 and data["intra"] == [1.0, 1.0]
