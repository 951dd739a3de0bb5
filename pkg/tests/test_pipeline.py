import json

import numpy as np
import pytest

from dfcp_moe import pipeline as pp
from dfcp_moe.moe import Hyperparams, RoutingPlan, build_model, inference_flops, load_model
from dfcp_moe.moe import classifier_flops


def small_config(seed=0, **over):
    items = {"dataset.classes": "3", "dataset.dim": "4", "dataset.samples_per_class": "40",
             "extractor.output_dim": "4", "search.trials": "2", "search.proxy_epochs": "3",
             "moe.epochs": "10", "dense.epochs": "20"}
    items.update(over)
    return pp.apply_overrides(pp.benchmark_config(seed), items).validate()


def blobs(k=4, per=50, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([6 * np.eye(d)[c] + 0.5 * rng.standard_normal((per, d)) for c in range(k)])
    return x, np.repeat(np.arange(k), per)


# configuration --------------------------------------------------------------

def test_parse_config_text():
    cfg = pp.parse_config_text("""
        # comment line
        seed = 7
        clustering.k = 6          # trailing comment
        clustering.sweep_grid = 0.2, 0.4
        extractor.standardize = true
        search.optimizers = adam
    """)
    assert cfg.seed == 7 and cfg.clustering.k == 6
    assert cfg.clustering.sweep_grid == (0.2, 0.4)
    assert cfg.extractor.standardize is True
    assert cfg.search.optimizers == ("adam",)


@pytest.mark.parametrize("text", [
    "clustering.kk = 3",
    "nosection.k = 3",
    "clustering.k = three",
    "clustering.k 3",
    "seed = 1\nseed = 2",
    "dataset.classes = 1",
    "split.trusted_fraction = 1.5",
    "clustering.distance_threshold = 2",
    "search.batch_sizes = 128",
])
def test_config_errors(text):
    with pytest.raises(pp.ConfigError):
        pp.parse_config_text(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(pp.ConfigError):
        pp.load_config(tmp_path / "nope.cfg")


def test_derive_seed_is_stable_and_stage_specific():
    assert pp.derive_seed(3, "kmeans") == pp.derive_seed(3, "kmeans")
    assert pp.derive_seed(3, "kmeans") != pp.derive_seed(3, "siamese")
    assert pp.derive_seed(3, "kmeans") != pp.derive_seed(4, "kmeans")


def test_resolved_config_drops_thread_count():
    a, b = pp.benchmark_config(), pp.benchmark_config()
    b.threads = 4
    assert a.resolved() == b.resolved() and "threads" not in a.resolved()


# data -----------------------------------------------------------------------

def test_generate_synthetic_zero_spread_limit():
    spec = pp.DatasetConfig(classes=2, dim=3, samples_per_class=5, spread=1e-12)
    ds = pp.generate_synthetic(spec, seed=0)
    for c in (0, 1):
        rows = ds.samples[ds.labels == c]
        assert np.max(np.abs(rows - rows[0])) <= 1e-10


def test_generate_synthetic_is_deterministic_and_validated():
    spec = pp.DatasetConfig(classes=3, dim=2, samples_per_class=8, imbalance=2.0)
    a, b = pp.generate_synthetic(spec, 1), pp.generate_synthetic(spec, 1)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [8, 6, 4]
    with pytest.raises(ValueError):
        pp.generate_synthetic(pp.DatasetConfig(spread=0.0), 0)
    with pytest.raises(ValueError):
        pp.generate_synthetic(pp.DatasetConfig(classes=1), 0)


def test_separated_means_give_near_perfect_nearest_neighbor():
    spec = pp.DatasetConfig(classes=6, dim=8, samples_per_class=100, spread=1.0, separation=10.0)
    ds = pp.generate_synthetic(spec, seed=2)
    d = np.linalg.norm(ds.means[:, None] - ds.means[None], axis=2)
    assert d[np.triu_indices(6, 1)].min() >= 10.0
    x, y = ds.samples, ds.labels
    dist = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(dist, np.inf)
    assert np.mean(y[np.argmin(dist, axis=1)] == y) >= 0.999


def test_csv_dataset(tmp_path):
    (tmp_path / "d.csv").write_text("a,label,b\n1.0,0,2.0\n3.0,1,4.0\n")
    ds = pp.load_csv_dataset(tmp_path / "d.csv")
    assert ds.samples.tolist() == [[1.0, 2.0], [3.0, 4.0]] and ds.labels.tolist() == [0, 1]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        pp.load_csv_dataset(tmp_path / "bad.csv")


def test_image_manifest(tmp_path):
    from PIL import Image

    for i in range(2):
        Image.fromarray(np.full((3, 3), 255 * i, dtype=np.uint8)).save(tmp_path / f"{i}.png")
    (tmp_path / "m.csv").write_text("path,label\n0.png,0\n1.png,1\n")
    ds = pp.load_image_manifest(tmp_path / "m.csv")
    assert ds.samples.shape == (2, 3, 3, 1) and ds.samples[1].max() == 1.0


def test_stratified_split():
    y = np.repeat([0, 1, 2], [10, 20, 30])
    rest, picked = pp.stratified_split(y, 0.2, seed=0)
    assert np.bincount(y[picked]).tolist() == [2, 4, 6]
    assert sorted(np.r_[rest, picked].tolist()) == list(range(60))
    _, picked = pp.stratified_split(y, 0.01, seed=0, min_per_class=3)
    assert np.bincount(y[picked]).tolist() == [3, 3, 3]
    with pytest.raises(ValueError):
        pp.stratified_split(y, 0.01, seed=0, min_per_class=10)


# search ---------------------------------------------------------------------

def test_random_search_single_trial():
    space = pp.HyperparamSpace()
    res = pp.random_search(space, 1, lambda h, s: 0.5, seed=3)
    assert res.best == res.trials[0].params and res.best_score == 0.5


def test_random_search_same_seed_same_trials_and_first_tie():
    space = pp.HyperparamSpace()
    a = pp.random_search(space, 5, lambda h, s: 1.0, seed=4)
    b = pp.random_search(space, 5, lambda h, s: 1.0, seed=4, threads=3)
    assert [t.params for t in a.trials] == [t.params for t in b.trials]
    assert a.best == a.trials[0].params


def test_random_search_best_beats_median_on_separable_data():
    x, y = blobs()
    tr, va = pp._proxy_split(len(y), 0)

    def objective(h, seed):
        model, _ = pp.train_dense(x[tr], y[tr], 4, h, 3, seed)
        return pp.evaluate("dense", model, x[va], y[va]).balanced_accuracy

    res = pp.random_search(pp.HyperparamSpace(), 20, objective, seed=5)
    scores = [t.score for t in res.trials]
    assert res.best_score == max(scores) >= np.median(scores)


def test_random_search_all_fail():
    def boom(h, seed):
        raise RuntimeError(f"bad lr {h.lr:.3g}")

    with pytest.raises(pp.SearchError) as err:
        pp.random_search(pp.HyperparamSpace(), 3, boom, seed=0)
    assert "trial 0" in str(err.value) and "trial 2" in str(err.value)
    with pytest.raises(ValueError):
        pp.random_search(pp.HyperparamSpace(), 0, boom, seed=0)


def test_hyperparam_space_validation():
    with pytest.raises(ValueError):
        pp.HyperparamSpace(batch_sizes=(128,))
    with pytest.raises(ValueError):
        pp.HyperparamSpace(lr=(0.1, 0.01))
    h = pp.HyperparamSpace(lr=(1e-3, 1e-3)).sample(np.random.default_rng(0))
    assert h.lr == pytest.approx(1e-3) and h.batch_size in (16, 32, 64)


# dense / evaluate -----------------------------------------------------------

def test_train_dense_on_separable_blobs():
    x, y = blobs(seed=1)
    xt, yt = blobs(per=25, seed=2)
    model, log = pp.train_dense(x, y, 5, Hyperparams(16, 8, lr=1e-2), 30, seed=0)
    assert pp.evaluate("dense", model, xt, yt).balanced_accuracy >= 0.95
    again, log2 = pp.train_dense(x, y, 5, Hyperparams(16, 8, lr=1e-2), 30, seed=0)
    assert again.params.equals(model.params) and log.losses == log2.losses


def test_train_dense_zero_epochs_is_near_chance():
    x, y = blobs(seed=3)
    accs = []
    for seed in range(10):
        model, _ = pp.train_dense(x, y, 4, Hyperparams(16, 8), 0, seed)
        accs.append(pp.evaluate("dense", model, x, y).balanced_accuracy)
    assert np.mean(accs) < 0.6


def test_evaluate_perfect_and_recall_cases():
    # a classifier whose output layer copies the one-hot input
    x = np.eye(2)[[0, 0, 1, 1]]
    model, _ = pp.train_dense(x, [0, 0, 1, 1], 2, Hyperparams(2, 0), 0, seed=0)
    w = dict(model.params.arrays())
    w["fc1/weights"][...] = np.eye(2)
    w["fc1/bias"][...] = 0
    w["fc2/weights"][...] = 50 * np.eye(2)
    w["fc2/bias"][...] = 0
    rep = pp.evaluate("dense", model, x, [0, 0, 1, 1])
    assert rep.mAP == 1.0 and rep.balanced_accuracy == 1.0 and rep.inference_ms is None
    rep = pp.evaluate("dense", model, np.eye(2)[[0, 0, 1, 0]], [0, 0, 1, 1])
    assert rep.balanced_accuracy == 0.75
    with pytest.raises(ValueError):
        pp.evaluate("dense", model, x[:2], [0, 0])


def test_evaluate_mixture_reports_flops_and_experts():
    x, y = blobs(k=3, d=3, seed=4)
    model = build_model(3, 4, [(6, 3), (5, 3)], 0, RoutingPlan("traditional", 0.0))
    rep = pp.evaluate("traditional-moe", model, x, y, top_k=1, wall_clock=True)
    assert rep.flops == inference_flops(model, 1) and rep.params == model.param_count()
    assert len(rep.per_expert) == 2 and rep.inference_ms > 0


def test_matched_dense_has_enough_parameters():
    model = build_model(8, 7, [(20, 10)] * 6, 0, RoutingPlan("traditional", 0.0))
    dense = pp.matched_dense(model)
    assert dense.params.count() >= model.param_count()
    assert inference_flops(model, top_k=1) < classifier_flops(dense)


# reports --------------------------------------------------------------------

def make_report(kind, per_expert=()):
    return pp.EvaluationReport(kind, {0: 0.5, 1: 1 / 3}, 0.1 + 0.2, 2 / 3, 1234, 99,
                               None, 1.5, None, list(per_expert))


def test_emit_report_dense_only_has_header_only_per_expert(tmp_path):
    pp.emit_report({"dense": make_report("dense")}, tmp_path)
    lines = (tmp_path / "per_expert.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1:] == ["model,expert,home_class,mean_precision,mean_gate_weight"]


def test_comparison_csv_roundtrip(tmp_path):
    reports = {"dfcp": make_report("dfcp-moe", [{"expert": 0, "home_class": 1, "mean_precision": 0.9,
                                                  "mean_gate_weight": 0.4}]),
               "dense": make_report("dense")}
    pp.emit_report(reports, tmp_path)
    table = pp.read_comparison_csv(tmp_path / "comparison.csv")
    assert list(table) == ["mAP", "balanced_accuracy", "inference_ms", "training_s", "flops_per_input", "params"]
    for kind, name in (("dfcp", "dfcp-moe"), ("dense", "dense")):
        r = reports[kind]
        assert abs(table["mAP"][name] - r.mAP) <= 1e-12
        assert abs(table["balanced_accuracy"][name] - r.balanced_accuracy) <= 1e-12
        assert table["inference_ms"][name] is None and table["training_s"][name] == 1.5
        assert table["flops_per_input"][name] == r.flops
    back = pp.load_reports(tmp_path / "reports.json")
    assert back["dfcp"] == reports["dfcp"]


def test_emit_report_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        pp.emit_report({"dense": make_report("dense")}, blocker / "sub")


# pipeline -------------------------------------------------------------------

def test_small_pipeline_run_and_rerun_bytes(tmp_path):
    reports, p = pp.run_pipeline(small_config(), tmp_path / "a")
    pp.run_pipeline(small_config(), tmp_path / "b")
    assert reports["dfcp"].balanced_accuracy >= 0.9
    assert p.purity.average >= p.cfg.labels.purity_floor
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    for required in ("comparison.csv", "per_expert.csv", "clusters.csv", "threshold_sweep.json",
                     "config_resolved.json", "dfcp.ckpt", "dense.ckpt", "traditional.ckpt"):
        assert required in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    model = load_model(tmp_path / "a" / "dfcp.ckpt")
    assert model.n_experts == p.refined.k
    assert json.loads((tmp_path / "a" / "config_resolved.json").read_text())["seed"] == 0


def test_pipeline_trains_only_on_clustered_pseudo_labels():
    p = pp.Pipeline(small_config())
    routed = p.routed
    assert len(routed.y) == int((p.refined.assignments >= 0).sum())
    assert set(np.unique(routed.cluster)) <= set(range(p.refined.k))


def test_purity_floor_aborts_before_training():
    cfg = small_config(**{"dataset.separation": "1.5", "dataset.box": "2", "labels.purity_floor": "0.99"})
    p = pp.Pipeline(cfg)
    with pytest.raises(pp.PurityError) as err:
        p.evaluate("dfcp")
    assert "average" in str(err.value)
    assert "train-dfcp" not in p._cache


def test_stage_failure_names_stage(tmp_path):
    cfg = small_config(**{"dataset.kind": "csv", "dataset.path": str(tmp_path / "missing.csv")})
    with pytest.raises(pp.StageError) as err:
        pp.Pipeline(cfg).features
    assert err.value.stage == "dataset"
