"""End-to-end experiment orchestration: data, splits, search, baselines, evaluation, reports.

Every stage derives its random seed from the single experiment seed, so a run
is a pure function of its configuration file.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import clustering as cl
from . import pseudo_label as pl
from .features import ExtractorConfig, FeatureSet, Standardizer, extract_set, init_extractor
from .metrics import balanced_accuracy, mean_average_precision, per_class_average_precision, precision_for_class
from .moe import (
    Expert,
    ExpertSpec,
    Hyperparams,
    MoEModel,
    RoutedData,
    RoutingPlan,
    build_model,
    classifier_flops,
    expert_forward,
    gate_forward,
    infer,
    inference_flops,
    joint_train,
    save_classifier,
    save_model,
    train_classifier,
    train_traditional,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("dfcp", "traditional", "dense")
REPORT_NAMES = {"dfcp": "dfcp-moe", "traditional": "traditional-moe", "dense": "dense"}


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class PurityError(RuntimeError):
    """Average pseudo-label purity fell below the configured floor."""

    def __init__(self, report: pl.PurityReport, floor: float):
        super().__init__(f"average purity {report.average:.4f} below floor {floor}\n{report.table()}")
        self.report = report
        self.floor = floor


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | csv | image
    classes: int = 6
    dim: int = 8
    samples_per_class: int = 100
    spread: float = 1.0
    separation: float = 8.0
    imbalance: float = 1.0  # largest / smallest class size
    box: float = 40.0  # class means are drawn from [-box, box]^dim, in units of spread
    path: str = ""
    seed: int = -1  # -1: derive from the experiment seed


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    trusted_fraction: float = 0.1
    min_trusted_per_class: int = 4


@dataclass
class ExtractorSection:
    kind: str = "random-projection"
    output_dim: int = 32
    conv_filters: tuple[int, ...] = (4,)
    conv_size: int = 3
    standardize: bool = False


@dataclass
class ClusteringSection:
    k: int = 0  # 0: number of trusted classes
    n_init: int = 10
    max_iter: int = 300
    neighbor_min: int = 3
    distance_threshold: float = 0.8
    sweep: bool = True
    sweep_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    neighbor_rule: str = "member"


@dataclass
class SiameseSection:
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    margin: float = 1.0
    epochs: int = 15
    batch_pairs: int = 32
    batches_per_epoch: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    standard_contrastive: bool = True


@dataclass
class LabelsSection:
    purity_floor: float = 0.8
    tau_grid_size: int = 64
    validation_fraction: float = 0.5  # trusted share held out from encoder training to pick tau


@dataclass
class MoESection:
    leakage: float = 0.1
    epochs: int = 30
    top_k: int = 0  # 0: full mixture
    gate_optimizer: str = "adam"
    gate_lr: float = 1e-2
    gate_batch_size: int = 32
    gate_weight_decay: float = 1e-4


@dataclass
class DenseSection:
    epochs: int = 30


@dataclass
class SearchSection:
    trials: int = 6
    proxy_epochs: int = 10
    fc1_min: int = 8
    fc1_max: int = 64
    fc2_min: int = 4
    fc2_max: int = 32
    lr_min: float = 1e-3
    lr_max: float = 5e-2
    optimizers: tuple[str, ...] = ("sgd", "adam", "rmsprop")
    batch_sizes: tuple[int, ...] = (16, 32, 64)
    conv_filters: tuple[int, ...] = (0,)


@dataclass
class ReportSection:
    wall_clock: bool = False
    precompute_experts: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    siamese: SiameseSection = field(default_factory=SiameseSection)
    labels: LabelsSection = field(default_factory=LabelsSection)
    moe: MoESection = field(default_factory=MoESection)
    dense: DenseSection = field(default_factory=DenseSection)
    search: SearchSection = field(default_factory=SearchSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> "ExperimentConfig":
        d = self.dataset
        if d.kind not in ("synthetic", "csv", "image"):
            raise ConfigError(f"dataset.kind must be synthetic, csv or image, got {d.kind!r}")
        if d.kind == "synthetic":
            if d.classes < 2:
                raise ConfigError("dataset.classes must be at least 2")
            if d.samples_per_class < 4:
                raise ConfigError("dataset.samples_per_class must be at least 4")
            if d.dim < 1:
                raise ConfigError("dataset.dim must be positive")
            if d.imbalance < 1:
                raise ConfigError("dataset.imbalance is a size ratio and must be >= 1")
        elif not d.path:
            raise ConfigError(f"dataset.path is required for dataset.kind = {d.kind}")
        for name in ("test_fraction", "trusted_fraction"):
            v = getattr(self.split, name)
            if not 0 < v < 1:
                raise ConfigError(f"split.{name} must lie in (0, 1), got {v}")
        if not 0 < self.labels.validation_fraction < 1:
            raise ConfigError("labels.validation_fraction must lie in (0, 1)")
        if self.split.min_trusted_per_class < 3:
            raise ConfigError("split.min_trusted_per_class must be >= 3 (encoder fit needs 2, tau needs 1)")
        if not 0 <= self.moe.leakage < 1:
            raise ConfigError("moe.leakage must lie in [0, 1)")
        if not 0 <= self.labels.purity_floor <= 1:
            raise ConfigError("labels.purity_floor must lie in [0, 1]")
        if self.search.trials < 1:
            raise ConfigError("search.trials must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.refine_config()
            self.search_space()
            ExtractorConfig(self.extractor.kind, self.extractor.output_dim, 0,
                            tuple(self.extractor.conv_filters), self.extractor.conv_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def refine_config(self) -> cl.RefineConfig:
        c = self.clustering
        return cl.RefineConfig(c.neighbor_min, c.distance_threshold, tuple(c.sweep_grid), c.neighbor_rule)

    def siamese_config(self) -> pl.SiameseConfig:
        s = self.siamese
        return pl.SiameseConfig(tuple(s.hidden), s.embed_dim, s.margin, s.epochs, s.batch_pairs,
                                s.batches_per_epoch, s.optimizer, s.lr, s.standard_contrastive)

    def search_space(self) -> "HyperparamSpace":
        s = self.search
        return HyperparamSpace((s.fc1_min, s.fc1_max), (s.fc2_min, s.fc2_max), (s.lr_min, s.lr_max),
                               tuple(s.optimizers), tuple(s.batch_sizes), tuple(s.conv_filters))

    def gate_hyper(self) -> Hyperparams:
        m = self.moe
        return Hyperparams(lr=m.gate_lr, optimizer=m.gate_optimizer, batch_size=m.gate_batch_size,
                           weight_decay=m.gate_weight_decay)

    def resolved(self) -> dict:
        """Everything that determines the results (thread count excluded)."""
        d = asdict(self)
        d.pop("threads")
        return d


_SECTIONS = {f.name for f in fields(ExperimentConfig) if f.name not in ("seed", "threads")}


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_coerce(p, inner, key) for p in parts)
        if hint is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(hint, '__name__', hint)}") from None


def apply_overrides(cfg: ExperimentConfig, items: dict) -> ExperimentConfig:
    """Set dotted keys (``clustering.k``) from string values; unknown keys are errors."""
    top_hints = typing.get_type_hints(ExperimentConfig)
    for key, raw in items.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in ("seed", "threads"):
            setattr(cfg, parts[0], _coerce(raw, top_hints[parts[0]], key))
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(cfg, parts[0])
        hints = typing.get_type_hints(type(section))
        if parts[1] not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, parts[1], _coerce(raw, hints[parts[1]], key))
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = value
    return apply_overrides(ExperimentConfig(), items).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def derive_seed(seed: int, stage: str) -> int:
    """Stable per-stage seed from the experiment seed and a stage tag."""
    tag = int.from_bytes(stage.encode()[:8].ljust(8, b"\0"), "little")
    ss = np.random.SeedSequence([seed, tag, len(stage)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    samples: np.ndarray  # (n, ...) raw samples
    labels: np.ndarray
    means: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def _class_sizes(spec: DatasetConfig) -> list:
    if spec.imbalance == 1:
        return [spec.samples_per_class] * spec.classes
    ratios = np.geomspace(1.0, 1.0 / spec.imbalance, spec.classes)
    return [max(4, int(round(spec.samples_per_class * r))) for r in ratios]


def generate_synthetic(spec: DatasetConfig, seed: Optional[int] = None) -> Dataset:
    """Isotropic Gaussian blobs whose means are pairwise at least ``separation * spread`` apart."""
    if spec.spread <= 0:
        raise ValueError("spread must be positive")
    if spec.classes < 2 or spec.samples_per_class < 4:
        raise ValueError("need at least 2 classes and 4 samples per class")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    gap = spec.separation * spec.spread
    box = spec.box * spec.spread
    if box <= 0:
        raise ValueError("box must be positive")
    means = []
    for _ in range(10000):
        m = rng.uniform(-box, box, spec.dim)
        if all(np.linalg.norm(m - o) >= gap for o in means):
            means.append(m)
            if len(means) == spec.classes:
                break
    if len(means) < spec.classes:
        raise ValueError("could not place class means at the requested separation")
    means = np.array(means)
    xs, ys = [], []
    for c, n in enumerate(_class_sizes(spec)):
        xs.append(means[c] + spec.spread * rng.standard_normal((n, spec.dim)))
        ys.append(np.full(n, c))
    return Dataset(np.vstack(xs), np.concatenate(ys), means)


def load_csv_dataset(path) -> Dataset:
    """CSV with a ``label`` column; every other column is a numeric feature."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "label" not in reader.fieldnames:
            raise ValueError(f"{path}: missing 'label' column")
        cols = [c for c in reader.fieldnames if c != "label"]
        xs, ys = [], []
        for rec in reader:
            ys.append(int(rec["label"]))
            xs.append([float(rec[c]) for c in cols])
    if not xs:
        raise ValueError(f"{path}: no rows")
    return Dataset(np.array(xs), np.array(ys))


def load_image_manifest(path) -> Dataset:
    """Manifest CSV ``path,label``; images are equally sized and scaled to [0, 1]."""
    from PIL import Image

    root = Path(path).parent
    imgs, ys = [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            with Image.open(root / rec["path"]) as im:
                a = np.asarray(im, dtype=np.float64) / 255.0
            if a.ndim == 2:
                a = a[:, :, None]
            if imgs and a.shape != imgs[0].shape:
                raise ValueError(f"{rec['path']}: shape {a.shape} differs from {imgs[0].shape}")
            imgs.append(a)
            ys.append(int(rec["label"]))
    if not imgs:
        raise ValueError(f"{path}: manifest lists no images")
    return Dataset(np.stack(imgs), np.array(ys))


def stratified_split(y, fraction: float, seed: int, min_per_class: int = 1):
    """Indices ``(rest, picked)`` with about ``fraction`` of every class picked."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(y):
        rows = rng.permutation(np.flatnonzero(y == c))
        n = max(min_per_class, int(round(fraction * len(rows))))
        if n >= len(rows):
            raise ValueError(f"class {c} has {len(rows)} samples; cannot hold out {n}")
        picked.append(rows[:n])
    picked = np.sort(np.concatenate(picked))
    rest = np.setdiff1d(np.arange(len(y)), picked)
    return rest, picked


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class HyperparamSpace:
    fc1: tuple[int, int] = (8, 64)
    fc2: tuple[int, int] = (4, 32)
    lr: tuple[float, float] = (1e-3, 5e-2)
    optimizers: tuple[str, ...] = ("sgd", "adam", "rmsprop")
    batch_sizes: tuple[int, ...] = (16, 32, 64)
    conv_filters: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("fc1", "fc2", "lr"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < low <= high")
        if not self.optimizers or not set(self.optimizers) <= {"sgd", "adam", "rmsprop"}:
            raise ValueError("optimizers must be a non-empty subset of sgd, adam, rmsprop")
        if not self.batch_sizes or not set(self.batch_sizes) <= {16, 32, 64}:
            raise ValueError("batch sizes must be a non-empty subset of 16, 32, 64")
        if not self.conv_filters or min(self.conv_filters) < 0:
            raise ValueError("conv_filters must be non-empty and non-negative")

    def sample(self, rng: np.random.Generator) -> Hyperparams:
        lo, hi = np.log(self.lr[0]), np.log(self.lr[1])
        return Hyperparams(
            fc1=int(rng.integers(self.fc1[0], self.fc1[1] + 1)),
            fc2=int(rng.integers(self.fc2[0], self.fc2[1] + 1)),
            lr=float(np.exp(rng.uniform(lo, hi))),
            optimizer=str(self.optimizers[rng.integers(len(self.optimizers))]),
            batch_size=int(self.batch_sizes[rng.integers(len(self.batch_sizes))]),
            conv_filters=int(self.conv_filters[rng.integers(len(self.conv_filters))]),
        )


class SearchError(RuntimeError):
    pass


@dataclass
class Trial:
    index: int
    params: object
    seed: int
    score: Optional[float] = None
    error: Optional[str] = None


@dataclass
class SearchResult:
    best: object
    best_score: float
    trials: list

    def to_dict(self) -> dict:
        def enc(p):
            return [asdict(h) for h in p] if isinstance(p, (list, tuple)) else asdict(p)
        return {
            "best": enc(self.best),
            "best_score": self.best_score,
            "trials": [{"index": t.index, "seed": t.seed, "score": t.score, "error": t.error,
                        "params": enc(t.params)} for t in self.trials],
        }


def random_search(space: HyperparamSpace, trials: int, objective: Callable, seed: int,
                  group: int = 0, threads: int = 1) -> SearchResult:
    """Seeded random search maximizing ``objective(params, trial_seed)``.

    With ``group > 0`` each trial draws a list of ``group`` configurations (one
    per expert).  Ties go to the earliest trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    plan = []
    for i in range(trials):
        params = [space.sample(rng) for _ in range(group)] if group else space.sample(rng)
        plan.append(Trial(i, params, int(rng.integers(2 ** 31))))

    def run(t: Trial) -> Trial:
        try:
            t.score = float(objective(t.params, t.seed))
            if not np.isfinite(t.score):
                raise ValueError("objective returned a non-finite score")
        except Exception as exc:  # every failure is reported, the search goes on
            t.score, t.error = None, f"{type(exc).__name__}: {exc}"
        return t

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(run, plan))
    else:
        done = [run(t) for t in plan]
    ok = [t for t in done if t.score is not None]
    if not ok:
        raise SearchError("every search trial failed:\n" + "\n".join(f"  trial {t.index}: {t.error}" for t in done))
    best = ok[0]
    for t in ok[1:]:
        if t.score > best.score:
            best = t
    return SearchResult(best.params, best.score, done)


# ---------------------------------------------------------------------------
# models


def dense_spec(input_dim: int, n_classes: int, h: Hyperparams) -> ExpertSpec:
    return ExpertSpec(input_dim, n_classes, h.hidden, h.conv_filters, 4 if h.conv_filters else 1)


def train_dense(x, y, n_classes: int, hyper: Hyperparams, epochs: int, seed: int):
    """Single classifier on all training rows; returns ``(model, loss log)``."""
    model = Expert.create(dense_spec(np.shape(x)[1], n_classes, hyper), seed)
    return train_classifier(model, x, y, hyper, epochs, seed)


def matched_dense(model: MoEModel, seed: int = 0) -> Expert:
    """Smallest two-layer classifier (widths w, w/2) with at least the mixture's parameter count."""
    target = model.param_count()
    w = 2
    while True:
        spec = ExpertSpec(model.input_dim, model.n_classes, (w, max(1, w // 2)))
        cand = Expert.create(spec, seed)
        if cand.params.count() >= target:
            return cand
        w += 1


def _patches_for(dim: int, hypers) -> int:
    return 4 if any(h.conv_filters for h in hypers) and dim % 4 == 0 else 1


def build_dfcp(input_dim: int, n_classes: int, hypers: Sequence[Hyperparams], leakage: float,
               home_classes: Sequence[int], seed: int) -> MoEModel:
    n = len(hypers)
    routing = RoutingPlan("dfcp", leakage, {c: c for c in range(n)})
    conv = [h.conv_filters for h in hypers] if any(h.conv_filters for h in hypers) else None
    return build_model(input_dim, n_classes, [h.hidden for h in hypers], seed, routing,
                       conv_filters=conv, patches=_patches_for(input_dim, hypers),
                       home_classes=list(home_classes))


def build_traditional(input_dim: int, n_classes: int, hypers: Sequence[Hyperparams], seed: int) -> MoEModel:
    conv = [h.conv_filters for h in hypers] if any(h.conv_filters for h in hypers) else None
    return build_model(input_dim, n_classes, [h.hidden for h in hypers], seed,
                       RoutingPlan("traditional", 0.0), conv_filters=conv,
                       patches=_patches_for(input_dim, hypers))


def predict_proba(model, x) -> np.ndarray:
    if isinstance(model, MoEModel):
        return infer(model, x).probabilities
    return expert_forward(model, x)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    kind: str
    per_class_ap: dict
    mAP: float
    balanced_accuracy: float
    flops: int
    params: int
    inference_ms: Optional[float] = None
    training_s: Optional[float] = None
    top_k: Optional[int] = None
    per_expert: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        d["per_class_ap"] = {int(k): v for k, v in d["per_class_ap"].items()}
        return cls(**d)


def _per_expert_table(model: MoEModel, x, y) -> list:
    g = gate_forward(model.gate, x)
    rows = []
    for j, e in enumerate(model.experts):
        home = e.home_class
        if home is None:  # self-organized: the class this expert is trusted with most
            classes = np.unique(y)
            home = int(classes[np.argmax([g[y == c, j].mean() for c in classes])])
        pred = np.argmax(expert_forward(e, x), axis=1)
        sel = y == home
        rows.append({
            "expert": j,
            "home_class": int(home),
            "mean_precision": precision_for_class(y, pred, home),
            "mean_gate_weight": float(g[sel, j].mean()) if sel.any() else 0.0,
        })
    return rows


def _median_latency_ms(model, x, top_k, passes: int = 3) -> float:
    times = []
    for _ in range(passes):
        for row in x:
            t0 = time.perf_counter()
            if isinstance(model, MoEModel):
                infer(model, row, top_k)
            else:
                expert_forward(model, row)
            times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def evaluate(kind: str, model, x, y, top_k: Optional[int] = None, wall_clock: bool = False,
             precompute_experts: bool = False, training_s: Optional[float] = None) -> EvaluationReport:
    """mAP, balanced accuracy, analytic flops and (optionally) latency on a labeled test set."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise ValueError("evaluation needs a test set with at least two classes")
    if isinstance(model, MoEModel):
        res = infer(model, x, top_k)
        probs, pred = res.probabilities, res.predicted
        flops = inference_flops(model, top_k, precompute_experts)
        params = model.param_count()
        experts = _per_expert_table(model, x, y)
    else:
        probs = expert_forward(model, x)
        pred = np.argmax(probs, axis=1)
        flops = classifier_flops(model)
        params = model.params.count()
        experts = []
    ap = per_class_average_precision(y, probs, np.unique(y))
    return EvaluationReport(
        kind=kind,
        per_class_ap=ap,
        mAP=mean_average_precision(y, probs, np.unique(y)),
        balanced_accuracy=balanced_accuracy(y, pred),
        flops=int(flops),
        params=int(params),
        inference_ms=_median_latency_ms(model, x, top_k) if wall_clock else None,
        training_s=training_s if wall_clock else None,
        top_k=top_k,
        per_expert=experts,
    )


# ---------------------------------------------------------------------------
# pipeline


def _proxy_split(n: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    cut = max(1, int(round(0.8 * n)))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


class Pipeline:
    """Lazily evaluated stages of one experiment; each stage is computed once."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._cache = {}

    def _stage(self, name: str, fn: Callable):
        if name not in self._cache:
            try:
                self._cache[name] = fn()
            except (StageError, PurityError, ConfigError):
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        return self._cache[name]

    def seed(self, stage: str) -> int:
        return derive_seed(self.cfg.seed, stage)

    # data ---------------------------------------------------------------

    @property
    def dataset(self) -> Dataset:
        def load():
            d = self.cfg.dataset
            if d.kind == "synthetic":
                return generate_synthetic(d, d.seed if d.seed >= 0 else self.seed("dataset"))
            if d.kind == "csv":
                return load_csv_dataset(d.path)
            return load_image_manifest(d.path)
        return self._stage("dataset", load)

    @property
    def split(self):
        """``(train rows, test rows, trusted positions within train)``."""
        def run():
            y = self.dataset.labels
            if len(np.unique(y)) < 2:
                raise ConfigError("the dataset must contain at least two classes")
            s = self.cfg.split
            train, test = stratified_split(y, s.test_fraction, self.seed("split"))
            _, trusted = stratified_split(y[train], s.trusted_fraction, self.seed("trusted"),
                                          s.min_trusted_per_class)
            return train, test, trusted
        return self._stage("split", run)

    @property
    def classes(self) -> np.ndarray:
        return self.dataset.classes

    @property
    def n_outputs(self) -> int:
        """Class count plus the reserved outlier class."""
        return int(self.classes.max()) + 2

    @property
    def outlier_class(self) -> int:
        return self.n_outputs - 1

    @property
    def features(self) -> tuple[FeatureSet, FeatureSet]:
        def run():
            e = self.cfg.extractor
            ecfg = ExtractorConfig(e.kind, e.output_dim, self.seed("extractor"), tuple(e.conv_filters),
                                   e.conv_size, e.standardize)
            data = self.dataset
            params = init_extractor(ecfg, data.samples.shape[1:])
            train, test, trusted = self.split
            labels = [None] * len(train)
            for t in trusted:
                labels[t] = int(data.labels[train[t]])
            ftrain = extract_set(data.samples[train], ecfg, params, labels, self.cfg.threads)
            ftest = extract_set(data.samples[test], ecfg, params, None, self.cfg.threads)
            ftrain.source_ids = train.astype(np.int64)
            ftest.source_ids = test.astype(np.int64)
            if e.standardize:
                st = Standardizer.fit(ftrain.values)
                ftrain, ftest = st.apply(ftrain), st.apply(ftest)
            return ftrain, ftest
        return self._stage("extract", run)

    @property
    def trusted(self) -> FeatureSet:
        ftrain = self.features[0]
        return ftrain.subset(np.flatnonzero(ftrain.trusted_mask()))

    # clustering ---------------------------------------------------------

    @property
    def initial(self) -> cl.ClusterSet:
        def run():
            c = self.cfg.clustering
            k = c.k or len(np.unique([l for l in self.trusted.labels]))
            return cl.kmeans(self.features[0], k, seed=self.seed("kmeans"), max_iter=c.max_iter,
                             n_init=c.n_init)
        return self._stage("cluster", run)

    @property
    def initial_dbi(self) -> cl.DbiReport:
        return self._stage("dbi", lambda: cl.davies_bouldin(self.features[0], self.initial))

    @property
    def sweep(self) -> cl.SweepResult:
        def run():
            rcfg = self.cfg.refine_config()
            if self.cfg.clustering.sweep:
                return cl.sweep_threshold(self.features[0], self.initial, rcfg)
            refined = cl.refine(self.features[0], self.initial, rcfg)
            rep = cl.davies_bouldin(self.features[0], refined) if refined.k >= 2 else None
            return cl.SweepResult(rcfg.distance_threshold, [(rcfg.distance_threshold, rep, None)], refined)
        return self._stage("refine", run)

    @property
    def refined(self) -> cl.ClusterSet:
        return self.sweep.best

    # pseudo-labels ------------------------------------------------------

    @property
    def trusted_parts(self) -> tuple[FeatureSet, FeatureSet]:
        """Trusted rows split into an encoder-fitting part and a held-out part for tau."""
        def run():
            t = self.trusted
            fit, val = stratified_split(np.array(t.labels), self.cfg.labels.validation_fraction,
                                        self.seed("trusted-val"))
            return t.subset(fit), t.subset(val)
        return self._stage("trusted-split", run)

    @property
    def encoder(self) -> tuple[pl.SiameseEncoder, list]:
        return self._stage("siamese", lambda: pl.train_siamese(self.trusted_parts[0], self.cfg.siamese_config(),
                                                               self.seed("siamese")))

    @property
    def tau_sweep(self) -> pl.ThresholdSweep:
        """tau* from held-out x fitted trusted pairs, mirroring how pool rows meet trusted rows."""
        def run():
            enc, _ = self.encoder
            fit, val = self.trusted_parts
            iv, jf = np.meshgrid(np.arange(len(val)), np.arange(len(fit)), indexing="ij")
            iv, jf = iv.ravel(), jf.ravel()
            h = (np.array(val.labels)[iv] == np.array(fit.labels)[jf]).astype(int)
            d = pl.pairwise_embedding_distances(enc, val.values, fit.values).ravel()
            grid = pl.random_tau_grid(d, self.cfg.labels.tau_grid_size, self.seed("tau"))
            return pl.select_threshold(enc, (val.values[iv], fit.values[jf], h), grid)
        return self._stage("threshold", run)

    @property
    def pseudo_labels(self) -> pl.PseudoLabeledSet:
        def run():
            enc, _ = self.encoder
            return pl.assign_labels(enc, self.tau_sweep.tau_star, self.trusted, self.features[0],
                                    self.refined, self.outlier_class)
        return self._stage("pseudo-label", run)

    @property
    def purity(self) -> pl.PurityReport:
        return self._stage("purity", lambda: pl.purity(self.refined, self.pseudo_labels))

    @property
    def truth_purity(self) -> pl.PurityReport:
        train = self.split[0]
        return self._stage("purity-truth", lambda: pl.purity(self.refined, self.dataset.labels[train]))

    def check_purity(self) -> pl.PurityReport:
        rep = self.purity
        if rep.average < self.cfg.labels.purity_floor:
            raise PurityError(rep, self.cfg.labels.purity_floor)
        return rep

    # training data ------------------------------------------------------

    @property
    def routed(self) -> RoutedData:
        """Clustered training rows with their pseudo-labels; refinement outliers are left out."""
        def run():
            self.check_purity()
            keep = self.refined.assignments >= 0
            return RoutedData(self.features[0].values[keep], self.pseudo_labels.labels[keep],
                              self.refined.assignments[keep])
        return self._stage("routing", run)

    @property
    def home_classes(self) -> list:
        r = self.routed
        return [int(np.bincount(r.y[r.cluster == c]).argmax()) for c in range(self.refined.k)]

    def _train_truth(self):
        ftrain = self.features[0]
        return ftrain.values, self.dataset.labels[self.split[0]]

    # search -------------------------------------------------------------

    def _objective(self, kind: str, epochs: int):
        cfg = self.cfg
        if kind == "dfcp":
            r = self.routed
            fit, val = _proxy_split(len(r.y), self.seed("proxy-dfcp"))

            def objective(hypers, seed):
                sub = RoutedData(r.x[fit], r.y[fit], r.cluster[fit])
                m = build_dfcp(r.x.shape[1], self.n_outputs, hypers, cfg.moe.leakage, self.home_classes, seed)
                joint_train(m, sub, hypers, epochs, seed, cfg.gate_hyper())
                return balanced_accuracy(r.y[val], infer(m, r.x[val]).predicted)
            return objective
        x, y = self._train_truth()
        fit, val = _proxy_split(len(y), self.seed(f"proxy-{kind}"))
        if kind == "traditional":
            def objective(hypers, seed):
                m = build_traditional(x.shape[1], self.n_outputs, hypers, seed)
                train_traditional(m, x[fit], y[fit], hypers, epochs, seed, cfg.gate_hyper())
                return balanced_accuracy(y[val], infer(m, x[val]).predicted)
            return objective

        def objective(h, seed):
            m, _ = train_dense(x[fit], y[fit], self.n_outputs, h, epochs, seed)
            return balanced_accuracy(y[val], np.argmax(expert_forward(m, x[val]), axis=1))
        return objective

    def search(self, kind: str) -> SearchResult:
        def run():
            s = self.cfg.search
            group = self.refined.k if kind in ("dfcp", "traditional") else 0
            return random_search(self.cfg.search_space(), s.trials, self._objective(kind, s.proxy_epochs),
                                 self.seed(f"search-{kind}"), group, self.cfg.threads)
        return self._stage(f"search-{kind}", run)

    # training -----------------------------------------------------------

    def train(self, kind: str):
        """``(model, training seconds, loss log)`` for one model kind."""
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")

        def run():
            cfg = self.cfg
            best = self.search(kind).best
            seed = self.seed(f"train-{kind}")
            t0 = time.perf_counter()
            if kind == "dfcp":
                r = self.routed
                m = build_dfcp(r.x.shape[1], self.n_outputs, best, cfg.moe.leakage, self.home_classes, seed)
                m, hist = joint_train(m, r, best, cfg.moe.epochs, seed, cfg.gate_hyper())
            elif kind == "traditional":
                x, y = self._train_truth()
                m = build_traditional(x.shape[1], self.n_outputs, best, seed)
                m, hist = train_traditional(m, x, y, best, cfg.moe.epochs, seed, cfg.gate_hyper())
            else:
                x, y = self._train_truth()
                m, hist = train_dense(x, y, self.n_outputs, best, cfg.dense.epochs, seed)
            return m, time.perf_counter() - t0, hist
        return self._stage(f"train-{kind}", run)

    def evaluate(self, kind: str) -> EvaluationReport:
        def run():
            model, secs, _ = self.train(kind)
            ftest = self.features[1]
            y = self.dataset.labels[self.split[1]]
            top_k = (self.cfg.moe.top_k or None) if kind != "dense" else None
            rep = self.cfg.report
            return evaluate(REPORT_NAMES[kind], model, ftest.values, y, top_k, rep.wall_clock,
                            rep.precompute_experts, secs)
        return self._stage(f"evaluate-{kind}", run)

    def reports(self) -> dict:
        return {kind: self.evaluate(kind) for kind in MODEL_KINDS}


# ---------------------------------------------------------------------------
# reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


COMPARISON_ROWS = (
    ("mAP", "mAP"),
    ("balanced_accuracy", "balanced_accuracy"),
    ("inference_ms", "inference_ms"),
    ("training_s", "training_s"),
    ("flops_per_input", "flops"),
    ("params", "params"),
)


def write_comparison_csv(reports: dict, path) -> None:
    names = [REPORT_NAMES[k] for k in MODEL_KINDS if k in reports]
    with open(path, "w", newline="") as fh:
        fh.write("# metric = row name; mAP and balanced_accuracy on the held-out split; "
                 "inference_ms = median per-sample latency; training_s = training wall-clock; "
                 "flops_per_input from the analytic cost model; params = trainable parameters; "
                 "empty cell = not measured\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + names)
        for label, attr in COMPARISON_ROWS:
            w.writerow([label] + [_cell(getattr(reports[k], attr)) for k in MODEL_KINDS if k in reports])


def read_comparison_csv(path) -> dict:
    """``{metric: {model: value or None}}``."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.reader(lines))
    header = rows[0][1:]
    out = {}
    for rec in rows[1:]:
        out[rec[0]] = {m: (None if v == "" else float(v)) for m, v in zip(header, rec[1:])}
    return out


def write_per_expert_csv(reports: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# model = mixture kind; expert = expert index; home_class = class it serves; "
                 "mean_precision = test precision of its own prediction on home_class; "
                 "mean_gate_weight = mean gate weight on home_class test samples\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "expert", "home_class", "mean_precision", "mean_gate_weight"])
        for k in MODEL_KINDS:
            if k not in reports:
                continue
            for row in reports[k].per_expert:
                w.writerow([reports[k].kind, row["expert"], row["home_class"],
                            _cell(row["mean_precision"]), _cell(row["mean_gate_weight"])])


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_report(reports: dict, out_dir, extras: Optional[dict] = None) -> list:
    """Write the comparison tables (and any ``extras``: file name -> JSON object)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "comparison.csv", out / "per_expert.csv", out / "reports.json"]
        write_comparison_csv(reports, written[0])
        write_per_expert_csv(reports, written[1])
        _dump_json({k: r.to_dict() for k, r in reports.items()}, written[2])
        for name, obj in (extras or {}).items():
            _dump_json(obj, out / name)
            written.append(out / name)
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from exc
    return written


def load_reports(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    return {k: EvaluationReport.from_dict(v) for k, v in raw.items()}


def write_stage_outputs(p: Pipeline, out_dir, upto: str) -> list:
    """Artifacts of every stage up to ``upto`` (extract, cluster, refine, pseudo-label)."""
    from .features import write_features_csv

    order = ["extract", "cluster", "refine", "pseudo-label"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    stop = order.index(upto)
    if stop >= 0:
        write_features_csv(p.features[0], out / "features_train.csv")
        write_features_csv(p.features[1], out / "features_test.csv")
        written += [out / "features_train.csv", out / "features_test.csv"]
    if stop >= 1:
        cl.write_clusters_csv(p.initial, out / "clusters_initial.csv")
        cl.write_dbi_json(p.initial_dbi, out / "dbi_initial.json")
        written += [out / "clusters_initial.csv", out / "dbi_initial.json"]
    if stop >= 2:
        cl.write_clusters_csv(p.refined, out / "clusters.csv")
        _dump_json(p.sweep.to_dict(), out / "refine_sweep.json")
        if p.refined.k >= 2:
            cl.write_dbi_json(cl.davies_bouldin(p.features[0], p.refined), out / "dbi.json")
            written.append(out / "dbi.json")
        written += [out / "clusters.csv", out / "refine_sweep.json"]
    if stop >= 3:
        pl.write_sweep_json(p.tau_sweep, out / "threshold_sweep.json")
        pl.write_pseudo_labels_csv(p.pseudo_labels, out / "pseudo_labels.csv")
        _dump_json(purity_dict(p), out / "purity.json")
        written += [out / "threshold_sweep.json", out / "pseudo_labels.csv", out / "purity.json"]
    return written


def purity_dict(p: Pipeline) -> dict:
    def enc(r):
        return {"per_cluster": {str(c): v for c, v in r.per_cluster.items()},
                "sizes": {str(c): int(v) for c, v in r.sizes.items()}, "average": r.average}
    return {"pseudo_labels": enc(p.purity), "ground_truth": enc(p.truth_purity),
            "floor": p.cfg.labels.purity_floor}


def save_checkpoint(p: Pipeline, kind: str, out_dir) -> Path:
    model = p.train(kind)[0]
    path = Path(out_dir) / f"{kind}.ckpt"
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if isinstance(model, MoEModel):
        save_model(model, path)
    else:
        save_classifier(model, path)
    return path


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> tuple[dict, Pipeline]:
    """Full experiment; with ``out_dir`` every report, table and checkpoint is written there."""
    p = Pipeline(cfg)
    reports = p.reports()
    if out_dir is not None:
        write_stage_outputs(p, out_dir, "pseudo-label")
        extras = {
            "config_resolved.json": cfg.resolved(),
            "search.json": {k: p.search(k).to_dict() for k in MODEL_KINDS},
        }
        emit_report(reports, out_dir, extras)
        for kind in MODEL_KINDS:
            save_checkpoint(p, kind, out_dir)
    return reports, p


def benchmark_config(seed: int = 0) -> ExperimentConfig:
    """Separable six-class synthetic benchmark (600 samples, means >= 8 spreads apart)."""
    cfg = ExperimentConfig(seed=seed)
    cfg.dataset = replace(cfg.dataset, classes=6, dim=8, samples_per_class=100, spread=1.0, separation=8.0)
    cfg.extractor = replace(cfg.extractor, kind="identity", output_dim=8, standardize=True)
    return cfg.validate()
