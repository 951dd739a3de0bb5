"""Siamese similarity model, F1-driven threshold choice, label assignment and purity.

Pair labels follow the convention ``h = 1`` for a same-class pair.  The loss
formula is implemented literally in ``h``; under that formula a same-class
pair is pushed *out* to the margin.  ``standard=True`` feeds ``1 - h`` to the
formula instead, which gives the usual pull-together / push-apart behaviour
and is what training uses by default.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .clustering import OUTLIER, ClusterSet
from .features import FeatureSet, FeatureVector
from .numeric import Network, OptimizerState, init_params, mlp_specs, optimizer_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SiameseConfig:
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
class SiameseEncoder:
    """One parameter set shared by both branches."""

    network: Network
    margin: float = 1.0
    tau_star: Optional[float] = None

    @classmethod
    def create(cls, input_dim: int, cfg: SiameseConfig = SiameseConfig(), seed: int = 0):
        specs = mlp_specs("enc", input_dim, cfg.hidden, cfg.embed_dim)
        return cls(Network(specs, init_params(specs, seed)), cfg.margin)

    @property
    def params(self):
        return self.network.params

    def embed(self, x) -> np.ndarray:
        return self.network.forward(x)[0]


@dataclass
class PairSample:
    a: FeatureVector
    b: FeatureVector
    h: int

    def __post_init__(self):
        if self.h not in (0, 1):
            raise ValueError("pair label h must be 0 or 1")


def pair_loss(distance, h, margin: float):
    """(1-h)·½D² + h·½·max(0, margin-D)², elementwise."""
    d = np.asarray(distance, dtype=float)
    h = np.asarray(h, dtype=float)
    return (1 - h) * 0.5 * d ** 2 + h * 0.5 * np.maximum(0.0, margin - d) ** 2


def _pair_loss_grad(d, h, margin):
    return (1 - h) * d - h * np.maximum(0.0, margin - d)


def contrastive_loss(pair: PairSample, encoder: SiameseEncoder, margin: float,
                     standard: bool = False) -> float:
    if margin <= 0:
        raise ValueError("margin must be positive")
    d = similarity_distance(encoder, pair.a, pair.b)
    h = 1 - pair.h if standard else pair.h
    return float(pair_loss(d, h, margin))


def contrastive_batch(encoder: SiameseEncoder, xa: np.ndarray, xb: np.ndarray, h: np.ndarray,
                      margin: float, standard: bool = False, reduction: str = "mean"):
    """Loss over a batch of pairs and its gradient w.r.t. the shared parameters."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    n = len(xa)
    h_eff = 1 - np.asarray(h, dtype=float) if standard else np.asarray(h, dtype=float)
    out, cache = encoder.network.forward(np.vstack([xa, xb]))
    diff = out[:n] - out[n:]
    d = np.sqrt((diff * diff).sum(axis=1))
    losses = pair_loss(d, h_eff, margin)
    scale = 1.0 / n if reduction == "mean" else 1.0
    g = _pair_loss_grad(d, h_eff, margin) * scale
    unit = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
    d_out = np.vstack([g[:, None] * unit, -g[:, None] * unit])
    grads, _ = encoder.network.backward(cache, d_out)
    return float(losses.sum() * scale), grads


def _labels_of(trusted) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(trusted, FeatureSet):
        if any(l is None for l in trusted.labels):
            raise ValueError("every trusted sample needs a label")
        return trusted.values, np.asarray(trusted.labels, dtype=int)
    x, y = trusted
    return np.asarray(x, dtype=float), np.asarray(y, dtype=int)


def sample_pairs(y: np.ndarray, n_pairs: int, rng: np.random.Generator):
    """Balanced pairs: first half same-class, second half different-class."""
    classes = np.unique(y)
    by_class = {c: np.flatnonzero(y == c) for c in classes}
    pos_classes = [c for c in classes if len(by_class[c]) >= 2]
    n_pos = n_pairs // 2
    a, b, h = [], [], []
    for _ in range(n_pos):
        c = pos_classes[rng.integers(len(pos_classes))]
        i, j = rng.choice(by_class[c], size=2, replace=False)
        a.append(i), b.append(j), h.append(1)
    for _ in range(n_pairs - n_pos):
        c1, c2 = rng.choice(classes, size=2, replace=False)
        a.append(rng.choice(by_class[c1])), b.append(rng.choice(by_class[c2])), h.append(0)
    return np.array(a), np.array(b), np.array(h)


def train_siamese(trusted, cfg: SiameseConfig = SiameseConfig(), seed: int = 0):
    """Train a shared-weight encoder on pairs drawn from the trusted labeled subset.

    Returns ``(encoder, per-epoch mean loss)``.
    """
    x, y = _labels_of(trusted)
    counts = Counter(y.tolist())
    if len(counts) < 2:
        raise ValueError("trusted set needs at least two classes")
    if min(counts.values()) < 2:
        raise ValueError("every trusted class needs at least two samples")
    encoder = SiameseEncoder.create(x.shape[1], cfg, seed)
    state = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.batches_per_epoch):
            ia, ib, h = sample_pairs(y, cfg.batch_pairs, rng)
            loss, grads = contrastive_batch(encoder, x[ia], x[ib], h, cfg.margin, cfg.standard_contrastive)
            optimizer_step(encoder.params, grads, state)
            total += loss
        history.append(total / cfg.batches_per_epoch)
        log.debug("siamese epoch %d loss %.5f", epoch, history[-1])
    return encoder, history


def similarity_distance(encoder: SiameseEncoder, a, b) -> float:
    va = a.values if isinstance(a, FeatureVector) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, FeatureVector) else np.asarray(b, dtype=float)
    e = encoder.embed(np.vstack([va, vb]))
    return float(np.sqrt(((e[0] - e[1]) ** 2).sum()))


def pairwise_embedding_distances(encoder: SiameseEncoder, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ea, eb = encoder.embed(xa), encoder.embed(xb)
    diff = ea[:, None, :] - eb[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


# ---------------------------------------------------------------------------


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2PR/(P+R) rewritten over the counts so that exact ratios stay exact
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


@dataclass
class ThresholdSweep:
    taus: list
    scores: list  # (precision, recall, f1) per tau
    tau_star: float
    training_margin: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "sweep": [
                {"tau": t, "precision": p, "recall": r, "f1": f}
                for t, (p, r, f) in zip(self.taus, self.scores)
            ],
            "tau_star": self.tau_star,
            "training_margin": self.training_margin,
        }


def sweep_distances(distances, h, grid) -> ThresholdSweep:
    """Score each tau by predicting "same class" when distance <= tau; keep the best F1."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(t <= 0 for t in grid):
        raise ValueError("thresholds must be positive")
    d = np.asarray(distances, dtype=float)
    h = np.asarray(h, dtype=int)
    if not (np.any(h == 1) and np.any(h == 0)):
        raise ValueError("validation pairs must contain both similar and dissimilar pairs")
    scores = []
    for t in grid:
        same = d <= t
        tp = int(np.sum(same & (h == 1)))
        fp = int(np.sum(same & (h == 0)))
        fn = int(np.sum(~same & (h == 1)))
        scores.append(prf1(tp, fp, fn))
    best = None
    for t, s in zip(grid, scores):
        if best is None or s[2] > best[1] or (s[2] == best[1] and t < best[0]):
            best = (t, s[2])
    return ThresholdSweep(grid, scores, best[0])


def all_pairs(y: Sequence[int]):
    y = np.asarray(y)
    ia, ib = np.triu_indices(len(y), 1)
    return ia, ib, (y[ia] == y[ib]).astype(int)


def random_tau_grid(distances, n: int = 64, seed: int = 0) -> list:
    """Sorted seeded draws in (0, max distance]."""
    top = float(np.max(distances))
    if top <= 0:
        top = 1.0
    rng = np.random.default_rng(seed)
    draws = top * (1.0 - rng.random(n))
    return sorted(set(float(v) for v in draws))


def select_threshold(encoder: SiameseEncoder, pairs, grid) -> ThresholdSweep:
    """``pairs`` is a list of PairSample or a tuple ``(xa, xb, h)`` of arrays."""
    if isinstance(pairs, tuple):
        xa, xb, h = pairs
    else:
        xa = np.array([p.a.values for p in pairs])
        xb = np.array([p.b.values for p in pairs])
        h = np.array([p.h for p in pairs])
    ea, eb = encoder.embed(xa), encoder.embed(xb)
    d = np.sqrt(((ea - eb) ** 2).sum(axis=1))
    sweep = sweep_distances(d, h, grid)
    sweep.training_margin = encoder.margin
    encoder.tau_star = sweep.tau_star
    return sweep


# ---------------------------------------------------------------------------


@dataclass
class PseudoLabeledSet:
    source_ids: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    trusted: np.ndarray
    outlier_class: int

    def to_rows(self):
        for sid, lab, conf in zip(self.source_ids, self.labels, self.confidence):
            yield int(sid), int(lab), float(conf)


def assign_labels(encoder: SiameseEncoder, tau_star: float, trusted: FeatureSet,
                  pool: FeatureSet, clusters: ClusterSet, outlier_class: int) -> PseudoLabeledSet:
    """Label each pool row with its nearest trusted sample's class when within ``tau_star``.

    Rows that already carry a trusted label keep it.  Rows in the clustering
    outlier bucket go straight to ``outlier_class``.
    """
    if tau_star <= 0:
        raise ValueError("tau_star must be positive")
    tx, ty = _labels_of(trusted)
    if len(tx) == 0:
        raise ValueError("trusted set is empty")
    if len(pool) != len(clusters.assignments):
        raise ValueError("pool rows and cluster assignments differ in length")
    d = pairwise_embedding_distances(encoder, pool.values, tx)
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(len(pool)), nearest]
    labels = np.where(dmin <= tau_star, ty[nearest], outlier_class)
    labels[clusters.assignments == OUTLIER] = outlier_class
    confidence = tau_star - dmin
    is_trusted = pool.trusted_mask()
    for i in np.flatnonzero(is_trusted):
        labels[i] = int(pool.labels[i])
        confidence[i] = tau_star
    return PseudoLabeledSet(pool.source_ids.copy(), labels.astype(int), confidence, is_trusted, outlier_class)


@dataclass
class PurityReport:
    per_cluster: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    average: float = 0.0

    def table(self) -> str:
        lines = ["cluster size purity"]
        for c, p in self.per_cluster.items():
            lines.append(f"{c:>7} {self.sizes[c]:>4} {p:.4f}")
        lines.append(f"average {self.average:.4f}")
        return "\n".join(lines)


def purity(clusters: ClusterSet, labels) -> PurityReport:
    """Share of each cluster's modal label; the average is weighted by cluster size."""
    lab = labels.labels if isinstance(labels, PseudoLabeledSet) else np.asarray(labels)
    if len(lab) != len(clusters.assignments):
        raise ValueError("labels and assignments differ in length")
    rep = PurityReport()
    hit = total = 0
    for c in range(clusters.k):
        rows = clusters.members(c)
        if len(rows) == 0:
            log.warning("cluster %d is empty; skipped in purity", c)
            continue
        top = Counter(lab[rows].tolist()).most_common(1)[0][1]
        rep.per_cluster[c] = top / len(rows)
        rep.sizes[c] = len(rows)
        hit += top
        total += len(rows)
    rep.average = hit / total if total else 0.0
    return rep


def write_pseudo_labels_csv(pl: PseudoLabeledSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "label", "confidence"])
        for sid, lab, conf in pl.to_rows():
            w.writerow([sid, lab, repr(conf)])


def write_sweep_json(sweep: ThresholdSweep, path) -> None:
    with open(path, "w") as fh:
        json.dump(sweep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
