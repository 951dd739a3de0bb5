"""Feature extractors mapping raw samples to fixed-length feature vectors."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numeric import (
    DTYPE,
    DimensionError,
    ParameterSet,
    check_finite,
    conv2d_forward,
    read_tensor,
    write_tensor,
)

EXTRACTOR_KINDS = ("identity", "random-projection", "conv-encoder")


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "random-projection"
    output_dim: int = 32
    seed: int = 0
    conv_filters: tuple[int, ...] = (4,)
    conv_size: int = 3
    standardize: bool = False

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")
        if self.kind == "conv-encoder" and len(self.conv_filters) < 1:
            raise ValueError("conv-encoder needs at least one conv layer")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeatureVector:
    values: np.ndarray
    source_id: int
    trusted_label: Optional[int] = None


@dataclass
class FeatureSet:
    """Row-aligned matrix of feature vectors with source ids and optional trusted labels."""

    values: np.ndarray
    source_ids: np.ndarray
    labels: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.values.ndim != 2:
            raise DimensionError(f"feature matrix must be 2-D, got {self.values.shape}")
        if not self.labels:
            self.labels = [None] * len(self.values)
        if len(self.source_ids) != len(self.values) or len(self.labels) != len(self.values):
            raise DimensionError("values, source_ids and labels must have equal length")
        if len(np.unique(self.source_ids)) != len(self.source_ids):
            raise ValueError("source ids must be unique")
        check_finite(self.values, "features")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> FeatureVector:
        return FeatureVector(self.values[i], int(self.source_ids[i]), self.labels[i])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def vectors(self) -> list[FeatureVector]:
        return [self[i] for i in range(len(self))]

    def trusted_mask(self) -> np.ndarray:
        return np.array([lab is not None for lab in self.labels], dtype=bool)

    def subset(self, rows) -> "FeatureSet":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureSet(self.values[rows], self.source_ids[rows],
                          [self.labels[r] for r in rows], self.provenance)


# ---------------------------------------------------------------------------


def _conv_shapes(input_shape, cfg: ExtractorConfig):
    h, w, c = input_shape
    shapes = []
    for k in cfg.conv_filters:
        if cfg.conv_size > min(h, w):
            raise DimensionError(f"filter size {cfg.conv_size} larger than {h}x{w} map")
        shapes.append((k, cfg.conv_size, cfg.conv_size, c))
        h, w, c = h - cfg.conv_size + 1, w - cfg.conv_size + 1, k
    return shapes, h * w * c


def conv_output_dim(input_shape, cfg: ExtractorConfig) -> int:
    return _conv_shapes(input_shape, cfg)[1]


def init_extractor(cfg: ExtractorConfig, input_shape) -> ParameterSet:
    """Seeded parameters for ``cfg`` given the raw sample shape (flat length or HxWxC)."""
    rng = np.random.default_rng(cfg.seed)
    params = ParameterSet(seed=cfg.seed)
    if cfg.kind == "random-projection":
        n_in = int(np.prod(input_shape))
        params.add("projection", rng.standard_normal((cfg.output_dim, n_in)), np.zeros(cfg.output_dim))
    elif cfg.kind == "conv-encoder":
        if len(input_shape) != 3:
            raise DimensionError(f"conv-encoder expects HxWxC samples, got shape {tuple(input_shape)}")
        shapes, out_dim = _conv_shapes(input_shape, cfg)
        if out_dim != cfg.output_dim:
            raise DimensionError(f"conv stack yields {out_dim} features but output_dim is {cfg.output_dim}")
        for i, shape in enumerate(shapes):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params.add(f"conv{i + 1}", rng.uniform(-bound, bound, size=shape), np.zeros(shape[0]))
    return params


def extract(raw, cfg: ExtractorConfig, params: ParameterSet) -> np.ndarray:
    """Feature vector of one raw sample."""
    x = np.asarray(raw, dtype=DTYPE)
    if cfg.kind == "identity":
        z = x.reshape(-1).copy()
        if z.shape[0] != cfg.output_dim:
            raise DimensionError(f"identity extractor expects {cfg.output_dim} values, got {z.shape[0]}")
    elif cfg.kind == "random-projection":
        proj = params.layers["projection"].weights
        flat = x.reshape(-1)
        if flat.shape[0] != proj.shape[1]:
            raise DimensionError(f"projection expects {proj.shape[1]} inputs, got {flat.shape[0]}")
        z = (proj @ flat) / np.sqrt(cfg.output_dim)
    else:
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3:
            raise DimensionError(f"conv-encoder expects an HxWxC sample, got shape {x.shape}")
        a = x
        n = len(cfg.conv_filters)
        for i in range(n):
            layer = params.layers[f"conv{i + 1}"]
            if layer.weights.shape[3] != a.shape[2]:
                raise DimensionError(f"conv{i + 1} expects {layer.weights.shape[3]} channels, got {a.shape[2]}")
            a = conv2d_forward(a, layer.weights, layer.bias)
            if i < n - 1:
                a = np.maximum(a, 0.0)
        z = a.reshape(-1)
        if z.shape[0] != cfg.output_dim:
            raise DimensionError(f"conv stack yields {z.shape[0]} features but output_dim is {cfg.output_dim}")
    return check_finite(z, "feature vector")


def extract_set(dataset: Sequence, cfg: ExtractorConfig, params: ParameterSet,
                labels: Optional[Sequence] = None, threads: int = 1) -> FeatureSet:
    """Extract every sample in order; source ids are 0..n-1."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot extract features from an empty dataset")

    def one(i):
        try:
            return extract(dataset[i], cfg, params)
        except Exception as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(n)))
    else:
        rows = [one(i) for i in range(n)]
    return FeatureSet(np.stack(rows), np.arange(n), list(labels) if labels is not None else [],
                      provenance=cfg.digest())


@dataclass
class Standardizer:
    """Per-feature standardization fitted on one set and applied to others."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, fs: FeatureSet) -> FeatureSet:
        return FeatureSet((fs.values - self.mean) / self.scale, fs.source_ids, fs.labels, fs.provenance)


# ---------------------------------------------------------------------------
# IO


def write_features_csv(fs: FeatureSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "label"] + [f"f{i}" for i in range(fs.dim)])
        for i in range(len(fs)):
            lab = fs.labels[i]
            w.writerow([int(fs.source_ids[i]), "" if lab is None else int(lab)]
                       + [repr(float(v)) for v in fs.values[i]])


def read_features_csv(path, provenance: str = "") -> FeatureSet:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["source_id", "label"]:
            raise ValueError(f"{path}: unexpected header {header[:2]}")
        ids, labels, rows = [], [], []
        for rec in r:
            ids.append(int(rec[0]))
            labels.append(int(rec[1]) if rec[1] != "" else None)
            rows.append([float(v) for v in rec[2:]])
    return FeatureSet(np.array(rows, dtype=DTYPE), np.array(ids), labels, provenance)


def write_features_bin(fs: FeatureSet, path) -> None:
    """Binary form: values tensor, then n source ids (i64) and n labels (i64, -1 = none)."""
    buf = io.BytesIO()
    write_tensor(buf, fs.values)
    buf.write(np.asarray(fs.source_ids, dtype="<i8").tobytes())
    buf.write(np.array([-1 if l is None else l for l in fs.labels], dtype="<i8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_features_bin(path) -> FeatureSet:
    buf = io.BytesIO(Path(path).read_bytes())
    values = read_tensor(buf)
    n = values.shape[0]
    ids = np.frombuffer(buf.read(8 * n), dtype="<i8").astype(np.int64)
    labs = np.frombuffer(buf.read(8 * n), dtype="<i8")
    return FeatureSet(values, ids, [None if l < 0 else int(l) for l in labs])
