"""Mixture-of-experts model: gate, experts, losses, exact gradients and training loops.

Loss conventions
----------------
For a batch with rows ``i`` and per-expert own rows ``R_j``::

    L_g   = -sum_i log sum_j g_j(x_i) P(y_i | x_i, E_j)       (mixture NLL)
    L_e_j = -sum_{i in R_j} log P(y_i | x_i, E_j)              (expert NLL)
    total = a * L_g + b * sum_j L_e_j

With ``reduction="mean"`` each term is divided by its own row count.  The
joint training loops use ``a = b = 0.5``; for a single expert with identical
gate and expert rows this is bit-for-bit the plain classifier objective.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numeric import (
    DTYPE,
    PROB_FLOOR,
    DimensionError,
    Network,
    NonFiniteError,
    OptimizerState,
    ParameterSet,
    init_params,
    mlp_specs,
    nll,
    optimizer_step,
    read_params,
    read_str,
    softmax,
    write_params,
    write_str,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFCP"
NETWORK_MAGIC = b"DFNN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class GateSpec:
    input_dim: int
    n_experts: int
    hidden: tuple[int, ...] = ()
    patches: int = 1

    def layers(self):
        if self.n_experts < 1:
            raise ValueError("a gate needs at least one expert")
        first = "patch_sum" if self.patches > 1 else "dense"
        return mlp_specs("gate", self.input_dim, self.hidden, self.n_experts,
                         first_kind=first, patches=self.patches)


@dataclass(frozen=True)
class ExpertSpec:
    """Hidden widths, optional patch-conv front layer, softmax head over ``n_classes``."""

    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = (32, 16)
    conv_filters: int = 0
    patches: int = 1
    activation: str = "relu"

    def layers(self, prefix: str = "fc"):
        if self.conv_filters:
            return mlp_specs(prefix, self.input_dim, (self.conv_filters,) + tuple(self.hidden),
                             self.n_classes, activation=self.activation,
                             first_kind="patch_conv", patches=self.patches)
        return mlp_specs(prefix, self.input_dim, self.hidden, self.n_classes, activation=self.activation)


@dataclass
class GateNetwork:
    spec: GateSpec
    network: Network

    @classmethod
    def create(cls, spec: GateSpec, seed: int = 0):
        layers = spec.layers()
        return cls(spec, Network(layers, init_params(layers, seed, "xavier_normal")))

    @property
    def params(self) -> ParameterSet:
        return self.network.params


@dataclass
class Expert:
    spec: ExpertSpec
    network: Network
    home_cluster: Optional[int] = None
    home_class: Optional[int] = None

    @classmethod
    def create(cls, spec: ExpertSpec, seed: int = 0, home_cluster=None, home_class=None):
        layers = spec.layers()
        return cls(spec, Network(layers, init_params(layers, seed, "kaiming_uniform")),
                   home_cluster, home_class)

    @property
    def params(self) -> ParameterSet:
        return self.network.params


@dataclass
class RoutingPlan:
    mode: str = "dfcp"
    leakage: float = 0.1
    mapping: dict = field(default_factory=dict)  # cluster id -> expert id

    def __post_init__(self):
        if self.mode not in ("dfcp", "traditional"):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if not 0 <= self.leakage < 1:
            raise ValueError("leakage must lie in [0, 1)")

    def validate(self, n_experts: int) -> None:
        if self.mode == "traditional":
            if self.mapping:
                raise ValueError("a traditional MoE has no routing plan")
            return
        experts = sorted(self.mapping.values())
        if experts != list(range(n_experts)):
            raise ValueError(f"routing plan {self.mapping} is not a bijection onto {n_experts} experts")

    def home_of(self, expert: int) -> int:
        for c, e in self.mapping.items():
            if e == expert:
                return c
        raise KeyError(f"expert {expert} has no home cluster")


@dataclass
class MoEModel:
    gate: GateNetwork
    experts: list
    routing: RoutingPlan

    def __post_init__(self):
        if self.gate.spec.n_experts != len(self.experts):
            raise DimensionError(f"gate has {self.gate.spec.n_experts} outputs for {len(self.experts)} experts")
        dims = {e.spec.input_dim for e in self.experts} | {self.gate.spec.input_dim}
        if len(dims) != 1:
            raise DimensionError(f"gate and experts disagree on input dimension: {sorted(dims)}")
        if len({e.spec.n_classes for e in self.experts}) != 1:
            raise DimensionError("experts disagree on class count")
        self.routing.validate(len(self.experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_classes(self) -> int:
        return self.experts[0].spec.n_classes

    @property
    def input_dim(self) -> int:
        return self.gate.spec.input_dim

    def param_count(self) -> int:
        return self.gate.params.count() + sum(e.params.count() for e in self.experts)

    def copy(self) -> "MoEModel":
        gate = GateNetwork(self.gate.spec, Network(self.gate.network.specs, self.gate.params.copy()))
        experts = [Expert(e.spec, Network(e.network.specs, e.params.copy()), e.home_cluster, e.home_class)
                   for e in self.experts]
        return MoEModel(gate, experts, RoutingPlan(self.routing.mode, self.routing.leakage,
                                                   dict(self.routing.mapping)))


def build_model(input_dim: int, n_classes: int, expert_hidden: Sequence[tuple], seed: int,
                routing: RoutingPlan, gate_hidden: tuple = (), gate_patches: int = 1,
                conv_filters: Sequence[int] | None = None, patches: int = 1,
                home_classes: Sequence | None = None) -> MoEModel:
    """Fresh model with one expert per entry of ``expert_hidden`` (nonhomogeneous widths allowed)."""
    n = len(expert_hidden)
    gate = GateNetwork.create(GateSpec(input_dim, n, tuple(gate_hidden), gate_patches), seed)
    experts = []
    for j, hidden in enumerate(expert_hidden):
        spec = ExpertSpec(input_dim, n_classes, tuple(hidden),
                          conv_filters[j] if conv_filters else 0, patches if conv_filters else 1)
        home = routing.home_of(j) if routing.mode == "dfcp" else None
        experts.append(Expert.create(spec, seed + 1 + j, home,
                                     home_classes[j] if home_classes is not None else None))
    return MoEModel(gate, experts, routing)


# ---------------------------------------------------------------------------
# forward


def _rows(x) -> tuple[np.ndarray, bool]:
    a = np.asarray(x.values if hasattr(x, "values") else x, dtype=DTYPE)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def gate_forward(gate: GateNetwork, x) -> np.ndarray:
    a, single = _rows(x)
    if gate.spec.n_experts == 0:
        raise ValueError("gate has no experts")
    logits, _ = gate.network.forward(a)
    g = softmax(logits)
    return g[0] if single else g


def expert_forward(expert: Expert, x) -> np.ndarray:
    a, single = _rows(x)
    logits, _ = expert.network.forward(a)
    p = softmax(logits)
    return p[0] if single else p


def _mix(g: np.ndarray, probs: Sequence[np.ndarray]) -> np.ndarray:
    acc = g[:, 0:1] * probs[0]
    for j in range(1, len(probs)):
        acc = acc + g[:, j:j + 1] * probs[j]
    return acc


def mixture_forward(model: MoEModel, x) -> np.ndarray:
    a, single = _rows(x)
    g = gate_forward(model.gate, a)
    out = _mix(g, [expert_forward(e, a) for e in model.experts])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses


@dataclass
class MoEBatch:
    """Rows for the gate loss plus, per expert, the row indices forming its own batch."""

    x: np.ndarray
    y: np.ndarray
    expert_rows: Optional[list] = None

    def rows_for(self, j: int) -> np.ndarray:
        if self.expert_rows is None:
            return np.arange(len(self.x))
        return np.asarray(self.expert_rows[j], dtype=np.int64)


def _check_labels(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    return y


def expert_loss(expert_outputs: np.ndarray, true_labels) -> float:
    p = np.asarray(expert_outputs, dtype=DTYPE)
    y = _check_labels(true_labels, p.shape[1])
    if len(y) == 0:
        raise ValueError("expert batch is empty")
    return float(nll(p[np.arange(len(y)), y]).sum())


def gate_loss(model: MoEModel, batch: MoEBatch) -> float:
    if len(batch.x) == 0:
        raise ValueError("batch is empty")
    y = _check_labels(batch.y, model.n_classes)
    g = gate_forward(model.gate, batch.x)
    idx = np.arange(len(y))
    py = np.stack([expert_forward(e, batch.x)[idx, y] for e in model.experts], axis=1)
    return float(nll((g * py).sum(axis=1)).sum())


def combined_loss(model: MoEModel, batch: MoEBatch) -> float:
    """Same formula as :func:`gate_loss`, evaluated through ``mixture_forward``."""
    if len(batch.x) == 0:
        raise ValueError("batch is empty")
    y = _check_labels(batch.y, model.n_classes)
    p = mixture_forward(model, batch.x)
    return float(nll(p[np.arange(len(y)), y]).sum())


def _forward_cached(model, x):
    logits, gate_cache = model.gate.network.forward(x)
    g = softmax(logits)
    outs = []
    for e in model.experts:
        z, cache = e.network.forward(x)
        outs.append((softmax(z), cache))
    return g, gate_cache, outs


def total_loss(model: MoEModel, batch: MoEBatch, gate_weight: float = 1.0,
               expert_weight: float = 1.0, reduction: str = "sum") -> float:
    return _loss_and_grads(model, batch, gate_weight, expert_weight, reduction, want_grads=False)[0]


@dataclass
class MoEGradients:
    gate: dict
    experts: list
    loss: float
    gate_loss: float
    expert_losses: list


def backward(model: MoEModel, batch: MoEBatch, gate_weight: float = 1.0,
             expert_weight: float = 1.0, reduction: str = "sum") -> MoEGradients:
    """Exact gradients of :func:`total_loss` for the gate and every expert.

    Through the mixture term expert ``j`` receives ``post_j * (p_j - onehot)`` at its
    logits, where ``post_j = g_j P_j(y) / P(y)`` carries the gate weight ``g_j``;
    the gate logits receive ``g - post``.
    """
    return _loss_and_grads(model, batch, gate_weight, expert_weight, reduction, want_grads=True)[1]


def _loss_and_grads(model, batch, a, b, reduction, want_grads):
    if reduction not in ("sum", "mean"):
        raise ValueError("reduction must be 'sum' or 'mean'")
    x = np.asarray(batch.x, dtype=DTYPE)
    n = len(x)
    if n == 0:
        raise ValueError("batch is empty")
    y = _check_labels(batch.y, model.n_classes)
    idx = np.arange(n)
    g, gate_cache, outs = _forward_cached(model, x)
    py = np.stack([p[idx, y] for p, _ in outs], axis=1)
    mix = (g * py).sum(axis=1)
    lg = float(nll(mix).sum())
    sg = 1.0 / n if reduction == "mean" else 1.0
    le, own_counts, scales = [], [], []
    for j, (p, _) in enumerate(outs):
        rows = batch.rows_for(j)
        s = (1.0 / len(rows) if len(rows) else 0.0) if reduction == "mean" else 1.0
        le.append(float(nll(py[rows, j]).sum()) if len(rows) else 0.0)
        own_counts.append(np.bincount(rows, minlength=n).astype(DTYPE))
        scales.append(s)
    total = a * sg * lg
    for s, l in zip(scales, le):
        total = total + b * s * l
    if not want_grads:
        return total, None

    live = mix >= PROB_FLOOR
    post = np.where(live[:, None], g * py / np.where(live, mix, 1.0)[:, None], 0.0)
    coef_g = a * sg
    dh = coef_g * (g - post)
    gate_grads, _ = model.gate.network.backward(gate_cache, dh)
    expert_grads = []
    for j, (p, cache) in enumerate(outs):
        own = own_counts[j] * (py[:, j] >= PROB_FLOOR)
        coef = coef_g * post[:, j] + b * scales[j] * own
        dz = p.copy()
        dz[idx, y] -= 1.0
        dz = coef[:, None] * dz
        grads, _ = model.experts[j].network.backward(cache, dz)
        expert_grads.append(grads)
    for name, gd in [("gate", gate_grads)] + [(f"expert {j}", gd) for j, gd in enumerate(expert_grads)]:
        for key, arr in gd.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite gradient for {name} {key}")
    return total, MoEGradients(gate_grads, expert_grads, total, lg, le)


def closed_form_gradient_gap(model: MoEModel, batch: MoEBatch) -> dict:
    """Compare the closed-form output gradients quoted for this method with the exact ones.

    Quoted forms, per row ``i`` and expert ``j`` (indicator: label equals the
    expert's home class)::

        dL_e/dP_j = g_j / P(y) - 1[y = j]
        dL_g/dg_j = P_j(y) / P(y) - 1[y = j]

    Exact derivatives of the implemented mixture loss::

        dL_g/dP_j(y) = -g_j / P(y)
        dL_g/dg_j    = -P_j(y) / P(y)

    Returns the largest absolute difference for each.
    """
    x = np.asarray(batch.x, dtype=DTYPE)
    y = _check_labels(batch.y, model.n_classes)
    idx = np.arange(len(y))
    g = gate_forward(model.gate, x)
    py = np.stack([expert_forward(e, x)[idx, y] for e in model.experts], axis=1)
    mix = np.maximum((g * py).sum(axis=1), PROB_FLOOR)[:, None]
    homes = np.array([e.home_class if e.home_class is not None else j
                      for j, e in enumerate(model.experts)])
    ind = (y[:, None] == homes[None, :]).astype(DTYPE)
    quoted_e = g / mix - ind
    quoted_g = py / mix - ind
    return {
        "expert_output": float(np.abs(quoted_e - (-g / mix)).max()),
        "gate_output": float(np.abs(quoted_g - (-py / mix)).max()),
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class Hyperparams:
    """Per-network training settings (one row of the per-expert hyperparameter table)."""

    fc1: int = 32
    fc2: int = 16
    lr: float = 1e-2
    optimizer: str = "adam"
    batch_size: int = 32
    conv_filters: int = 0
    weight_decay: float = 0.0

    @property
    def hidden(self) -> tuple:
        return tuple(w for w in (self.fc1, self.fc2) if w > 0)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, lr=self.lr, weight_decay=self.weight_decay)


@dataclass
class RoutedData:
    """Labeled training rows with the cluster each row belongs to."""

    x: np.ndarray
    y: np.ndarray
    cluster: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.cluster = np.asarray(self.cluster, dtype=np.int64)
        if not len(self.x) == len(self.y) == len(self.cluster):
            raise DimensionError("x, y and cluster must have the same length")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [e["loss"] for e in self.epochs]


def batch_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _chunks(perm: np.ndarray, size: int) -> list:
    return [perm[s:s + size] for s in range(0, len(perm), size)]


def _step_all(model, grads, expert_states, gate_state):
    for e, gd, st in zip(model.experts, grads.experts, expert_states):
        optimizer_step(e.params, gd, st)
    optimizer_step(model.gate.params, grads.gate, gate_state)


def joint_train(model: MoEModel, data: RoutedData, hyper: Sequence[Hyperparams], epochs: int,
                seed: int, gate_hyper: Hyperparams = Hyperparams(lr=1e-2, weight_decay=1e-4)):
    """Conditionally routed joint training of the gate and all experts.

    Each round every expert draws its next home-cluster minibatch plus a
    ``leakage`` share from other clusters; the gate sees the union of those rows.
    """
    plan = model.routing
    if plan.mode != "dfcp":
        raise ValueError("joint_train needs a dfcp routing plan")
    if len(hyper) != model.n_experts:
        raise ValueError(f"{len(hyper)} hyperparameter sets for {model.n_experts} experts")
    homes = []
    for j in range(model.n_experts):
        c = plan.home_of(j)
        rows = np.flatnonzero(data.cluster == c)
        if len(rows) == 0:
            raise ValueError(f"expert {j} has no samples in its home cluster {c}")
        homes.append((rows, np.flatnonzero(data.cluster != c)))
    eps = plan.leakage
    states = [h.optimizer_state() for h in hyper]
    gate_state = gate_hyper.optimizer_state()
    rngs = [batch_rng(seed, j) for j in range(model.n_experts)]
    history = TrainLog()
    for epoch in range(epochs):
        plans = []
        for (home, _), h, rng in zip(homes, hyper, rngs):
            home_n = max(1, h.batch_size - int(round(eps * h.batch_size)))
            plans.append(_chunks(rng.permutation(home), home_n))
        rounds = max(len(p) for p in plans)
        losses = []
        for r in range(rounds):
            pieces, own, offset = [], [], 0
            for j, (chunks, rng) in enumerate(zip(plans, rngs)):
                if r >= len(chunks):
                    own.append(np.zeros(0, dtype=np.int64))
                    continue
                rows = chunks[r]
                others = homes[j][1]
                if eps > 0 and len(others):
                    n_leak = min(len(others), int(round(eps * len(rows) / (1 - eps))))
                    if n_leak:
                        rows = np.concatenate([rows, rng.choice(others, size=n_leak, replace=False)])
                pieces.append(rows)
                own.append(np.arange(offset, offset + len(rows)))
                offset += len(rows)
            idx = np.concatenate(pieces)
            batch = MoEBatch(data.x[idx], data.y[idx], own)
            grads = backward(model, batch, 0.5, 0.5, "mean")
            _step_all(model, grads, states, gate_state)
            losses.append(grads.loss)
        gap = closed_form_gradient_gap(model, MoEBatch(data.x, data.y))
        history.epochs.append({"epoch": epoch, "loss": float(np.mean(losses)), "closed_form_gradient_gap": gap})
        log.debug("joint epoch %d loss %.6f gap %s", epoch, history.epochs[-1]["loss"], gap)
    return model, history


def train_traditional(model: MoEModel, x: np.ndarray, y: np.ndarray, hyper: Sequence[Hyperparams],
                      epochs: int, seed: int,
                      gate_hyper: Hyperparams = Hyperparams(lr=1e-2, weight_decay=1e-4)):
    """Same losses, but every round is a uniform random batch shared by all experts."""
    if model.routing.mode != "traditional":
        raise ValueError("train_traditional needs a traditional routing plan")
    if len(hyper) != model.n_experts:
        raise ValueError(f"{len(hyper)} hyperparameter sets for {model.n_experts} experts")
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("no training data")
    states = [h.optimizer_state() for h in hyper]
    gate_state = gate_hyper.optimizer_state()
    rng = batch_rng(seed, 0)
    history = TrainLog()
    for epoch in range(epochs):
        losses = []
        for rows in _chunks(rng.permutation(len(x)), gate_hyper.batch_size):
            grads = backward(model, MoEBatch(x[rows], y[rows]), 0.5, 0.5, "mean")
            _step_all(model, grads, states, gate_state)
            losses.append(grads.loss)
        history.epochs.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return model, history


def classifier_step(expert: Expert, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of a standalone classifier and its gradients."""
    n = len(x)
    z, cache = expert.network.forward(x)
    p = softmax(z)
    idx = np.arange(n)
    s = 1.0 / n
    loss = s * float(nll(p[idx, y]).sum())
    own = np.ones(n) * (p[idx, y] >= PROB_FLOOR)
    coef = s * own
    dz = p.copy()
    dz[idx, y] -= 1.0
    grads, _ = expert.network.backward(cache, coef[:, None] * dz)
    return loss, grads


def train_classifier(expert: Expert, x: np.ndarray, y: np.ndarray, hyper: Hyperparams,
                     epochs: int, seed: int):
    """Minibatch training of a single softmax classifier; returns per-epoch mean loss."""
    x = np.asarray(x, dtype=DTYPE)
    y = _check_labels(y, expert.spec.n_classes)
    state = hyper.optimizer_state()
    rng = batch_rng(seed, 0)
    history = TrainLog()
    for epoch in range(epochs):
        losses = []
        for rows in _chunks(rng.permutation(len(x)), hyper.batch_size):
            loss, grads = classifier_step(expert, x[rows], y[rows])
            optimizer_step(expert.params, grads, state)
            losses.append(loss)
        history.epochs.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return expert, history


# ---------------------------------------------------------------------------
# inference


@dataclass
class Inference:
    predicted: np.ndarray
    probabilities: np.ndarray
    active: list


def infer(model: MoEModel, x, top_k: Optional[int] = None) -> Inference:
    """Predict with the full mixture, or with only the ``top_k`` highest-weighted experts."""
    a, single = _rows(x)
    n_exp = model.n_experts
    if top_k is not None and not 1 <= top_k <= n_exp:
        raise ValueError(f"top_k={top_k} must lie in [1, {n_exp}]")
    g = gate_forward(model.gate, a)
    if top_k is None or top_k == n_exp:
        probs = _mix(g, [expert_forward(e, a) for e in model.experts])
        active = [np.arange(n_exp) for _ in range(len(a))]
    else:
        order = np.argsort(-g, axis=1, kind="stable")[:, :top_k]
        mask = np.zeros_like(g, dtype=bool)
        np.put_along_axis(mask, order, True, axis=1)
        w = np.where(mask, g, 0.0)
        w = w / w.sum(axis=1, keepdims=True)
        probs = np.zeros((len(a), model.n_classes))
        for j, e in enumerate(model.experts):
            rows = np.flatnonzero(mask[:, j])
            if len(rows):
                probs[rows] += w[rows, j:j + 1] * expert_forward(e, a[rows])
        active = [np.sort(o) for o in order]
    pred = np.argmax(probs, axis=1)
    if single:
        return Inference(pred[:1], probs[0], active[:1])
    return Inference(pred, probs, active)


# ---------------------------------------------------------------------------
# analytic cost model


def softmax_flops(n: int) -> int:
    """max (n-1), subtract (n), exp (n), sum (n-1), divide (n)."""
    return 5 * n - 2


def network_flops(net: Network) -> int:
    return net.flops()


def classifier_flops(expert: Expert) -> int:
    return expert.network.flops() + softmax_flops(expert.spec.n_classes)


def inference_flops(model: MoEModel, top_k: Optional[int] = None, precompute_experts: bool = False) -> int:
    """Worst-case flops for one input.

    With ``top_k`` the ``top_k`` most expensive experts are charged, plus a
    k-pass scan of the gate weights and the renormalization.  With
    ``precompute_experts`` the first layer of every expert is charged as well.
    """
    n = model.n_experts
    c = model.n_classes
    k = n if top_k is None else top_k
    cost = model.gate.network.flops() + softmax_flops(n)
    per_expert = sorted((classifier_flops(e) for e in model.experts), reverse=True)
    chosen = per_expert[:k]
    cost += sum(chosen)
    if top_k is not None and top_k < n:
        cost += k * n + 2 * k
    cost += k * c + (k - 1) * c
    if precompute_experts:
        active_first = sorted(range(n), key=lambda j: -classifier_flops(model.experts[j]))[:k]
        cost += sum(model.experts[j].network.specs[0].flops() for j in range(n) if j not in active_first)
    return int(cost)


# ---------------------------------------------------------------------------
# checkpoints


def _spec_json(spec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)


def _write_network(buf, spec, params: ParameterSet, extra: dict | None = None):
    payload = {"spec": asdict(spec)}
    if extra:
        payload.update(extra)
    write_str(buf, json.dumps(payload, sort_keys=True))
    write_params(buf, params)


def _read_network(buf):
    meta = json.loads(read_str(buf))
    return meta, read_params(buf)


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def model_to_bytes(model: MoEModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_network(buf, model.gate.spec, model.gate.params)
    buf.write(struct.pack("<I", model.n_experts))
    for e in model.experts:
        _write_network(buf, e.spec, e.params, {"home_cluster": e.home_cluster, "home_class": e.home_class})
    write_str(buf, model.routing.mode)
    buf.write(struct.pack("<dI", model.routing.leakage, len(model.routing.mapping)))
    for c in sorted(model.routing.mapping):
        buf.write(struct.pack("<qI", int(c), int(model.routing.mapping[c])))
    return buf.getvalue()


def model_from_bytes(data: bytes) -> MoEModel:
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta, params = _read_network(buf)
    gspec = GateSpec(**_tuple_fields(meta["spec"]))
    gate = GateNetwork(gspec, Network(gspec.layers(), params))
    (n,) = struct.unpack("<I", buf.read(4))
    experts = []
    for _ in range(n):
        meta, params = _read_network(buf)
        espec = ExpertSpec(**_tuple_fields(meta["spec"]))
        experts.append(Expert(espec, Network(espec.layers(), params), meta["home_cluster"], meta["home_class"]))
    mode = read_str(buf)
    leakage, count = struct.unpack("<dI", buf.read(12))
    mapping = {}
    for _ in range(count):
        c, e = struct.unpack("<qI", buf.read(12))
        mapping[c] = e
    return MoEModel(gate, experts, RoutingPlan(mode, leakage, mapping))


def save_model(model: MoEModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MoEModel:
    return model_from_bytes(Path(path).read_bytes())


def save_classifier(expert: Expert, path) -> None:
    buf = io.BytesIO()
    buf.write(NETWORK_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_network(buf, expert.spec, expert.params)
    Path(path).write_bytes(buf.getvalue())


def load_classifier(path) -> Expert:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != NETWORK_MAGIC:
        raise ValueError("not a classifier checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta, params = _read_network(buf)
    spec = ExpertSpec(**_tuple_fields(meta["spec"]))
    return Expert(spec, Network(spec.layers(), params))
