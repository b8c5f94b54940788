"""Message-passing property predictor.

Three sum-aggregation graph convolutions, a per-layer max+mean readout summed
over layers, and a small feed-forward head. Everything runs on the
:mod:`meg.autodiff` kernel.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from meg.autodiff import Adam, Tensor, concat, glorot_uniform, numeric_grad_check, segment_max, segment_mean
from meg.chem.molgraph import ELEMENTS, Molecule, free_valence
from meg.fingerprint import EmptyMolecule

if TYPE_CHECKING:
    from meg.data import Dataset

log = logging.getLogger(__name__)

NODE_FEATURES = len(ELEMENTS) + 3
CHECKPOINT_SCHEMA = "meg-predictor-checkpoint/1"


class DimensionMismatch(ValueError):
    pass


class LabelTaskMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def node_features(m: Molecule) -> np.ndarray:
    """One-hot element, degree, bond-order sum and free valence per atom."""
    x = np.zeros((len(m), NODE_FEATURES))
    for a, e in enumerate(m.elements):
        x[a, ELEMENTS.index(e)] = 1.0
        x[a, -3] = m.degree(a)
        x[a, -2] = m.bond_order_sum(a)
        x[a, -1] = free_valence(m, a)
    return x


@dataclass
class GraphBatch:
    """Several molecules stacked as one block-diagonal graph."""

    x: np.ndarray
    adjacency: np.ndarray
    segments: np.ndarray
    n_graphs: int

    @classmethod
    def from_molecules(cls, mols: Sequence[Molecule]) -> "GraphBatch":
        if any(len(m) == 0 for m in mols):
            raise EmptyMolecule("cannot batch an empty molecule")
        sizes = [len(m) for m in mols]
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        n = int(sum(sizes))
        adj = np.zeros((n, n))
        for off, m in zip(offsets, mols):
            for b in m.bonds:
                adj[off + b.i, off + b.j] = adj[off + b.j, off + b.i] = 1.0
        x = np.concatenate([node_features(m) for m in mols]) if mols else np.zeros((0, NODE_FEATURES))
        segments = np.repeat(np.arange(len(mols)), sizes)
        return cls(x, adj, segments, len(mols))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "") -> None:
        self.weight = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class GraphConvLayer:
    """``h'_v = ReLU(h_v W_self + (sum of neighbour h_u) W_neigh + b)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "conv") -> None:
        self.w_self = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True, name=f"{name}.w_self")
        self.w_neigh = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True, name=f"{name}.w_neigh")
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.bias")

    @property
    def d_in(self) -> int:
        return self.w_self.shape[0]

    def __call__(self, h: Tensor, adjacency: np.ndarray) -> Tensor:
        if h.shape[1] != self.d_in or h.shape[0] != adjacency.shape[0]:
            raise DimensionMismatch(f"states {h.shape} vs layer input {self.d_in}, {adjacency.shape[0]} nodes")
        neigh = Tensor(adjacency) @ h
        return (h @ self.w_self + neigh @ self.w_neigh + self.bias).relu()

    def parameters(self) -> list[Tensor]:
        return [self.w_self, self.w_neigh, self.bias]


def conv_forward(layer: GraphConvLayer, m: Molecule, h: np.ndarray) -> np.ndarray:
    batch = GraphBatch.from_molecules([m])
    return layer(Tensor(h), batch.adjacency).data


def readout(per_layer: Sequence[Tensor], segments: np.ndarray, n_graphs: int) -> Tensor:
    """Sum over layers of ``[max-pool ; mean-pool]`` of the node states."""
    if n_graphs == 0 or len(segments) == 0:
        raise EmptyMolecule("readout of an empty graph")
    total = None
    for h in per_layer:
        r = concat([segment_max(h, segments, n_graphs), segment_mean(h, segments, n_graphs)], axis=1)
        total = r if total is None else total + r
    return total


@dataclass
class Prediction:
    probabilities: np.ndarray | None = None
    value: float | None = None

    @property
    def label(self) -> int | float:
        if self.probabilities is not None:
            return int(np.argmax(self.probabilities))
        return self.value

    def to_json(self):
        if self.probabilities is not None:
            return {"class": self.label, "probabilities": [float(p) for p in self.probabilities]}
        return {"value": float(self.value)}


class PredictorModel:
    def __init__(
        self,
        task: str = "classification",
        n_classes: int = 2,
        hidden_size: int = 64,
        num_layers: int = 3,
        head_sizes: Sequence[int] = (128, 64, 32),
        dropout: float = 0.1,
        seed: int = 0,
    ) -> None:
        if task not in ("classification", "regression"):
            raise ValueError(f"unknown task {task!r}")
        rng = np.random.default_rng(seed)
        self.task = task
        self.n_classes = n_classes if task == "classification" else 1
        self.hidden_size = hidden_size
        self.head_sizes = tuple(head_sizes)
        self.dropout = dropout
        self.training = False
        self.target_shift = 0.0
        self.target_scale = 1.0
        self.layers = [
            GraphConvLayer(NODE_FEATURES if k == 0 else hidden_size, hidden_size, rng, name=f"conv{k}")
            for k in range(num_layers)
        ]
        widths = (2 * hidden_size,) + self.head_sizes + (self.n_classes,)
        self.head = [Linear(a, b, rng, name=f"head{k}") for k, (a, b) in enumerate(zip(widths, widths[1:]))]
        self._dropout_rng = np.random.default_rng(seed + 1)

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + [p for lin in self.head for p in lin.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def train(self, mode: bool = True) -> "PredictorModel":
        self.training = mode
        return self

    def eval(self) -> "PredictorModel":
        return self.train(False)

    # forward

    def encode(self, batch: GraphBatch) -> Tensor:
        h = Tensor(batch.x)
        states = []
        for layer in self.layers:
            h = layer(h, batch.adjacency)
            states.append(h)
        return readout(states, batch.segments, batch.n_graphs)

    def forward(self, batch: GraphBatch) -> Tensor:
        z = self.encode(batch)
        for k, lin in enumerate(self.head):
            z = lin(z)
            if k < len(self.head) - 1:
                z = z.relu()
                if self.training and self.dropout > 0:
                    keep = self._dropout_rng.random(z.shape) >= self.dropout
                    z = z * (keep / (1.0 - self.dropout))
        return z

    def loss(self, batch: GraphBatch, labels: np.ndarray) -> Tensor:
        out = self.forward(batch)
        if self.task == "classification":
            logp = out.log_softmax()
            picked = logp * np.eye(self.n_classes)[labels.astype(int)]
            return -(picked.sum() * (1.0 / batch.n_graphs))
        scaled = (labels - self.target_shift) / self.target_scale
        return (out - scaled[:, None]).square().mean()

    def predict_many(self, mols: Sequence[Molecule]) -> list[Prediction]:
        with _eval_mode(self):
            out = self.forward(GraphBatch.from_molecules(mols)).data
        if self.task == "classification":
            shifted = out - out.max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            return [Prediction(probabilities=row) for row in p]
        return [Prediction(value=float(v * self.target_scale + self.target_shift)) for v in out[:, 0]]

    def embed_many(self, mols: Sequence[Molecule]) -> np.ndarray:
        with _eval_mode(self):
            return self.encode(GraphBatch.from_molecules(mols)).data


class _eval_mode:
    def __init__(self, model: PredictorModel) -> None:
        self.model = model

    def __enter__(self) -> None:
        self.saved = self.model.training
        self.model.training = False

    def __exit__(self, *exc) -> None:
        self.model.training = self.saved


def predict(model: PredictorModel, m: Molecule) -> Prediction:
    if len(m) == 0:
        raise EmptyMolecule("cannot predict on an empty molecule")
    return model.predict_many([m])[0]


def embed(model: PredictorModel, m: Molecule) -> np.ndarray:
    if len(m) == 0:
        raise EmptyMolecule("cannot embed an empty molecule")
    return model.embed_many([m])[0]


# training


@dataclass
class TrainConfig:
    hidden_size: int = 256
    batch_size: int = 20
    learning_rate: float = 1e-3
    epochs: int = 200
    patience: int = 30
    dropout: float = 0.1
    num_layers: int = 3
    head_sizes: tuple[int, ...] = (128, 64, 32)
    seed: int = 0


TOX21_CONFIG = TrainConfig(hidden_size=256, batch_size=20, learning_rate=1e-3)
ESOL_CONFIG = TrainConfig(hidden_size=32, batch_size=20, learning_rate=5e-4)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_metric: float
    val_loss: float
    val_metric: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    model: PredictorModel
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    metric_name: str = "accuracy"


def _check_labels(ds: "Dataset", task: str, n_classes: int) -> np.ndarray:
    if ds.task != task:
        raise LabelTaskMismatch(f"dataset task {ds.task!r} != model task {task!r}")
    labels = np.asarray([r.label for r in ds.records], dtype=float)
    if not np.all(np.isfinite(labels)):
        raise LabelTaskMismatch("non-finite labels")
    if task == "classification" and (np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= n_classes):
        raise LabelTaskMismatch(f"classification labels must be integers in [0, {n_classes})")
    return labels


def evaluate(model: PredictorModel, ds: "Dataset", batch_size: int = 256) -> tuple[float, float]:
    """Return ``(loss, metric)``; metric is accuracy or mean squared error."""
    labels = _check_labels(ds, model.task, model.n_classes)
    mols = [r.molecule for r in ds.records]
    losses, preds = [], []
    with _eval_mode(model):
        for start in range(0, len(mols), batch_size):
            chunk = mols[start : start + batch_size]
            batch = GraphBatch.from_molecules(chunk)
            losses.append(model.loss(batch, labels[start : start + batch_size]).item() * len(chunk))
        preds = model.predict_many(mols) if mols else []
    loss = sum(losses) / len(mols)
    if model.task == "classification":
        metric = float(np.mean([p.label == int(y) for p, y in zip(preds, labels)]))
    else:
        metric = float(np.mean([(p.value - y) ** 2 for p, y in zip(preds, labels)]))
    return loss, metric


def train_predictor(train: "Dataset", val: "Dataset", cfg: TrainConfig, n_classes: int = 2) -> TrainResult:
    """Mini-batch Adam; keeps the parameters with the best validation metric."""
    if not train.records or not val.records:
        raise ValueError("training and validation sets must be nonempty")
    task = train.task
    model = PredictorModel(
        task=task,
        n_classes=n_classes,
        hidden_size=cfg.hidden_size,
        num_layers=cfg.num_layers,
        head_sizes=cfg.head_sizes,
        dropout=cfg.dropout,
        seed=cfg.seed,
    )
    labels = _check_labels(train, task, model.n_classes)
    _check_labels(val, task, model.n_classes)
    if task == "regression":
        model.target_shift = float(labels.mean())
        model.target_scale = float(labels.std()) or 1.0
    mols = [r.molecule for r in train.records]
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 2)
    higher_better = task == "classification"
    best, best_state, best_epoch, stale = None, None, 0, 0
    history: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(mols))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = GraphBatch.from_molecules([mols[i] for i in idx])
            opt.zero_grad()
            loss = model.loss(batch, labels[idx])
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"loss became {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.eval()
        _, train_metric = evaluate(model, train)
        val_loss, val_metric = evaluate(model, val)
        history.append(EpochMetrics(epoch, total / len(mols), train_metric, val_loss, val_metric))
        log.debug("epoch %d loss %.4f val %.4f", epoch, total / len(mols), val_metric)
        improved = best is None or (val_metric > best if higher_better else val_metric < best)
        if improved:
            best, best_epoch, stale = val_metric, epoch, 0
            best_state = [p.data.copy() for p in model.parameters()]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, saved in zip(model.parameters(), best_state):
        p.data = saved
    model.eval()
    return TrainResult(model, history, best_epoch, "accuracy" if higher_better else "mse")


def grad_check(model: PredictorModel, m: Molecule, label: float = 0, step: float = 1e-4) -> float:
    """Max relative error of backprop vs central differences for the loss on ``m``."""
    batch = GraphBatch.from_molecules([m])
    labels = np.asarray([label], dtype=float)
    with _eval_mode(model):
        return numeric_grad_check(lambda: model.loss(batch, labels), model.parameters(), step)


# checkpoints


def save_checkpoint(model: PredictorModel, path: str | Path) -> None:
    lines = [
        CHECKPOINT_SCHEMA,
        f"task {model.task}",
        f"n_classes {model.n_classes}",
        f"hidden_size {model.hidden_size}",
        f"num_layers {len(model.layers)}",
        "head_sizes " + " ".join(str(s) for s in model.head_sizes),
        f"dropout {model.dropout!r}",
        f"target_shift {model.target_shift!r}",
        f"target_scale {model.target_scale!r}",
    ]
    for name, p in model.named_parameters():
        lines.append(f"param {name} " + " ".join(str(s) for s in p.shape))
        lines.append(" ".join(repr(float(v)) for v in p.data.reshape(-1)))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> PredictorModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: expected schema {CHECKPOINT_SCHEMA!r}")
    header: dict[str, str] = {}
    k = 1
    while k < len(lines) and not lines[k].startswith("param "):
        key, _, value = lines[k].partition(" ")
        header[key] = value
        k += 1
    try:
        model = PredictorModel(
            task=header["task"],
            n_classes=int(header["n_classes"]),
            hidden_size=int(header["hidden_size"]),
            num_layers=int(header["num_layers"]),
            head_sizes=tuple(int(s) for s in header["head_sizes"].split()),
            dropout=float(header["dropout"]),
        )
        model.target_shift = float(header["target_shift"])
        model.target_scale = float(header["target_scale"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    params = dict(model.named_parameters())
    while k < len(lines) and lines[k] != "end":
        _, name, *dims = lines[k].split()
        shape = tuple(int(d) for d in dims)
        if name not in params or params[name].shape != shape:
            raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
        params[name].data = np.array([float(v) for v in lines[k + 1].split()]).reshape(shape)
        params.pop(name)
        k += 2
    if params:
        raise CheckpointError(f"{path}: missing parameters {sorted(params)}")
    return model.eval()
