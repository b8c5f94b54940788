"""Counterfactual generator: a double-DQN agent editing molecules under valence rules.

States are molecules; the Q-network scores an action by the fingerprint of the
molecule it leads to (plus the normalised number of steps left).
Every distinct molecule the agent visits is a counterfactual candidate.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from meg.autodiff import Adam, Tensor, glorot_uniform
from meg.chem.actions import EditAction, action_signature, enumerate_actions
from meg.chem.canon import canonical_key
from meg.chem.molgraph import Element, Molecule, apply_edit, check_validity
from meg.chem.smiles import write_smiles
from meg.fingerprint import morgan_fingerprint
from meg.gnn import Prediction, PredictorModel
from meg.similarity import FingerprintConfig, SimilarityWeights, combine, cosine, ZeroVector
from meg.fingerprint import tanimoto

log = logging.getLogger(__name__)


class RangeViolation(ValueError):
    pass


class WeightViolation(ValueError):
    pass


class NoLegalActions(RuntimeError):
    pass


class EmptyBatch(ValueError):
    pass


class NoCounterfactualFound(RuntimeError):
    pass


class TaskMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 1
    include_noop: bool = False
    gamma: float = 0.9
    epsilon0: float = 1.0
    decay_lambda: float = 0.9987
    decaying_policy: bool = True
    train_epochs: int = 3000
    top_k: int = 10
    alpha: float = 0.5
    similarity_weights: SimilarityWeights = SimilarityWeights()
    fingerprint: FingerprintConfig = FingerprintConfig()
    vocab: tuple[str, ...] = ("C", "N", "O")
    q_hidden: tuple[int, ...] = (1024, 512, 128)
    q_learning_rate: float = 1e-4
    replay_capacity: int = 5000
    batch_size: int = 64
    target_sync: int = 20
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        checks = [
            (self.max_steps >= 1, "max_steps must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 < self.epsilon0 <= 1.0, "epsilon0 must lie in (0, 1]"),
            (0.0 < self.decay_lambda <= 1.0, "decay_lambda must lie in (0, 1]"),
            (self.train_epochs >= 1, "train_epochs must be >= 1"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.replay_capacity >= 1 and self.batch_size >= 1, "replay sizes must be positive"),
            (self.target_sync >= 1, "target_sync must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (len(self.q_hidden) >= 1, "q_hidden needs at least one layer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        for symbol in self.vocab:
            Element.from_symbol(symbol)

    @property
    def elements(self) -> list[Element]:
        return [Element.from_symbol(s) for s in self.vocab]

    def to_json(self) -> dict:
        out = asdict(self)
        del out["workers"]  # execution detail; results do not depend on it
        out["vocab"] = list(self.vocab)
        out["q_hidden"] = list(self.q_hidden)
        return out


# rewards


def reward_classification(y_c: float, k: float, alpha: float) -> float:
    """``-alpha * y_c + (1 - alpha) * K``: push the original class probability down, stay similar."""
    for name, v in (("y_c", y_c), ("K", k), ("alpha", alpha)):
        if not 0.0 <= v <= 1.0:
            raise RangeViolation(f"{name}={v} outside [0, 1]")
    return -alpha * y_c + (1.0 - alpha) * k


def regression_beta(s_orig: float, s_cf: float, s_target: float) -> int:
    """+1 when the counterfactual prediction ends farther from the target than the original, -1 when closer."""
    diff = float(abs(s_cf - s_target) - abs(s_orig - s_target))
    return (diff > 0) - (diff < 0)


def reward_regression(s_orig: float, s_cf: float, s_target: float, k: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise RangeViolation(f"alpha={alpha} outside [0, 1]")
    if not 0.0 <= k <= 1.0:
        raise RangeViolation(f"K={k} outside [0, 1]")
    beta = regression_beta(s_orig, s_cf, s_target)
    return alpha * beta * abs(s_cf - s_orig) + (1.0 - alpha) * k


def combine_rewards(partials: Sequence[float], alphas: Sequence[float]) -> float:
    if len(partials) != len(alphas):
        raise WeightViolation("one weight per partial reward")
    if any(a < 0 for a in alphas) or abs(sum(alphas) - 1.0) > 1e-9:
        raise WeightViolation(f"weights must be non-negative and sum to 1, got {list(alphas)}")
    return float(sum(a * r for a, r in zip(alphas, partials)))


def epsilon_schedule(epsilon: float, decay_lambda: float) -> float:
    return epsilon * decay_lambda


# Q-network


class QNetwork:
    """Fully connected ReLU network mapping state features to one Q-value."""

    def __init__(self, input_width: int, hidden: Sequence[int] = (1024, 512, 128), seed: int = 0, dtype=np.float32) -> None:
        rng = np.random.default_rng(seed)
        widths = (input_width,) + tuple(hidden) + (1,)
        self.weights = [
            Tensor(glorot_uniform(rng, a, b, dtype), requires_grad=True, name=f"q{k}.weight", dtype=dtype)
            for k, (a, b) in enumerate(zip(widths, widths[1:]))
        ]
        self.biases = [
            Tensor(np.zeros(b, dtype=dtype), requires_grad=True, name=f"q{k}.bias", dtype=dtype)
            for k, b in enumerate(widths[1:])
        ]
        self.dtype = dtype

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: Tensor) -> Tensor:
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < len(self.weights) - 1:
                x = x.relu()
        return x

    def __call__(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=self.dtype)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            if k < len(self.weights) - 1:
                x = np.maximum(x, 0)
        return x[:, 0]

    def load_from(self, other: "QNetwork") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()


def state_features(
    m: Molecule, steps_remaining: int, max_steps: int = 1, fp_cfg: FingerprintConfig = FingerprintConfig()
) -> np.ndarray:
    bits = morgan_fingerprint(m, fp_cfg.radius, fp_cfg.width).to_array(np.float32)
    return np.append(bits, np.float32(steps_remaining / max_steps))


@dataclass
class Transition:
    state_features: np.ndarray
    reward: float
    next_state_action_features: np.ndarray | None = None
    terminal: bool = True


class ReplayBuffer:
    def __init__(self, capacity: int) -> None:
        self.items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.items)

    def add(self, t: Transition) -> None:
        self.items.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in sorted(idx)]


def double_dqn_targets(
    rewards: Sequence[float],
    terminal: Sequence[bool],
    online_next: Sequence[np.ndarray | None],
    target_next: Sequence[np.ndarray | None],
    gamma: float,
) -> np.ndarray:
    """``r + gamma * Q_target(argmax Q_online)`` per transition; plain ``r`` when terminal."""
    out = np.empty(len(rewards))
    for k, r in enumerate(rewards):
        q_on, q_tg = online_next[k], target_next[k]
        if terminal[k] or q_on is None or len(q_on) == 0:
            out[k] = r
        else:
            out[k] = r + gamma * float(q_tg[int(np.argmax(q_on))])
    return out


def dqn_train_step(
    online: QNetwork,
    target: QNetwork,
    batch: Sequence[Transition],
    gamma: float,
    optimizer: Adam,
) -> float:
    """One double-DQN regression step on ``online``; returns the batch MSE before the update."""
    if not batch:
        raise EmptyBatch("dqn_train_step needs at least one transition")
    # transitions from the same state share one successor array; score each distinct array once
    blocks: dict[int, np.ndarray] = {}
    for t in batch:
        nxt = t.next_state_action_features
        if not (t.terminal or nxt is None or len(nxt) == 0):
            blocks.setdefault(id(nxt), nxt)
    spans: dict[int, tuple[int, int]] = {}
    q_on = q_tg = np.empty(0)
    if blocks:
        stacked = np.concatenate(list(blocks.values()))
        q_on, q_tg = online(stacked), target(stacked)
        start = 0
        for key, arr in blocks.items():
            spans[key] = (start, start + len(arr))
            start += len(arr)
    online_next: list[np.ndarray | None] = []
    target_next: list[np.ndarray | None] = []
    for t in batch:
        span = spans.get(id(t.next_state_action_features)) if not t.terminal else None
        online_next.append(None if span is None else q_on[span[0] : span[1]])
        target_next.append(None if span is None else q_tg[span[0] : span[1]])
    y = double_dqn_targets([t.reward for t in batch], [t.terminal for t in batch], online_next, target_next, gamma)
    states = np.stack([t.state_features for t in batch]).astype(online.dtype)
    optimizer.zero_grad()
    pred = online.forward(Tensor(states, dtype=online.dtype))
    loss = (pred - y.astype(online.dtype)[:, None]).square().mean()
    loss.backward()
    optimizer.step()
    return loss.item()


def select_action(
    qnet: QNetwork,
    m: Molecule,
    steps_remaining: int,
    epsilon: float,
    rng: np.random.Generator,
    actions: Sequence[EditAction] | None = None,
    features: np.ndarray | None = None,
    max_steps: int = 1,
    fp_cfg: FingerprintConfig = FingerprintConfig(),
    vocab: Sequence[Element] = (Element.C, Element.N, Element.O),
    include_noop: bool = False,
) -> EditAction:
    """Epsilon-greedy over legal edits; greedy ties go to the smallest action signature.

    ``actions``/``features`` may be passed in precomputed (features row ``k``
    describing the molecule reached by ``actions[k]``).
    """
    if actions is None:
        actions = enumerate_actions(m, vocab, include_noop)
    if not actions:
        raise NoLegalActions(f"no legal edits from {write_smiles(m)}")
    return actions[_choose(qnet, m, steps_remaining, epsilon, rng, actions, features, max_steps, fp_cfg)]


def _choose(qnet, m, steps_remaining, epsilon, rng, actions, features, max_steps, fp_cfg) -> int:
    if len(actions) == 1:
        return 0
    if rng.random() < epsilon:
        return int(rng.integers(len(actions)))
    order = sorted(range(len(actions)), key=lambda k: action_signature(actions[k]))
    if features is None:
        features = np.stack(
            [state_features(apply_edit(m, actions[k]), steps_remaining - 1, max_steps, fp_cfg) for k in order]
        )
    else:
        features = features[order]
    q = qnet(features)
    return order[int(np.argmax(q))]


# training loop


@dataclass
class Visit:
    molecule: Molecule
    key: str
    reward: float
    trace: tuple[str, ...]


class QLearner:
    """Owns the online/target networks, replay buffer and exploration state for one run."""

    def __init__(self, cfg: EpisodeConfig) -> None:
        self.cfg = cfg
        width = cfg.fingerprint.width + 1
        self.online = QNetwork(width, cfg.q_hidden, seed=cfg.seed)
        self.target = QNetwork(width, cfg.q_hidden, seed=cfg.seed)
        self.target.load_from(self.online)
        self.optimizer = Adam(self.online.parameters(), lr=cfg.q_learning_rate)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.rng = np.random.default_rng(cfg.seed)
        self.epsilon = cfg.epsilon0
        self.updates = 0
        self.losses: list[float] = []
        self._features: dict[tuple[Molecule, int], np.ndarray] = {}
        self._moves: dict[Molecule, tuple[list[EditAction], list[Molecule]]] = {}
        self._successors: dict[tuple[Molecule, int], np.ndarray] = {}
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def features(self, m: Molecule, steps_remaining: int) -> np.ndarray:
        key = (m, steps_remaining)
        if key not in self._features:
            self._features[key] = state_features(m, steps_remaining, self.cfg.max_steps, self.cfg.fingerprint)
        return self._features[key]

    def moves(self, m: Molecule) -> tuple[list[EditAction], list[Molecule]]:
        """Legal actions in signature order and the molecules they produce."""
        if m not in self._moves:
            actions = enumerate_actions(m, self.cfg.elements, self.cfg.include_noop)
            if self._pool is None:
                nexts = [apply_edit(m, a) for a in actions]
            else:
                # map keeps input order, so the merge is deterministic
                nexts = list(self._pool.map(lambda a: apply_edit(m, a), actions))
            self._moves[m] = (actions, nexts)
        return self._moves[m]

    def successor_features(self, m: Molecule, steps_remaining: int) -> np.ndarray:
        key = (m, steps_remaining)
        if key not in self._successors:
            _, nexts = self.moves(m)
            self._successors[key] = np.stack([self.features(n, steps_remaining) for n in nexts])
        return self._successors[key]

    def learn(self) -> None:
        if len(self.buffer) < self.cfg.batch_size:
            return
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        self.losses.append(dqn_train_step(self.online, self.target, batch, self.cfg.gamma, self.optimizer))
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            self.target.load_from(self.online)

    def episode(self, start: Molecule, reward_fn: Callable[[Molecule], float], epsilon: float, learn: bool = True) -> list[Visit]:
        """Run one episode from ``start``; returns the states visited with their rewards."""
        state, trace, visits = start, [], []
        max_steps = self.cfg.max_steps
        for t in range(max_steps):
            left = max_steps - t
            actions, nexts = self.moves(state)
            if not actions:
                break
            feats = self.successor_features(state, left - 1)
            k = _choose(self.online, state, left, epsilon, self.rng, actions, feats, max_steps, self.cfg.fingerprint)
            nxt = nexts[k]
            trace.append(action_signature(actions[k]))
            r = reward_fn(nxt)
            terminal = left - 1 == 0
            nxt_feats = None if terminal or not self.moves(nxt)[0] else self.successor_features(nxt, left - 2)
            if learn:
                self.buffer.add(Transition(feats[k], r, nxt_feats, terminal or nxt_feats is None))
                self.learn()
            visits.append(Visit(nxt, "", r, tuple(trace)))
            state = nxt
        return visits

    def train(self, start: Molecule, reward_fn: Callable[[Molecule], float], episodes: int) -> list[Visit]:
        visited: list[Visit] = []
        for _ in range(episodes):
            visited.extend(self.episode(start, reward_fn, self.epsilon))
            if self.cfg.decaying_policy:
                self.epsilon = epsilon_schedule(self.epsilon, self.cfg.decay_lambda)
        return visited


# counterfactual generation


@dataclass
class CounterfactualRecord:
    molecule: Molecule
    smiles: str
    prediction: Prediction
    similarity: float
    reward: float
    rank: int
    edit_trace: tuple[str, ...] = ()
    beta: int | None = None

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "smiles": self.smiles,
            "prediction": self.prediction.to_json(),
            "similarity": self.similarity,
            "reward": self.reward,
            "edit_trace": list(self.edit_trace),
        }


class _Scorer:
    """Caches predictor outputs and similarity to the original per canonical key."""

    def __init__(self, predictor: PredictorModel, original: Molecule, cfg: EpisodeConfig, target: float | None) -> None:
        self.predictor = predictor
        self.cfg = cfg
        self.original = original
        self.fp0 = morgan_fingerprint(original, cfg.fingerprint.radius, cfg.fingerprint.width)
        self.h0 = predictor.embed_many([original])[0]
        self.pred0 = predictor.predict_many([original])[0]
        self.target = self.pred0.value if target is None and predictor.task == "regression" else target
        self.cls = self.pred0.label if predictor.task == "classification" else None
        self.cache: dict[str, tuple[Prediction, float, float, int | None]] = {}

    def similarity(self, m: Molecule) -> float:
        fp = morgan_fingerprint(m, self.cfg.fingerprint.radius, self.cfg.fingerprint.width)
        t = tanimoto(self.fp0, fp)
        w = self.cfg.similarity_weights
        if w.alpha_cosine == 0.0:
            return combine(t, 0.0, w)
        try:
            c = cosine(self.h0, self.predictor.embed_many([m])[0])
        except ZeroVector:
            c = 0.0
        return combine(t, c, w)

    def score(self, m: Molecule, key: str | None = None) -> tuple[Prediction, float, float, int | None]:
        key = key or canonical_key(m)
        if key not in self.cache:
            pred = self.predictor.predict_many([m])[0]
            k = min(max(self.similarity(m), 0.0), 1.0)
            if self.predictor.task == "classification":
                y_c = float(min(max(pred.probabilities[self.cls], 0.0), 1.0))
                self.cache[key] = (pred, k, reward_classification(y_c, k, self.cfg.alpha), None)
            else:
                beta = regression_beta(self.pred0.value, pred.value, self.target)
                r = reward_regression(self.pred0.value, pred.value, self.target, k, self.cfg.alpha)
                self.cache[key] = (pred, k, r, beta)
        return self.cache[key]


@dataclass
class Explanation:
    original: Molecule
    prediction: Prediction
    counterfactuals: list[CounterfactualRecord]
    config: EpisodeConfig
    task: str
    target: float | None = None
    losses: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        config = {"task": self.task, **self.config.to_json()}
        if self.target is not None:
            config["target"] = self.target
        return {
            "input": {"smiles": write_smiles(self.original), "prediction": self.prediction.to_json()},
            "config": config,
            "counterfactuals": [c.to_json() for c in self.counterfactuals],
        }


def explain(
    predictor: PredictorModel,
    m: Molecule,
    cfg: EpisodeConfig = EpisodeConfig(),
    task: str | None = None,
    target: float | None = None,
) -> Explanation:
    """Train a fresh agent from ``m`` and collect the ``top_k`` best-rewarded molecules it visited.

    For regression, ``target`` is the reference value the counterfactual should
    move away from; it defaults to the original prediction.
    """
    task = task or predictor.task
    if task != predictor.task:
        raise TaskMismatch(f"predictor solves {predictor.task!r}, not {task!r}")
    report = check_validity(m)
    if not report.valid:
        raise ValueError(f"input molecule is invalid: {report.violations}")
    scorer = _Scorer(predictor, m, cfg, target)
    origin = canonical_key(m)
    keys: dict[Molecule, str] = {}
    best_trace: dict[str, tuple[Molecule, tuple[str, ...]]] = {}

    def reward_fn(mol: Molecule) -> float:
        if mol not in keys:
            keys[mol] = canonical_key(mol)
        return scorer.score(mol, keys[mol])[2]

    learner = QLearner(cfg)
    try:
        visits = learner.train(m, reward_fn, cfg.train_epochs)
    finally:
        learner.close()
    for v in visits:
        key = keys[v.molecule]
        if key == origin:
            continue
        if key not in best_trace or len(v.trace) < len(best_trace[key][1]):
            best_trace[key] = (v.molecule, v.trace)
    if not best_trace:
        raise NoCounterfactualFound(f"no candidate other than the input was visited from {write_smiles(m)}")
    ranked = sorted(best_trace, key=lambda k: (-scorer.cache[k][2], k))[: cfg.top_k]
    records = []
    for rank, key in enumerate(ranked, start=1):
        mol, trace = best_trace[key]
        pred, k, r, beta = scorer.cache[key]
        records.append(CounterfactualRecord(mol, write_smiles(mol), pred, k, r, rank, trace, beta))
    return Explanation(m, scorer.pred0, records, cfg, task, scorer.target, learner.losses)


def generate_counterfactuals(
    predictor: PredictorModel,
    m: Molecule,
    cfg: EpisodeConfig = EpisodeConfig(),
    task: str | None = None,
    target: float | None = None,
) -> list[CounterfactualRecord]:
    return explain(predictor, m, cfg, task, target).counterfactuals


# evaluation helpers


def rollout_return(
    learner: QLearner, start: Molecule, reward_fn: Callable[[Molecule], float], epsilon: float
) -> float:
    """Undiscounted return of one episode under an epsilon-greedy policy, without learning."""
    return float(sum(v.reward for v in learner.episode(start, reward_fn, epsilon, learn=False)))


def pooled_standard_error(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
