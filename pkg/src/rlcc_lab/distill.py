"""
Distill a converged MLP policy into a small gradient-boosted tree ensemble.

The student regresses the teacher's raw (pre-clamp) outputs on the same
flattened observation window, with plain CART base learners kept inside the
inference budget of a NIC datapath: at most 10 trees of depth 4 and at most
150 worst-case operations per decision.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import DEFAULT_WINDOW, ActionMapper, Predictor, RewardParams, rlcc_factory
from .simcore import build_scenario, run
from .structs import ScenarioSpec, SimConfig, many_to_one
from .trainer import evaluate_policy

logger = logging.getLogger(__name__)

MAX_TREES = 10
MAX_DEPTH = 4
OP_BUDGET = 150

# Held-out N values for the generalisation part of the dataset.
UNSEEN_FLOWS = (12, 24, 48, 96)


class DistillError(ValueError):
    pass


class InsufficientSamplesError(DistillError):
    pass


class OpBudgetExceeded(DistillError):
    pass


# ============================================================================
# Dataset
# ============================================================================

def _held_out(index: int) -> bool:
    return hashlib.sha256(str(index).encode()).digest()[0] % 5 == 0


@dataclass
class TraceDataset:
    features: np.ndarray
    labels: np.ndarray
    # True for the held-out 20%
    held_out: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        self.held_out = np.asarray(self.held_out, dtype=bool).reshape(-1)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if not (len(self.features) == len(self.labels) == len(self.held_out)):
            raise DistillError(
                f"dataset length mismatch: {len(self.features)} features, "
                f"{len(self.labels)} labels, {len(self.held_out)} split flags"
            )
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise DistillError("dataset contains non-finite entries")

    @classmethod
    def from_arrays(cls, features, labels, held_out=None) -> "TraceDataset":
        labels = np.asarray(labels, dtype=float).reshape(-1)
        if held_out is None:
            held_out = np.zeros(len(labels), dtype=bool)
        return cls(np.asarray(features, dtype=float).reshape(len(labels), -1), labels, held_out)

    @classmethod
    def empty(cls, n_features: int = 2 * DEFAULT_WINDOW) -> "TraceDataset":
        return cls(np.zeros((0, n_features)), np.zeros(0), np.zeros(0, dtype=bool))

    @property
    def train_x(self) -> np.ndarray:
        return self.features[~self.held_out]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[~self.held_out]

    @property
    def test_x(self) -> np.ndarray:
        return self.features[self.held_out]

    @property
    def test_y(self) -> np.ndarray:
        return self.labels[self.held_out]

    def __len__(self):
        return len(self.labels)


def default_distill_scenarios(curriculum_n: Sequence[int] = (2, 4, 8, 16, 32, 64)) -> list[ScenarioSpec]:
    return [many_to_one(n) for n in curriculum_n] + [many_to_one(n) for n in UNSEEN_FLOWS]


def _distinct(rows: list[np.ndarray]) -> np.ndarray:
    table = np.vstack(rows)
    _, first = np.unique(table, axis=0, return_index=True)
    return table[np.sort(first)]


def _jittered_factory(base, rng: np.random.Generator, start_jitter: float):
    """Start each flow at a seeded random fraction in [1 - start_jitter, 1] of its usual rate."""
    def factory(flow, cfg: SimConfig):
        controller = base(flow, cfg)
        if start_jitter > 0:
            usual = controller.initial_rate(cfg)
            controller.start_rate_gbps = usual * float(rng.uniform(1.0 - start_jitter, 1.0))
        return controller
    return factory


def collect_traces(
    teacher: Predictor,
    scenarios: Sequence[ScenarioSpec],
    n_samples: int,
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
    start_jitter: float = 0.5,
    max_rounds: int = 4,
) -> TraceDataset:
    """
    Run every scenario closed-loop under the teacher and record each decision.

    Flows of identical scenarios move in lockstep and repeat each other's
    rows, so every round starts the flows at seeded random fractions of their
    usual rate, and further rounds with new seeds run until enough distinct
    rows exist or ``max_rounds`` is reached. Exact duplicate rows are dropped,
    then ``n_samples`` rows are drawn with the run seed and split 80/20 by a
    hash of their index.
    """
    if n_samples < 0:
        raise DistillError(f"n_samples must be >= 0, got {n_samples}")
    if not (0 <= start_jitter < 1):
        raise DistillError(f"start_jitter must be in [0, 1), got {start_jitter}")
    if max_rounds < 1:
        raise DistillError(f"max_rounds must be >= 1, got {max_rounds}")
    if n_samples == 0:
        return TraceDataset.empty(2 * window)

    rows: list[np.ndarray] = []

    def record(features: np.ndarray, delta: float, y: float, flow_id: int) -> None:
        rows.append(np.append(features, y))

    table = np.zeros((0, 2 * window + 1))
    for round_idx in range(max_rounds):
        round_cfg = dataclasses.replace(cfg, seed=cfg.seed + round_idx)
        for spec_idx, spec in enumerate(scenarios):
            rng = np.random.default_rng([cfg.seed, round_idx, spec_idx])
            base = rlcc_factory(teacher, params, mapper, window, record=record)
            engine = build_scenario(spec, round_cfg, _jittered_factory(base, rng, start_jitter))
            run(engine)
        if rows:
            table = _distinct(rows)
            rows = [table]
        logger.info(f"Round {round_idx}: {len(table)} distinct decisions")
        if len(table) >= n_samples:
            break

    if not len(table):
        raise InsufficientSamplesError(f"no decisions recorded, wanted {n_samples}")
    if len(table) < n_samples:
        raise InsufficientSamplesError(
            f"only {len(table)} distinct decisions recorded in {max_rounds} rounds, "
            f"wanted {n_samples}; lengthen the runs"
        )
    rng = np.random.default_rng(cfg.seed)
    picked = np.sort(rng.choice(len(table), size=n_samples, replace=False))
    table = table[picked]
    held_out = np.array([_held_out(i) for i in range(n_samples)], dtype=bool)
    return TraceDataset(table[:, :-1], table[:, -1], held_out)


# ============================================================================
# Trees
# ============================================================================

@dataclass
class TreeNode:
    # "split" or "leaf"
    kind: str
    feature: int = -1
    threshold: float = 0.0
    value: float = 0.0
    left: int = -1
    right: int = -1


@dataclass
class RegressionTree:
    """Binary tree stored in preorder; node 0 is the root, x <= threshold goes left."""
    nodes: list[TreeNode] = field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            self.nodes = [TreeNode("leaf", value=0.0)]

    @property
    def depth(self) -> int:
        def walk(idx: int) -> int:
            node = self.nodes[idx]
            if node.kind == "leaf":
                return 0
            return 1 + max(walk(node.left), walk(node.right))
        return walk(0)

    def predict(self, x: np.ndarray) -> float:
        node = self.nodes[0]
        while node.kind == "split":
            node = self.nodes[node.left if x[node.feature] <= node.threshold else node.right]
        return node.value

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        stack = [(0, np.arange(len(X)))]
        while stack:
            idx, rows = stack.pop()
            node = self.nodes[idx]
            if node.kind == "leaf":
                out[rows] = node.value
                continue
            go_left = X[rows, node.feature] <= node.threshold
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
        return out


@dataclass
class TreeEnsemble:
    f0: float
    eta: float
    trees: list[RegressionTree] = field(default_factory=list)
    n_features: int = 2 * DEFAULT_WINDOW

    @property
    def op_count(self) -> int:
        return count_ops(self)

    @property
    def max_depth(self) -> int:
        return max((t.depth for t in self.trees), default=0)

    def predict(self, features: np.ndarray) -> float:
        x = np.asarray(features, dtype=float)
        acc = 0.0
        for tree in self.trees:
            acc = acc + tree.predict(x)
        return self.f0 + self.eta * acc

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        acc = np.zeros(len(X))
        for tree in self.trees:
            acc = acc + tree.predict_many(X)
        return self.f0 + self.eta * acc

    def __repr__(self):
        return f"<TreeEnsemble trees={len(self.trees)} depth={self.max_depth} ops={self.op_count}>"


def ensemble_predict(ens: TreeEnsemble, features: np.ndarray) -> float:
    return ens.predict(features)


def count_ops(ens: TreeEnsemble) -> int:
    """Worst-case comparisons along each tree, one addition per tree, one base add."""
    return sum(t.depth for t in ens.trees) + len(ens.trees) + 1


@dataclass
class FitConfig:
    n_trees: int = MAX_TREES
    max_depth: int = MAX_DEPTH
    eta: float = 0.3
    min_leaf: int = 20
    n_thresholds: int = 32
    op_budget: int = OP_BUDGET

    def __post_init__(self):
        if not (1 <= self.n_trees <= MAX_TREES):
            raise DistillError(f"n_trees must be in [1, {MAX_TREES}], got {self.n_trees}")
        if not (0 <= self.max_depth <= MAX_DEPTH):
            raise DistillError(f"max_depth must be in [0, {MAX_DEPTH}], got {self.max_depth}")
        if not (0 < self.eta <= 1):
            raise DistillError(f"eta must be in (0, 1], got {self.eta}")
        if self.min_leaf < 1:
            raise DistillError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.n_thresholds < 1:
            raise DistillError(f"n_thresholds must be >= 1, got {self.n_thresholds}")


def _candidates(values: np.ndarray, n_thresholds: int) -> np.ndarray:
    """
    Split thresholds at the interior sample quantiles, each moved up to the
    next midpoint between distinct values. Few distinct values: every midpoint.
    """
    uniq = np.unique(values)
    if len(uniq) < 2:
        return uniq[:0]
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    if len(mids) <= n_thresholds:
        return mids
    levels = np.linspace(0.0, 1.0, n_thresholds + 2)[1:-1]
    q = np.quantile(values, levels)
    picks = np.minimum(np.searchsorted(mids, q, side="left"), len(mids) - 1)
    return np.unique(mids[picks])


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int, n_thresholds: int):
    n = len(r)
    total = r.sum()
    base = total * total / n
    best = None
    best_gain = 1e-12 * max(float(np.dot(r, r)), 1e-300)
    for feature in range(X.shape[1]):
        xs = X[:, feature]
        thresholds = _candidates(xs, n_thresholds)
        if not len(thresholds):
            continue
        order = np.argsort(xs, kind="stable")
        sorted_x = xs[order]
        csum = np.cumsum(r[order])
        n_left = np.searchsorted(sorted_x, thresholds, side="right")
        ok = (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        n_left, thresholds = n_left[ok], thresholds[ok]
        s_left = csum[n_left - 1]
        s_right = total - s_left
        gain = s_left * s_left / n_left + s_right * s_right / (n - n_left) - base
        pick = int(np.argmax(gain))
        if gain[pick] > best_gain:
            best_gain = float(gain[pick])
            best = (feature, float(thresholds[pick]))
    return best


def _grow(nodes: list[TreeNode], X: np.ndarray, r: np.ndarray, depth_left: int, cfg: FitConfig) -> int:
    idx = len(nodes)
    node = TreeNode("leaf", value=float(r.mean()))
    nodes.append(node)
    if depth_left == 0 or len(r) < 2 * cfg.min_leaf:
        return idx
    split = _best_split(X, r, cfg.min_leaf, cfg.n_thresholds)
    if split is None:
        return idx
    feature, threshold = split
    go_left = X[:, feature] <= threshold
    node.kind, node.feature, node.threshold, node.value = "split", feature, threshold, 0.0
    node.left = _grow(nodes, X[go_left], r[go_left], depth_left - 1, cfg)
    node.right = _grow(nodes, X[~go_left], r[~go_left], depth_left - 1, cfg)
    return idx


def fit_tree(X: np.ndarray, residuals: np.ndarray, cfg: FitConfig) -> RegressionTree:
    nodes: list[TreeNode] = []
    _grow(nodes, X, residuals, cfg.max_depth, cfg)
    return RegressionTree(nodes)


def fit_gbt(data: TraceDataset, cfg: FitConfig | None = None) -> TreeEnsemble:
    """
    Least-squares boosting: start from the label mean, then fit each tree to
    the current residuals and add it with shrinkage ``eta``.
    """
    cfg = cfg or FitConfig()
    X, y = data.train_x, data.train_y
    if len(y) == 0:
        raise DistillError("cannot fit an ensemble on an empty training split")

    ens = TreeEnsemble(f0=float(y.mean()), eta=cfg.eta, n_features=X.shape[1])
    prediction = np.full(len(y), ens.f0)
    for t in range(cfg.n_trees):
        tree = fit_tree(X, y - prediction, cfg)
        ens.trees.append(tree)
        prediction = ens.predict_many(X)
        logger.debug(f"Tree {t}: depth {tree.depth}, train rmse {np.sqrt(np.mean((y - prediction) ** 2)):.3e}")

    ops = count_ops(ens)
    if ops > cfg.op_budget:
        raise OpBudgetExceeded(f"ensemble needs {ops} ops, budget is {cfg.op_budget}")
    logger.info(f"Fitted {len(ens.trees)} trees on {len(y)} samples, {ops} ops")
    return ens


def staged_rmse(ens: TreeEnsemble, X: np.ndarray, y: np.ndarray) -> list[float]:
    """RMSE after 0, 1, ..., T trees."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    out = []
    for t in range(len(ens.trees) + 1):
        partial = TreeEnsemble(ens.f0, ens.eta, ens.trees[:t], ens.n_features)
        out.append(float(np.sqrt(np.mean((y - partial.predict_many(X)) ** 2))))
    return out


# ============================================================================
# Fidelity
# ============================================================================

@dataclass
class FidelityRow:
    scenario: str
    goodput_teacher: float
    goodput_student: float
    inflation_teacher: float
    inflation_student: float
    drops_teacher: float
    drops_student: float

    @property
    def goodput_delta(self) -> float:
        return self.goodput_student - self.goodput_teacher

    @property
    def inflation_delta_rel(self) -> float:
        return (self.inflation_student - self.inflation_teacher) / self.inflation_teacher


@dataclass
class FidelityReport:
    rmse_raw: float
    rmse_multiplier: float
    n_held_out: int
    rows: list[FidelityRow] = field(default_factory=list)


def fidelity_report(
    teacher: Predictor,
    student: Predictor,
    data: TraceDataset,
    scenarios: Sequence[ScenarioSpec],
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
) -> FidelityReport:
    """Open-loop error on the held-out split plus closed-loop metric deltas per scenario."""
    mapper = mapper or ActionMapper()
    X = data.test_x
    if len(X):
        y_teacher = np.asarray(teacher.predict_many(X))
        y_student = np.asarray(student.predict_many(X))
        rmse_raw = float(np.sqrt(np.mean((y_teacher - y_student) ** 2)))
        clip = lambda y: np.exp(np.clip(y, mapper.y_min, mapper.y_max))
        rmse_mult = float(np.sqrt(np.mean((clip(y_teacher) - clip(y_student)) ** 2)))
    else:
        rmse_raw = rmse_mult = 0.0
    report = FidelityReport(rmse_raw, rmse_mult, len(X))

    for spec in sorted(scenarios, key=lambda s: s.key):
        a = evaluate_policy(teacher, spec, cfg, params, mapper, window)
        b = evaluate_policy(student, spec, cfg, params, mapper, window)
        report.rows.append(
            FidelityRow(spec.key, a.goodput, b.goodput, a.inflation, b.inflation, a.drops, b.drops)
        )
    return report


FIDELITY_HEADER = [
    "scenario", "goodput_teacher", "goodput_student", "goodput_delta",
    "inflation_teacher", "inflation_student", "inflation_delta_rel", "drops_teacher", "drops_student",
]


def write_fidelity_csv(report: FidelityReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(FIDELITY_HEADER)
        for r in report.rows:
            writer.writerow([
                r.scenario, r.goodput_teacher, r.goodput_student, r.goodput_delta,
                r.inflation_teacher, r.inflation_student, r.inflation_delta_rel,
                r.drops_teacher, r.drops_student,
            ])
    return path
