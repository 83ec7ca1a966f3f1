"""Multiclass gradient-boosted regression-tree post-filter.

Consumes the neural model's class probabilities plus census features and
emits corrected probabilities. Softmax objective with second-order (Newton)
leaf weights, exact greedy split finding, L2-regularized gains, and
sparsity-aware default directions for missing values.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import N_CLASSES, PersonRecord, RaceClass, RaceDistribution, TractRecord
from .errors import DegenerateLabels, InvariantError, ModelFormatError
from .lstm.training import geo_vector, mean_geo_vector

FEATURE_NAMES = (
    "p_white",
    "p_black",
    "p_hispanic",
    "p_asian",
    "p_other",
    "tract_white",
    "tract_black",
    "tract_hispanic",
    "tract_asian",
    "tract_other",
    "income_decile_scaled",
)
N_FEATURES = len(FEATURE_NAMES)

FORMAT_NAME = "raceimpute-gbdt"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbdtConfig:
    num_rounds: int = 150
    learning_rate: float = 0.15
    max_depth: int = 3
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1 or self.max_depth < 1:
            raise InvariantError("num_rounds and max_depth must be >= 1")
        if not (0.0 < self.learning_rate <= 1.0):
            raise InvariantError(f"learning_rate {self.learning_rate} not in (0, 1]")
        if not (0.0 < self.subsample <= 1.0):
            raise InvariantError(f"subsample {self.subsample} not in (0, 1]")
        if self.min_child_weight < 0 or self.l2_lambda < 0:
            raise InvariantError("min_child_weight and l2_lambda must be >= 0")


@dataclass
class TreeNode:
    """Internal split or leaf. Missing feature values follow default_left."""

    leaf_value: float | None = None
    feature: int = -1
    threshold: float = 0.0
    default_left: bool = True
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    def is_leaf(self) -> bool:
        return self.leaf_value is not None

    def to_dict(self) -> dict:
        if self.is_leaf():
            return {"leaf": self.leaf_value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "default_left": self.default_left,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeNode":
        if "leaf" in obj:
            return cls(leaf_value=float(obj["leaf"]))
        return cls(
            feature=int(obj["feature"]),
            threshold=float(obj["threshold"]),
            default_left=bool(obj["default_left"]),
            left=cls.from_dict(obj["left"]),
            right=cls.from_dict(obj["right"]),
        )


@dataclass
class GbdtModel:
    config: GbdtConfig
    rounds: list[list[TreeNode]] = field(default_factory=list)  # [round][class]
    base_score: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    feature_gain: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    train_ce: list[float] = field(default_factory=list)  # per-round training loss


def build_filter_features(lstm_probs: RaceDistribution, tract: TractRecord) -> np.ndarray:
    """Fixed-order 11-feature row: 5 model probs, 5 tract shares, scaled decile."""
    return np.array(
        [*lstm_probs.p, *tract.composition.p, (tract.income_decile - 1) / 9.0],
        dtype=np.float64,
    )


def build_filter_matrix(
    probs: Sequence[RaceDistribution] | np.ndarray,
    records: Sequence[PersonRecord],
    tract_table: dict[str, TractRecord],
) -> np.ndarray:
    """Assemble (N,11) features; unknown tracts get table-mean geo features."""
    if len(probs) != len(records):
        raise InvariantError("probs and records length mismatch")
    mean_geo = mean_geo_vector(tract_table)
    rows = np.empty((len(records), N_FEATURES))
    for i, (p, r) in enumerate(zip(probs, records)):
        p_arr = p.as_array() if isinstance(p, RaceDistribution) else np.asarray(p, dtype=np.float64)
        tract = tract_table.get(r.tract_geoid) if r.tract_geoid else None
        geo = geo_vector(tract) if tract is not None else mean_geo
        rows[i, :N_CLASSES] = p_arr
        rows[i, N_CLASSES:] = geo
    return rows


def _softmax_rows(margins: np.ndarray) -> np.ndarray:
    shifted = margins - margins.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray, cfg: GbdtConfig):
    """Exact greedy search over all features/thresholds at one node.

    Returns (gain, feature, threshold, default_left) or None. Ties resolve to
    the lowest feature index, then the lowest threshold, then missing-left.
    """
    lam = cfg.l2_lambda
    G = g[rows].sum()
    H = h[rows].sum()
    parent = G * G / (H + lam)
    best = None
    for f in range(X.shape[1]):
        vals = X[rows, f]
        finite = np.isfinite(vals)
        g_miss = g[rows[~finite]].sum()
        h_miss = h[rows[~finite]].sum()
        fin_rows = rows[finite]
        if fin_rows.size < 2:
            continue
        v = X[fin_rows, f]
        order = np.argsort(v, kind="stable")
        v_sorted = v[order]
        g_cum = np.cumsum(g[fin_rows][order])
        h_cum = np.cumsum(h[fin_rows][order])
        distinct = v_sorted[1:] != v_sorted[:-1]
        if not distinct.any():
            continue
        cut = np.nonzero(distinct)[0]  # split after sorted position i
        GL = g_cum[cut]
        HL = h_cum[cut]
        GR = g_cum[-1] - GL
        HR = h_cum[-1] - HL
        thresholds = 0.5 * (v_sorted[cut] + v_sorted[cut + 1])
        for miss_left in (True, False):
            gl = GL + (g_miss if miss_left else 0.0)
            hl = HL + (h_miss if miss_left else 0.0)
            gr = GR + (0.0 if miss_left else g_miss)
            hr = HR + (0.0 if miss_left else h_miss)
            ok = (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight)
            if not ok.any():
                continue
            gains = np.where(ok, 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent), -np.inf)
            j = int(np.argmax(gains))
            if gains[j] > 0 and (best is None or gains[j] > best[0] + 1e-15):
                best = (float(gains[j]), f, float(thresholds[j]), miss_left)
    return best


def _route_left(X: np.ndarray, rows: np.ndarray, node: TreeNode) -> np.ndarray:
    vals = X[rows, node.feature]
    finite = np.isfinite(vals)
    left = np.where(finite, vals < node.threshold, node.default_left)
    return left


def _build_tree(X, g, h, rows, depth, cfg: GbdtConfig, feature_gain: np.ndarray) -> TreeNode:
    lam = cfg.l2_lambda
    G = g[rows].sum()
    H = h[rows].sum()
    if depth >= cfg.max_depth or rows.size < 2:
        return TreeNode(leaf_value=-G / (H + lam))
    found = _best_split(X, g, h, rows, cfg)
    if found is None:
        return TreeNode(leaf_value=-G / (H + lam))
    gain, f, threshold, miss_left = found
    node = TreeNode(feature=f, threshold=threshold, default_left=miss_left)
    feature_gain[f] += gain
    left_mask = _route_left(X, rows, node)
    node.left = _build_tree(X, g, h, rows[left_mask], depth + 1, cfg, feature_gain)
    node.right = _build_tree(X, g, h, rows[~left_mask], depth + 1, cfg, feature_gain)
    return node


def _apply_tree(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if node.is_leaf():
            out[rows] = node.leaf_value
            continue
        left_mask = _route_left(X, rows, node)
        stack.append((node.left, rows[left_mask]))
        stack.append((node.right, rows[~left_mask]))
    return out


def fit(features: np.ndarray, labels: Sequence[RaceClass] | np.ndarray, config: GbdtConfig) -> GbdtModel:
    """Boost one regression tree per class per round on the softmax objective.

    Gradients g = p - y and hessians h = p(1 - p) per class margin; leaf
    weights are -G/(H + lambda), shrunk by the learning rate when margins
    accumulate. Deterministic for a fixed seed.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.array([int(v) for v in labels], dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise InvariantError(f"features {X.shape} do not match {y.size} labels")
    if np.unique(y).size < 2:
        raise DegenerateLabels("need at least 2 distinct labels to fit")
    n = X.shape[0]
    onehot = np.zeros((n, N_CLASSES))
    onehot[np.arange(n), y] = 1.0
    model = GbdtModel(config=config)
    margins = np.tile(model.base_score, (n, 1))
    rng = np.random.default_rng(config.seed)
    for _ in range(config.num_rounds):
        probs = _softmax_rows(margins)
        grad = probs - onehot
        hess = probs * (1.0 - probs)
        if config.subsample < 1.0:
            k = max(1, int(round(config.subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        else:
            rows = np.arange(n)
        round_trees = []
        for cls in range(N_CLASSES):
            tree = _build_tree(X, grad[:, cls], hess[:, cls], rows, 0, config, model.feature_gain)
            round_trees.append(tree)
            margins[:, cls] += config.learning_rate * _apply_tree(tree, X)
        model.rounds.append(round_trees)
        probs_after = _softmax_rows(margins)
        model.train_ce.append(float(-np.log(np.maximum(probs_after[np.arange(n), y], 1e-300)).mean()))
    return model


def predict_margins(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    margins = np.tile(model.base_score, (X.shape[0], 1))
    for round_trees in model.rounds:
        for cls, tree in enumerate(round_trees):
            margins[:, cls] += model.config.learning_rate * _apply_tree(tree, X)
    return margins


def predict(model: GbdtModel, features: np.ndarray) -> RaceDistribution:
    probs = _softmax_rows(predict_margins(model, np.asarray(features).reshape(1, -1)))
    return RaceDistribution.from_probs(probs[0])


def predict_proba(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    return _softmax_rows(predict_margins(model, X))


def feature_importance(model: GbdtModel) -> list[tuple[str, float]]:
    """Cumulative split gain per feature, descending; ties by feature index."""
    order = sorted(range(N_FEATURES), key=lambda f: (-model.feature_gain[f], f))
    return [(FEATURE_NAMES[f], float(model.feature_gain[f])) for f in order]


DEFAULT_GRID = tuple(
    GbdtConfig(num_rounds=r, max_depth=d, learning_rate=lr)
    for r in (50, 200)
    for d in (3, 6)
    for lr in (0.1, 0.3)
)


def fit_with_grid_search(
    features: np.ndarray,
    labels,
    val_features: np.ndarray,
    val_labels,
    grid: Sequence[GbdtConfig] = DEFAULT_GRID,
    seed: int = 0,
) -> tuple[GbdtModel, GbdtConfig, list[tuple[GbdtConfig, float]]]:
    """Deterministic small-grid selection on validation accuracy."""
    y_val = np.array([int(v) for v in val_labels], dtype=np.int64)
    results = []
    best = None
    for cfg in grid:
        cfg = GbdtConfig(**{**asdict(cfg), "seed": seed})
        model = fit(features, labels, cfg)
        acc = float((predict_proba(model, val_features).argmax(axis=1) == y_val).mean())
        results.append((cfg, acc))
        if best is None or acc > best[2]:
            best = (model, cfg, acc)
    return best[0], best[1], results


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _payload_checksum(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_gbdt(model: GbdtModel, path: str | Path) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "base_score": [repr(float(v)) for v in model.base_score],
        "feature_gain": [repr(float(v)) for v in model.feature_gain],
        "train_ce": [repr(v) for v in model.train_ce],
        "rounds": [[tree.to_dict() for tree in round_trees] for round_trees in model.rounds],
    }
    doc["checksum"] = _payload_checksum(doc)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_gbdt(path: str | Path) -> GbdtModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {doc.get('version')!r}")
    if doc.get("checksum") != _payload_checksum(doc):
        raise ModelFormatError(f"{path}: checksum mismatch (file corrupt?)")
    model = GbdtModel(config=GbdtConfig(**doc["config"]))
    model.base_score = np.array([float(v) for v in doc["base_score"]])
    model.feature_gain = np.array([float(v) for v in doc["feature_gain"]])
    model.train_ce = [float(v) for v in doc["train_ce"]]
    model.rounds = [[TreeNode.from_dict(t) for t in rt] for rt in doc["rounds"]]
    return model
