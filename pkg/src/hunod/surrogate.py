"""Explainable surrogate: a binary CART tree replicating the autoencoder labels.

Every internal node holds a relational expression ``feature > threshold``;
instances satisfying it go right, the rest go left. The split chosen at a node
``Q`` maximizes::

    S(Q, r) = L(Q) P(Q) - L(Q1) P(Q1) - L(Q2) P(Q2)

where ``P`` is the node impurity (Gini or entropy) and ``L(R) = |R| / |E|``
weighs a node by its share of the whole training set ``E``.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from hunod.data import Dataset
from hunod.errors import ConfigError, DataError
from hunod.kmeans import OutlierSet

logger = logging.getLogger(__name__)

TREE_FORMAT = "hunod.tree/1"
MEASURES = ("gini", "entropy")
TIE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Dataset with a binary class per instance (1 = autoencoder outlier)."""

    base: Dataset
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.int8)
        if labels.shape != (len(self.base),):
            raise DataError(f"{labels.size} labels for {len(self.base)} instances")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.base)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())


def label_dataset(data: Dataset, outliers: OutlierSet | Sequence[str]) -> LabeledDataset:
    ids = outliers.ids if isinstance(outliers, OutlierSet) else frozenset(map(str, outliers))
    unknown = ids - set(data.ids)
    if unknown:
        raise DataError(f"outlier ids not in the dataset: {sorted(unknown)[:5]}")
    return LabeledDataset(data, np.array([i in ids for i in data.ids], dtype=np.int8))


def impurity(positive_fraction: float | np.ndarray, measure: str = "gini"):
    """Gini ``2p(1-p)`` or base-2 entropy of a two-class distribution."""
    p = np.asarray(positive_fraction, dtype=np.float64)
    q = 1.0 - p
    if measure == "gini":
        out = p * (1.0 - p) + q * (1.0 - q)
    elif measure == "entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    else:
        raise ConfigError(f"unknown impurity measure {measure!r}; expected one of {MEASURES}")
    return float(out) if out.ndim == 0 else out


def split_gain(labels: np.ndarray, goes_right: np.ndarray, n_total: int,
               measure: str = "gini") -> float | None:
    """Gain of splitting the node holding ``labels``; None for a degenerate split."""
    labels = np.asarray(labels)
    right = np.asarray(goes_right, dtype=bool)
    n, n2 = len(labels), int(right.sum())
    n1 = n - n2
    if n1 == 0 or n2 == 0:
        return None

    def term(y):
        return len(y) / n_total * impurity(y.mean(), measure)

    return term(labels) - term(labels[~right]) - term(labels[right])


@dataclass
class Node:
    counts: tuple[int, int]  # (negatives, positives)
    feature: int | None = None
    threshold: float | None = None
    gain: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def prediction(self) -> int:
        """Majority class; an even split predicts 0."""
        return int(self.counts[1] > self.counts[0])


@dataclass
class DecisionTree:
    root: Node
    feature_names: tuple[str, ...]
    measure: str = "gini"
    n_train: int = 0

    def nodes(self) -> Iterator[Node]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend((node.right, node.left))

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def depth(self) -> int:
        def walk(node):
            return 0 if node.is_leaf else 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.array([_descend(self.root, row)[0].prediction for row in x], dtype=np.int8)

    def to_json(self) -> dict:
        names = self.feature_names

        def encode(node: Node) -> dict:
            out = {"counts": list(node.counts), "class": node.prediction}
            if not node.is_leaf:
                out.update(
                    feature=names[node.feature], feature_index=node.feature,
                    threshold=node.threshold, gain=node.gain,
                    left=encode(node.left), right=encode(node.right),
                )
            return out

        return {
            "format": TREE_FORMAT, "measure": self.measure, "n_train": self.n_train,
            "features": list(names), "root": encode(self.root),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DecisionTree":
        if doc.get("format") != TREE_FORMAT:
            raise DataError(f"unsupported tree format {doc.get('format')!r}")

        def decode(d: dict) -> Node:
            node = Node(tuple(d["counts"]))
            if "feature_index" in d:
                node.feature = int(d["feature_index"])
                node.threshold = float(d["threshold"])
                node.gain = float(d["gain"])
                node.left, node.right = decode(d["left"]), decode(d["right"])
            return node

        return cls(decode(doc["root"]), tuple(doc["features"]), doc["measure"], doc.get("n_train", 0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DecisionTree":
        return cls.from_json(json.loads(Path(path).read_text()))


def _descend(node: Node, row: np.ndarray) -> tuple[Node, list[tuple[int, float, bool]]]:
    path = []
    while not node.is_leaf:
        right = bool(row[node.feature] > node.threshold)
        path.append((node.feature, node.threshold, right))
        node = node.right if right else node.left
    return node, path


def _best_split(x: np.ndarray, y: np.ndarray, n_total: int, measure: str):
    """Best (gain, feature, threshold) over midpoints of consecutive distinct values.

    Ties within ``TIE_EPS`` go to the lowest feature index, then the lowest
    threshold. Returns None when every feature is constant on the node.
    """
    n = len(y)
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    ys = y[order]
    left_pos = np.cumsum(ys, axis=0)[:-1].astype(np.float64)  # left = first i+1 rows
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    right_pos = ys.sum(axis=0)[None, :] - left_pos
    parent = n / n_total * impurity(y.mean(), measure)
    gains = (parent
             - n_left / n_total * impurity(left_pos / n_left, measure)
             - n_right / n_total * impurity(right_pos / n_right, measure))
    valid = xs[1:] > xs[:-1]
    if not valid.any():
        return None
    gains = np.where(valid, gains, -np.inf)
    best = gains.max()
    # lowest feature index first, then lowest threshold (rows are sorted ascending)
    rows, cols = np.nonzero(gains.T >= best - TIE_EPS)
    f, i = int(rows[0]), int(cols[0])
    lo, hi = xs[i, f], xs[i + 1, f]
    theta = (lo + hi) / 2.0
    if not lo <= theta < hi:  # adjacent floats
        theta = lo
    return float(gains[i, f]), f, float(theta)


def build_tree(data: LabeledDataset, measure: str = "gini", min_split: int = 2,
               allow_zero_gain: bool = True) -> DecisionTree:
    """Grow an unpruned tree of unbounded depth.

    A node becomes a leaf when it is pure, holds fewer than ``min_split``
    instances, or admits no split. With ``allow_zero_gain`` a node may still be
    split when the best available gain is zero, so that every training set
    without contradictory duplicates is fitted exactly; otherwise only splits
    with positive gain are made.
    """
    if measure not in MEASURES:
        raise ConfigError(f"unknown impurity measure {measure!r}; expected one of {MEASURES}")
    if len(data) == 0:
        raise DataError("cannot build a tree on an empty dataset")
    x = data.base.values
    y = data.labels.astype(np.float64)
    n_total = len(y)

    def grow(rows: np.ndarray) -> Node:
        yy = y[rows]
        pos = int(yy.sum())
        node = Node((len(rows) - pos, pos))
        if pos == 0 or pos == len(rows) or len(rows) < min_split:
            return node
        found = _best_split(x[rows], yy, n_total, measure)
        if found is None:
            return node
        gain, f, theta = found
        if gain <= TIE_EPS and not allow_zero_gain:
            return node
        right = x[rows, f] > theta
        node.feature, node.threshold, node.gain = f, theta, max(gain, 0.0)
        node.left = grow(rows[~right])
        node.right = grow(rows[right])
        return node

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * n_total + 100))
    try:
        root = grow(np.arange(n_total))
    finally:
        sys.setrecursionlimit(limit)
    return DecisionTree(root, data.base.schema.names, measure, n_total)


@dataclass(frozen=True)
class Explanation:
    label: int
    path: tuple[str, ...] = field(default=())


def classify(tree: DecisionTree, p: np.ndarray) -> Explanation:
    """Leaf class plus the relational expressions satisfied on the way down."""
    leaf, steps = _descend(tree.root, np.asarray(p, dtype=np.float64))
    names = tree.feature_names
    path = tuple(f"{names[f]} {'>' if right else '<='} {t:.6g}" for f, t, right in steps)
    return Explanation(leaf.prediction, path)


def accuracy(tree: DecisionTree, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    return float((tree.predict(data.base.values) == data.labels).mean())


def feature_importance(tree: DecisionTree) -> dict[str, float]:
    """Per-feature sum of split gains, normalized to sum to 1 (empty without gains)."""
    totals: dict[int, float] = {}
    for node in tree.nodes():
        if not node.is_leaf:
            totals[node.feature] = totals.get(node.feature, 0.0) + node.gain
    grand = sum(totals.values())
    if grand <= 0:
        return {}
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return {tree.feature_names[f]: g / grand for f, g in ranked}


def has_contradictions(data: LabeledDataset) -> bool:
    """True when two instances share a feature vector but not a label."""
    frame = {}
    for row, label in zip(map(bytes, np.ascontiguousarray(data.base.values)), data.labels):
        if frame.setdefault(row, label) != label:
            return True
    return False


@dataclass
class SurrogateResult:
    tree: DecisionTree
    labeled: LabeledDataset
    training_accuracy: float
    importance: dict[str, float]
    contradictions: bool

    def explanations(self) -> Iterator[dict]:
        for tin, row, label in zip(self.labeled.base.ids, self.labeled.base.values, self.labeled.labels):
            exp = classify(self.tree, row)
            yield {"tin": tin, "label": int(label), "predicted": exp.label, "path": list(exp.path)}


def fit(data: Dataset, outliers: OutlierSet, measure: str = "gini") -> SurrogateResult:
    labeled = label_dataset(data, outliers)
    tree = build_tree(labeled, measure)
    acc = accuracy(tree, labeled)
    contradictions = has_contradictions(labeled)
    if acc < 1.0:
        logger.warning(
            "surrogate training accuracy %.6f < 1%s", acc,
            " (contradictory duplicate rows)" if contradictions else "",
        )
    return SurrogateResult(tree, labeled, acc, feature_importance(tree), contradictions)
