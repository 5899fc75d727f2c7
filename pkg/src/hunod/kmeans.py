"""K-means outlier detection with per-feature ponders (weights).

Features are scaled to [0, 1] and each column is multiplied by its ponder, so
plain Euclidean K-means on the transformed matrix is K-means under the
weighted distance ``sqrt(sum_i w_i^2 (p_i - q_i)^2)``. Clusters smaller than
``S`` are candidate outlier clusters, scored by the distance from their
centroid to the nearest large-cluster centroid, and whole clusters are
returned in descending score order while they fit within ``M`` instances.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from hunod.data import Dataset, FeatureSchema, ScaledDataset, scale_to_unit
from hunod.errors import ConfigError, DataError
from hunod.features import family_of

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PonderVector:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise ConfigError("ponders must be finite and non-negative")
        if not (w > 0).any():
            raise ConfigError("at least one ponder must be positive")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def ones(cls, d: int) -> "PonderVector":
        return cls(np.ones(d))

    @classmethod
    def from_mapping(cls, schema: FeatureSchema, mapping: Mapping[str, float],
                     default: float = 1.0) -> "PonderVector":
        """Weights by exact feature name, falling back to the feature's family
        (name without the ``_YYmN`` suffix) or one-hot source column."""
        w = []
        for name, src in zip(schema.names, schema.sources):
            for key in (name, family_of(name), src):
                if key in mapping:
                    w.append(float(mapping[key]))
                    break
            else:
                w.append(default)
        return cls(np.array(w))

    def to_mapping(self, schema: FeatureSchema) -> dict[str, float]:
        return {n: float(v) for n, v in zip(schema.names, self.weights)}


def default_ponder_map() -> dict[str, float]:
    text = resources.files("hunod").joinpath("ponders_default.json").read_text()
    return {k: float(v) for k, v in json.loads(text).items() if not k.startswith("_")}


def load_ponders(path: str | Path | None, schema: FeatureSchema) -> PonderVector:
    """Ponders from a JSON ``{feature-or-family: weight}`` file; None -> shipped default."""
    if path is None:
        return PonderVector.from_mapping(schema, default_ponder_map())
    try:
        mapping = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read ponder file {path}: {exc}") from None
    if not isinstance(mapping, dict):
        raise ConfigError("ponder file must hold a JSON object")
    mapping = {k: v for k, v in mapping.items() if not k.startswith("_")}
    return PonderVector.from_mapping(schema, mapping)


@dataclass(frozen=True)
class KMeansConfig:
    """Clustering and selection parameters.

    ``small_cluster_size`` (S) and ``max_outliers`` (M) are instance counts;
    when unset they are derived from the percentages of the dataset size.
    """

    k: int = 10
    small_pct: float = 5.0
    max_outliers_pct: float = 5.0
    small_cluster_size: int | None = None
    max_outliers: int | None = None
    max_iters: int = 300
    n_init: int = 10
    tol: float = 1e-6
    init: str = "k-means++"
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("k-means++", "random"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.n_init < 1 or self.max_iters < 1:
            raise ConfigError("n_init and max_iters must be positive")

    def resolve(self, n: int) -> tuple[int, int]:
        """(S, M) for a dataset of n instances, validated."""
        s = self.small_cluster_size
        if s is None:
            s = math.ceil(self.small_pct * n / 100.0)
        m = self.max_outliers
        if m is None:
            m = math.floor(self.max_outliers_pct * n / 100.0)
        if not 2 <= self.k < n:
            raise ConfigError(f"K must satisfy 2 <= K < |D| (K={self.k}, |D|={n})")
        if not 0 < s < n:
            raise ConfigError(f"small-cluster threshold must satisfy 0 < S < |D| (S={s})")
        if not 0 < m <= n:
            raise ConfigError(f"max outliers must satisfy 0 < M <= |D| (M={m})")
        return s, m


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    assignments: np.ndarray
    centroids: np.ndarray
    cluster_sizes: np.ndarray
    inertia: float
    n_iter: int
    small_threshold: int | None = None
    # (cluster index, outlierness) for each non-empty small cluster
    small_clusters: tuple[tuple[int, float], ...] = ()

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)


@dataclass(frozen=True)
class OutlierSet:
    """Outlier instance ids with their outlierness scores."""

    scores: Mapping[str, float]
    source: str = "kmeans"
    meta: Mapping[str, object] = field(default_factory=dict)

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self.scores)

    def __len__(self) -> int:
        return len(self.scores)

    def __contains__(self, item) -> bool:
        return item in self.scores

    def to_json(self) -> dict:
        return {
            "format": "hunod.outliers/1",
            "source": self.source,
            "meta": dict(self.meta),
            "outliers": [{"id": i, "score": float(s)} for i, s in sorted(self.scores.items())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OutlierSet":
        try:
            scores = {str(o["id"]): float(o["score"]) for o in obj["outliers"]}
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed outlier file: {exc}") from None
        return cls(scores, obj.get("source", "kmeans"), obj.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "OutlierSet":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read outlier file {path}: {exc}") from None


def weighted_distance(p, q, w) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    w = w.weights if isinstance(w, PonderVector) else np.asarray(w, dtype=float)
    if not p.shape == q.shape == w.shape:
        raise DataError(f"length mismatch: {p.shape}, {q.shape}, {w.shape}")
    return float(np.sqrt(np.sum(w**2 * (p - q) ** 2)))


def apply_ponders(data: ScaledDataset | np.ndarray, w: PonderVector) -> np.ndarray:
    x = data.values if isinstance(data, ScaledDataset) else np.asarray(data, dtype=float)
    if x.shape[1] != len(w):
        raise DataError(f"{len(w)} ponders for {x.shape[1]} features")
    return x * w.weights


def _sq_dist(x: np.ndarray, centers: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ centers.T) + np.einsum("ij,ij->i", centers, centers)[None, :]
    return np.maximum(d, 0.0)


def _init_centers(x, k, rng, mode, x_sq):
    n = len(x)
    if mode == "random":
        lo, hi = x.min(axis=0), x.max(axis=0)
        return lo + rng.random((k, x.shape[1])) * (hi - lo)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dist(x, centers[:1], x_sq)[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        closest = np.minimum(closest, _sq_dist(x, centers[c:c + 1], x_sq)[:, 0])
    return centers


def _lloyd(x, centers, max_iters, tol, x_sq):
    k = len(centers)
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dist(x, centers, x_sq)
        new_labels = d.argmin(axis=1)
        mind = d[np.arange(len(x)), new_labels]
        counts = np.bincount(new_labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # repair: the point farthest from its centroid seeds the empty cluster
            far = int(mind.argmax())
            if mind[far] <= 0:
                break
            new_labels[far] = c
            mind[far] = 0.0
            counts = np.bincount(new_labels, minlength=k)
        member = np.zeros((k, len(x)))
        member[new_labels, np.arange(len(x))] = 1.0
        sums = member @ x
        new_centers = centers.copy()
        nz = counts > 0
        new_centers[nz] = sums[nz] / counts[nz, None]
        shift = float(((new_centers - centers) ** 2).sum())
        stable = labels is not None and np.array_equal(labels, new_labels)
        centers, labels = new_centers, new_labels
        if stable or shift <= tol:
            break
    inertia = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, inertia, n_iter


def cluster(x: np.ndarray, cfg: KMeansConfig) -> ClusteringResult:
    """Lloyd's algorithm, best of ``n_init`` seeded restarts by inertia.

    Convergence: assignments unchanged, or squared centroid shift at most
    ``tol`` times the mean per-feature variance of ``x``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    if not 2 <= cfg.k < n:
        raise ConfigError(f"K must satisfy 2 <= K < |D| (K={cfg.k}, |D|={n})")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    x_sq = np.einsum("ij,ij->i", x, x)
    tol = cfg.tol * float(np.var(x, axis=0).mean())
    best = None
    for _ in range(cfg.n_init):
        centers = _init_centers(x, cfg.k, rng, cfg.init, x_sq)
        labels, centers, inertia, n_iter = _lloyd(x, centers, cfg.max_iters, tol, x_sq)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia, n_iter)
    labels, centers, inertia, n_iter = best
    sizes = np.bincount(labels, minlength=cfg.k)
    return ClusteringResult(labels, centers, sizes, inertia, n_iter)


def outlierness(small_centroid: np.ndarray, large_centroids: np.ndarray) -> float:
    """Distance from a small cluster's centroid to the closest large centroid."""
    large = np.atleast_2d(np.asarray(large_centroids, dtype=float))
    if large.size == 0:
        raise DataError(
            "no large clusters: every cluster is smaller than S; "
            "lower the small-cluster threshold S or use fewer clusters"
        )
    diff = large - np.asarray(small_centroid, dtype=float)[None, :]
    return float(np.sqrt((diff**2).sum(axis=1)).min())


def analyze_clusters(result: ClusteringResult, small_threshold: int) -> ClusteringResult:
    """Classify clusters as small/large and score each non-empty small one."""
    sizes = result.cluster_sizes
    small = [c for c in range(result.k) if 0 < sizes[c] < small_threshold]
    large = [c for c in range(result.k) if sizes[c] >= small_threshold]
    scored = []
    if small:
        large_centroids = result.centroids[large]
        scored = [(c, outlierness(result.centroids[c], large_centroids)) for c in small]
    return ClusteringResult(
        result.assignments, result.centroids, result.cluster_sizes, result.inertia,
        result.n_iter, small_threshold, tuple(scored),
    )


def select_clusters(small_clusters, sizes, max_outliers: int) -> list[int]:
    """Walk small clusters by descending score (ties: lower index first) and take
    whole clusters until the next one would exceed ``max_outliers``."""
    ranked = sorted(small_clusters, key=lambda cs: (-cs[1], cs[0]))
    chosen, total = [], 0
    for c, _ in ranked:
        if total + sizes[c] > max_outliers:
            break
        chosen.append(c)
        total += sizes[c]
    return chosen


def select_outliers(result: ClusteringResult, cfg: KMeansConfig | int,
                    ids: tuple[str, ...] | None = None) -> OutlierSet:
    if isinstance(cfg, KMeansConfig):
        _, m = cfg.resolve(len(result.assignments))
    else:
        m = int(cfg)
    if ids is None:
        ids = tuple(str(i) for i in range(len(result.assignments)))
    score = dict(result.small_clusters)
    chosen = select_clusters(result.small_clusters, result.cluster_sizes, m)
    scores = {}
    for c in chosen:
        for i in result.members(c):
            scores[ids[i]] = score[c]
    return OutlierSet(scores, "kmeans", {"clusters": [int(c) for c in chosen], "max_outliers": m})


def run(data: Dataset, w: PonderVector | None, cfg: KMeansConfig) -> tuple[ClusteringResult, OutlierSet]:
    """Scale, weight, cluster and select; rows are clustered in sorted-id order.

    ``w=None`` runs plain (unweighted) K-means on the scaled features.
    """
    s, m = cfg.resolve(len(data))
    order = np.argsort(np.array(data.ids, dtype=object), kind="stable")
    scaled = scale_to_unit(data)
    x = scaled.values if w is None else apply_ponders(scaled, w)
    x = x[order]
    ids = tuple(data.ids[i] for i in order)
    result = analyze_clusters(cluster(x, cfg), s)
    found = select_outliers(result, m, ids)
    meta = dict(found.meta, k=cfg.k, small_threshold=s, seed=cfg.seed,
                small_cluster_count=len(result.small_clusters),
                small_cluster_population=int(sum(result.cluster_sizes[c] for c, _ in result.small_clusters)))
    logger.info("k-means K=%d: %d small clusters, %d outliers (M=%d)",
                cfg.k, len(result.small_clusters), len(found), m)
    # assignments are reported in the caller's row order
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    result = ClusteringResult(result.assignments[inv], result.centroids, result.cluster_sizes,
                              result.inertia, result.n_iter, s, result.small_clusters)
    return result, OutlierSet(found.scores, "kmeans", meta)


def detect(data: Dataset, w: PonderVector | None, cfg: KMeansConfig) -> OutlierSet:
    return run(data, w, cfg)[1]
