"""Autoencoder outlier detection trained on a domain-selected subset.

The network is fully connected: ReLU hidden layers, each followed by inverted
dropout in training mode, and a linear output layer of the input width. The
training loss on a batch ``B`` is::

    (1/|B|) * sum_p E(p)  +  lam * sum_p sum_l ||y_l(p)||^2

where ``E(p)`` is the squared reconstruction error of instance ``p`` and
``y_l`` are the (pre-dropout) activations of the penalized layers. After
training, the largest reconstruction error over the training set becomes the
outlier threshold for every instance outside it.
"""

from __future__ import annotations

import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hunod.data import Dataset, scale_to_unit
from hunod.errors import ConfigError, DataError, NumericError
from hunod.kmeans import OutlierSet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hunod.autoencoder/1"

LAYOUT_PRESETS = {
    "1": ("d/2",),
    "3": ("d/2", "d/4", "d/2"),
    "5": ("3d/4", "d/2", "d/4", "d/2", "3d/4"),
}
# (keep_prob, activity_reg) pairs of the regularization ablation
REGULARIZATION_GRID = ((0.8, 0.1), (1.0, 0.1), (0.8, 0.0), (1.0, 0.0))

_WIDTH = re.compile(r"^\s*(\d*)\s*d\s*(?:/\s*(\d+))?\s*$")


def layer_width(expr: str | int, d: int) -> int:
    """Width from an int or an expression like ``d/2`` or ``3d/4`` (rounded up)."""
    if isinstance(expr, (int, np.integer)):
        width = int(expr)
    else:
        text = str(expr).strip()
        if text.isdigit():
            width = int(text)
        else:
            m = _WIDTH.match(text)
            if not m:
                raise ConfigError(f"bad layer width {expr!r}")
            num = int(m.group(1) or 1)
            den = int(m.group(2) or 1)
            width = math.ceil(num * d / den)
    if width < 1:
        raise ConfigError(f"layer width must be >= 1, got {width} from {expr!r}")
    return width


def parse_layout(spec: str | Sequence, d: int) -> list[int]:
    if isinstance(spec, str):
        spec = LAYOUT_PRESETS.get(spec.strip(), spec.split(","))
    widths = [layer_width(s, d) for s in spec]
    if not widths:
        raise ConfigError("at least one hidden layer is required")
    return widths


@dataclass(frozen=True)
class AutoencoderConfig:
    layout: tuple = LAYOUT_PRESETS["3"]
    keep_prob: float = 0.8
    activity_reg: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    # "hidden" penalizes the ReLU layers only; "hidden+output" also penalizes the
    # linear output, which pulls every reconstruction towards zero
    activity_layers: str = "hidden"

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.activity_reg < 0:
            raise ConfigError("activity_reg must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.activity_layers not in ("hidden+output", "hidden"):
            raise ConfigError(f"unknown activity_layers {self.activity_layers!r}")
        if isinstance(self.layout, str):
            object.__setattr__(self, "layout", tuple(LAYOUT_PRESETS.get(self.layout, self.layout.split(","))))

    def widths(self, d: int) -> list[int]:
        return parse_layout(self.layout, d)


@dataclass
class NetworkModel:
    """Dense layer parameters; ``weights[l]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    max_error: float | None = None
    loss_history: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    @classmethod
    def initialize(cls, d: int, hidden: Sequence[int], rng: np.random.Generator) -> "NetworkModel":
        """He-uniform weights, zero biases."""
        sizes = [d, *hidden, d]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "NetworkModel":
        return NetworkModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.max_error, list(self.loss_history))

    def save(self, path: str | Path) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "layout": [self.d, *self.hidden_widths, self.d],
            "activations": ["relu"] * len(self.hidden_widths) + ["linear"],
            "max_error": self.max_error,
        }
        arrays = {f"W{i}": w for i, w in enumerate(self.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.biases)})
        buf = io.BytesIO()
        np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "NetworkModel":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
            n = len(header["layout"]) - 1
            weights = [z[f"W{i}"] for i in range(n)]
            biases = [z[f"b{i}"] for i in range(n)]
        return cls(weights, biases, header.get("max_error"))


@dataclass
class ForwardPass:
    output: np.ndarray
    # post-activation outputs per layer (hidden..., output), before dropout
    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]
    inputs: list[np.ndarray]
    masks: list[np.ndarray | None]


def forward(model: NetworkModel, x: np.ndarray, mode: str = "infer", keep_prob: float = 1.0,
            rng: np.random.Generator | None = None) -> ForwardPass:
    """Feed a batch (rows are instances) through the network.

    In ``train`` mode with ``keep_prob < 1`` each hidden output is multiplied
    by a Bernoulli(keep_prob) mask divided by keep_prob.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.d:
        raise DataError(f"expected {model.d} features, got {x.shape[1]}")
    drop = mode == "train" and keep_prob < 1.0
    if drop and rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    h = x
    acts, pres, inputs, masks = [], [], [], []
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w + b
        pres.append(z)
        if l == last:
            acts.append(z)
            masks.append(None)
            break
        y = np.maximum(z, 0.0)
        acts.append(y)
        if drop:
            mask = (rng.random(y.shape) < keep_prob) / keep_prob
            h = y * mask
        else:
            mask = None
            h = y
        masks.append(mask)
    return ForwardPass(acts[-1], acts, pres, inputs, masks)


def reconstruction_errors(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Squared L2 reconstruction error per row, inference mode."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = forward(model, x, "infer").output
    return ((out - x) ** 2).sum(axis=1)


def reconstruction_error(model: NetworkModel, p: np.ndarray) -> float:
    return float(reconstruction_errors(model, p)[0])


def _penalized(n_layers: int, activity_layers: str) -> list[int]:
    return list(range(n_layers)) if activity_layers == "hidden+output" else list(range(n_layers - 1))


def loss(model: NetworkModel, batch: np.ndarray, lam: float, *, mode: str = "infer",
         keep_prob: float = 1.0, rng: np.random.Generator | None = None,
         activity_layers: str = "hidden", fp: ForwardPass | None = None) -> float:
    """Mean reconstruction error plus the activity penalty over the batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if len(batch) == 0:
        raise DataError("empty batch")
    fp = fp or forward(model, batch, mode, keep_prob, rng)
    mse = float(((fp.output - batch) ** 2).sum() / len(batch))
    if lam == 0:
        return mse
    penalty = sum(float((fp.activations[l] ** 2).sum())
                  for l in _penalized(len(fp.activations), activity_layers))
    return mse + lam * penalty


def gradients(model: NetworkModel, batch: np.ndarray, fp: ForwardPass, lam: float,
              activity_layers: str = "hidden") -> list[np.ndarray]:
    """Backpropagated gradients, ordered like ``model.parameters()``."""
    n_layers = len(model.weights)
    penal = set(_penalized(n_layers, activity_layers))
    grads_w: list[np.ndarray] = [None] * n_layers
    grads_b: list[np.ndarray] = [None] * n_layers
    out = fp.output
    delta = (2.0 / len(batch)) * (out - batch)
    if lam and (n_layers - 1) in penal:
        delta = delta + 2.0 * lam * out
    for l in range(n_layers - 1, -1, -1):
        grads_w[l] = fp.inputs[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l == 0:
            break
        dy = delta @ model.weights[l].T
        mask = fp.masks[l - 1]
        if mask is not None:
            dy = dy * mask
        if lam and (l - 1) in penal:
            dy = dy + 2.0 * lam * fp.activations[l - 1]
        delta = dy * (fp.pre_activations[l - 1] > 0)
    return [g for pair in zip(grads_w, grads_b) for g in pair]


def train(data: np.ndarray, cfg: AutoencoderConfig, *, log_every: int = 0) -> NetworkModel:
    """Minibatch Adam over ``cfg.epochs`` epochs, reshuffling every epoch.

    The returned model carries ``max_error``, the largest inference-mode
    reconstruction error over ``data``.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise DataError("training data must be a non-empty 2-D array")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = NetworkModel.initialize(x.shape[1], cfg.widths(x.shape[1]), rng)
    # parameters live in one flat buffer so each Adam step is a few vector ops
    theta = _flatten(model)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    tmp = np.empty_like(theta)
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon
    n, bs = len(x), min(cfg.batch_size, len(x))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = x[order[start:start + bs]]
            fp = forward(model, batch, "train", cfg.keep_prob, rng)
            value = loss(model, batch, cfg.activity_reg, fp=fp, activity_layers=cfg.activity_layers)
            if not math.isfinite(value):
                raise NumericError(
                    f"training diverged at epoch {epoch}, step {step}: loss={value} "
                    f"(learning_rate={lr}, activity_reg={cfg.activity_reg})"
                )
            total += value * len(batch)
            g = np.concatenate([a.ravel() for a in gradients(model, batch, fp, cfg.activity_reg,
                                                             cfg.activity_layers)])
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            m1 *= b1
            m1 += (1.0 - b1) * g
            np.multiply(g, g, out=g)
            m2 *= b2
            m2 += (1.0 - b2) * g
            np.divide(m2, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += eps
            np.divide(m1, tmp, out=tmp)
            tmp *= lr / c1
            theta -= tmp
        model.loss_history.append(total / n)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d/%d loss %.6g", epoch + 1, cfg.epochs, total / n)
    errors = reconstruction_errors(model, x)
    if not np.all(np.isfinite(errors)):
        raise NumericError("non-finite reconstruction error after training")
    model.max_error = float(errors.max())
    return model


def _flatten(model: NetworkModel) -> np.ndarray:
    """Copy parameters into one vector and rebind the model's arrays as views of it."""
    params = model.parameters()
    theta = np.concatenate([p.ravel() for p in params])
    offset = 0
    views = []
    for p in params:
        views.append(theta[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    model.weights = views[0::2]
    model.biases = views[1::2]
    return theta


# -- selection and cross-checks ------------------------------------------------


def _overlap(a: frozenset, b: frozenset) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _share(part: frozenset, ref: frozenset) -> float:
    return len(part & ref) / len(part) if part else 0.0


@dataclass(frozen=True)
class TrainingSelection:
    training: frozenset[str]
    rest: frozenset[str]
    jaccard_vs_kmeans: float
    share_in_kmeans: float


@dataclass(frozen=True)
class CrossCheckReport:
    """Agreement of the training set (T) and autoencoder outliers (A) with K-means outliers (O).

    ``training_jaccard`` = |T&O|/|T|O|, ``training_share`` = |T&O|/|T|,
    ``outlier_jaccard`` = |A&O|/|A|O|, ``outlier_share`` = |A&O|/|A|.
    Empty denominators give 0.
    """

    training_jaccard: float
    training_share: float
    outlier_jaccard: float
    outlier_share: float

    def to_json(self) -> dict:
        return {
            "C_t_jaccard": self.training_jaccard,
            "V_T": self.training_share,
            "C_a_jaccard": self.outlier_jaccard,
            "V_O": self.outlier_share,
        }


def select_training(data: Dataset, scores: np.ndarray, threshold: float,
                    kmeans_outliers: OutlierSet | None = None) -> TrainingSelection:
    """Instances scoring at least ``threshold`` form the training set."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(data),):
        raise DataError(f"{scores.shape[0]} scores for {len(data)} instances")
    keep = scores >= threshold
    training = frozenset(i for i, k in zip(data.ids, keep) if k)
    if not training:
        raise DataError(f"no instance has a score >= {threshold}; cannot train the autoencoder")
    rest = frozenset(data.ids) - training
    o = kmeans_outliers.ids if kmeans_outliers is not None else frozenset()
    return TrainingSelection(training, rest, _overlap(training, o), _share(training, o))


def detect_outliers(model: NetworkModel, x: np.ndarray, ids: Sequence[str]) -> OutlierSet:
    """Instances whose reconstruction error strictly exceeds the training maximum."""
    if model.max_error is None:
        raise ConfigError("model has no training max error; train it first")
    errors = reconstruction_errors(model, x) if len(ids) else np.zeros(0)
    scores = {i: float(e) for i, e in zip(ids, errors) if e > model.max_error}
    return OutlierSet(scores, "autoencoder", {"max_error": model.max_error})


def cross_check(outliers: OutlierSet, kmeans_outliers: OutlierSet,
                selection: TrainingSelection) -> CrossCheckReport:
    a, o, t = outliers.ids, kmeans_outliers.ids, selection.training
    return CrossCheckReport(_overlap(t, o), _share(t, o), _overlap(a, o), _share(a, o))


@dataclass
class AutoencoderRun:
    model: NetworkModel
    selection: TrainingSelection
    outliers: OutlierSet
    errors: dict[str, float]


def run(data: Dataset, scores: np.ndarray, threshold: float, cfg: AutoencoderConfig,
        kmeans_outliers: OutlierSet | None = None) -> AutoencoderRun:
    """Scale ``data`` to [0, 1], train on the selected subset, flag the rest."""
    selection = select_training(data, scores, threshold, kmeans_outliers)
    scaled = scale_to_unit(data).values
    in_t = np.array([i in selection.training for i in data.ids])
    model = train(scaled[in_t], cfg)
    rest_ids = [i for i, k in zip(data.ids, in_t) if not k]
    outliers = detect_outliers(model, scaled[~in_t], rest_ids)
    errors = reconstruction_errors(model, scaled)
    logger.info("autoencoder: |T|=%d |P|=%d |A|=%d max error %.6g",
                len(selection.training), len(selection.rest), len(outliers), model.max_error)
    return AutoencoderRun(model, selection, outliers, dict(zip(data.ids, map(float, errors))))
