"""End-to-end run: declarations, features, both detectors, cross-checks, surrogate.

The run is configured by a flat ``key = value`` text file (see
:class:`PipelineConfig`) and produces one JSON risk report plus a CSV of
flagged entities. Every stochastic stage is seeded from the single ``seed``
key, which the ``HUNOD_SEED`` environment variable overrides, so two runs
with the same configuration write byte-identical reports.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from hunod import autoencoder as ae
from hunod import kmeans, surrogate, synth
from hunod.data import Dataset
from hunod.errors import ConfigError, HunodError
from hunod.features import (
    FeatureConfig,
    build_feature_table,
    read_declarations,
    read_features,
    scoring_indicators,
    split_by_employees,
    to_dataset,
)

logger = logging.getLogger(__name__)

REPORT_FORMAT = "hunod.report/1"
SEED_ENV = "HUNOD_SEED"
SUBSETS = ("L10", "A10")


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    """|A & B| / |A | B|; two empty sets agree perfectly (1.0)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def agreement_matrix(sets: Sequence[Iterable[str]]) -> np.ndarray:
    """Pairwise Jaccard coefficients; symmetric with a unit diagonal."""
    sets = [frozenset(s.ids if isinstance(s, kmeans.OutlierSet) else s) for s in sets]
    if len(sets) < 2:
        raise ConfigError("an agreement matrix needs at least two outlier sets")
    n = len(sets)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = jaccard(sets[i], sets[j])
    return out


# -- configuration --------------------------------------------------------------


def _tuple(kind):
    def parse(text: str):
        return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every key of the flat configuration file, with its default."""

    out_dir: str = "hunod_out"
    # input: a feature table, else a declarations CSV, else generated data
    features: str = ""
    declarations: str = ""
    plan: str = ""
    n_entities: int = 5000
    window_start: str = "2016-03"
    average_salary: float = 1000.0
    seed: int = 42
    employee_cutoff: int = 10
    ponders: str = ""
    k_grid: tuple[int, ...] = (10, 15, 20, 25, 30)
    reference_k: int = 10
    small_pct: float = 5.0
    max_outliers_pct_l10: float = 1.0
    max_outliers_pct_a10: float = 5.0
    n_init: int = 10
    max_iters: int = 300
    score_indicator: str = "fball"
    score_threshold: float = 0.30
    ae_layers: str = "d/2,d/4,d/2"
    keep_prob: float = 0.8
    activity_reg: float = 0.1
    activity_layers: str = "hidden"
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    # extra autoencoder runs compared by Jaccard: "", "regularization" or "layouts"
    ae_variants: str = ""
    tree_measure: str = "gini"
    write_intermediate: bool = True

    def __post_init__(self):
        if not self.k_grid:
            raise ConfigError("k_grid must list at least one K")
        if self.reference_k not in self.k_grid:
            raise ConfigError(f"reference_k={self.reference_k} is not in k_grid {self.k_grid}")
        if self.ae_variants not in ("", "regularization", "layouts"):
            raise ConfigError(f"unknown ae_variants {self.ae_variants!r}")
        if self.tree_measure not in surrogate.MEASURES:
            raise ConfigError(f"unknown tree_measure {self.tree_measure!r}")
        # fail early on malformed nested settings
        self.autoencoder()
        self.kmeans(self.reference_k, "L10")

    @classmethod
    def parse(cls, text: str, env: dict | None = None) -> "PipelineConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        converters = {
            "int": int, "float": float, "str": str, "bool": _bool,
            "tuple[int, ...]": _tuple(int),
        }
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = converters[types[key]](value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                values["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, env: dict | None = None) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = Path(path).parent
        cfg = cls.parse(text, env)
        # relative paths are taken relative to the config file
        fixes = {k: str(base / v) for k in ("out_dir", "features", "declarations", "plan", "ponders")
                 if (v := getattr(cfg, k)) and not Path(v).is_absolute()}
        return dataclasses.replace(cfg, **fixes)

    def check_files(self) -> None:
        """Raise ConfigError when a referenced input file does not exist."""
        for key in ("features", "declarations", "plan", "ponders"):
            path = getattr(self, key)
            if path and not Path(path).is_file():
                raise ConfigError(f"{key} file not found: {path}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def kmeans(self, k: int, subset: str) -> kmeans.KMeansConfig:
        pct = self.max_outliers_pct_l10 if subset == "L10" else self.max_outliers_pct_a10
        return kmeans.KMeansConfig(k=k, small_pct=self.small_pct, max_outliers_pct=pct,
                                   n_init=self.n_init, max_iters=self.max_iters, seed=self.seed)

    def autoencoder(self, **overrides) -> ae.AutoencoderConfig:
        params = dict(layout=self.ae_layers, keep_prob=self.keep_prob, activity_reg=self.activity_reg,
                      activity_layers=self.activity_layers, epochs=self.epochs,
                      batch_size=self.batch_size, learning_rate=self.learning_rate, seed=self.seed)
        params.update(overrides)
        return ae.AutoencoderConfig(**params)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(window_start=self.window_start, average_salary=self.average_salary,
                             employee_cutoff=self.employee_cutoff)

    def generator(self) -> synth.GeneratorConfig:
        plan = synth.load_plan(self.plan) if self.plan else synth.DEFAULT_PLAN
        return synth.GeneratorConfig(seed=self.seed, n_entities=self.n_entities,
                                     window_start=self.window_start,
                                     average_salary=self.average_salary, anomaly_plan=plan)


# -- results --------------------------------------------------------------------


@dataclass
class SubsetResult:
    name: str
    data: Dataset
    scores: np.ndarray
    kmeans_sets: dict[int, kmeans.OutlierSet]
    autoencoder: ae.AutoencoderRun | None = None
    cross_checks: dict[int, ae.CrossCheckReport] = field(default_factory=dict)
    surrogate: surrogate.SurrogateResult | None = None
    variants: dict[str, kmeans.OutlierSet] = field(default_factory=dict)
    skipped: str = ""


@dataclass
class RiskReport:
    document: dict
    entities: list[dict]
    subsets: dict[str, SubsetResult]
    truth: pd.DataFrame | None = None

    def to_json(self) -> str:
        return json.dumps(self.document, indent=1, sort_keys=True, allow_nan=False) + "\n"

    def flagged_csv(self) -> str:
        buf = io.StringIO()
        cols = ["tin", "subset", "kmeans_flag", "kmeans_score", "kmeans_votes", "ae_flag",
                "reconstruction_error", "planted", "explanation"]
        writer = csv.DictWriter(buf, cols, lineterminator="\n")
        writer.writeheader()
        for e in self.entities:
            row = {c: e.get(c) for c in cols}
            row["explanation"] = " AND ".join(e["explanation"])
            row["kmeans_score"] = "" if e["kmeans_score"] is None else repr(e["kmeans_score"])
            row["reconstruction_error"] = repr(e["reconstruction_error"])
            row["planted"] = e.get("planted") or ""
            writer.writerow(row)
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report, flagged = out / "report.json", out / "flagged.csv"
        report.write_text(self.to_json())
        flagged.write_text(self.flagged_csv())
        return report, flagged


@contextmanager
def _stage(name: str):
    start = time.perf_counter()
    logger.info("stage %s: start", name)
    try:
        yield
    except HunodError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    logger.info("stage %s: done in %.2fs", name, time.perf_counter() - start)


def _matrix_doc(labels: Sequence, sets: Sequence[kmeans.OutlierSet]) -> dict:
    labels = [str(v) for v in labels]
    if len(sets) < 2:
        return {"labels": labels, "matrix": [[1.0]] if sets else []}
    return {"labels": labels, "matrix": agreement_matrix(sets).tolist()}


def _variants(cfg: PipelineConfig) -> dict[str, dict]:
    if cfg.ae_variants == "regularization":
        return {f"alpha={a},lambda={l}": dict(keep_prob=a, activity_reg=l) for a, l in ae.REGULARIZATION_GRID}
    if cfg.ae_variants == "layouts":
        return {f"layers={n}": dict(layout=ae.LAYOUT_PRESETS[n]) for n in sorted(ae.LAYOUT_PRESETS)}
    return {}


def load_inputs(cfg: PipelineConfig, out_dir: Path | None = None):
    """(full dataset, ground truth or None) from features, declarations or the generator."""
    truth = None
    if cfg.features:
        with _stage("features"):
            return read_features(cfg.features), None
    if cfg.declarations:
        with _stage("read declarations"):
            declarations = read_declarations(cfg.declarations)
    else:
        with _stage("generate"):
            gen = cfg.generator()
            logger.info("generator seed %d, %d entities", gen.seed, gen.n_entities)
            declarations, truth = synth.generate(gen)
            if out_dir is not None and cfg.write_intermediate:
                synth.write_outputs(declarations, truth, out_dir / "declarations.csv")
    with _stage("features"):
        full = to_dataset(build_feature_table(declarations, cfg.feature_config()))
    return full, truth


def run_subset(name: str, data: Dataset, cfg: PipelineConfig, ponders_path: str | None = None,
               out_dir: Path | None = None) -> SubsetResult:
    """K-means grid, autoencoder, cross-checks and surrogate on one subset."""
    scores = scoring_indicators(data, cfg.score_indicator)
    result = SubsetResult(name, data, scores, {})
    if len(data) <= max(cfg.k_grid):
        result.skipped = f"{len(data)} instances, too few for K={max(cfg.k_grid)}"
        logger.warning("subset %s skipped: %s", name, result.skipped)
        return result
    w = kmeans.load_ponders(ponders_path, data.schema)
    for k in cfg.k_grid:
        with _stage(f"{name} kmeans K={k}"):
            logger.info("kmeans seed %d", cfg.seed)
            result.kmeans_sets[k] = kmeans.detect(data, w, cfg.kmeans(k, name))
    reference = result.kmeans_sets[cfg.reference_k]
    with _stage(f"{name} autoencoder"):
        logger.info("autoencoder seed %d", cfg.seed)
        run = ae.run(data, scores, cfg.score_threshold, cfg.autoencoder(), reference)
        result.autoencoder = run
        for k, o in result.kmeans_sets.items():
            result.cross_checks[k] = ae.cross_check(run.outliers, o, run.selection)
    for label, overrides in _variants(cfg).items():
        with _stage(f"{name} autoencoder {label}"):
            result.variants[label] = ae.run(data, scores, cfg.score_threshold,
                                            cfg.autoencoder(**overrides), reference).outliers
    with _stage(f"{name} surrogate"):
        result.surrogate = surrogate.fit(data, run.outliers, cfg.tree_measure)
    if out_dir is not None and cfg.write_intermediate:
        sub = name.lower()
        data.to_csv(out_dir / f"features_{sub}.csv")
        for k, o in result.kmeans_sets.items():
            o.save(out_dir / f"outliers_kmeans_{sub}_k{k}.json")
        run.outliers.save(out_dir / f"outliers_ae_{sub}.json")
        run.model.save(out_dir / f"model_{sub}.npz")
        result.surrogate.tree.save(out_dir / f"tree_{sub}.json")
    return result


def _subset_doc(res: SubsetResult, cfg: PipelineConfig) -> dict:
    doc = {"n_instances": len(res.data)}
    if res.skipped:
        doc["skipped"] = res.skipped
        return doc
    run, sur = res.autoencoder, res.surrogate
    grid = sorted(res.kmeans_sets)
    doc.update(
        kmeans={str(k): {"n_outliers": len(o), "small_threshold": o.meta.get("small_threshold"),
                         "max_outliers": o.meta.get("max_outliers")} for k, o in res.kmeans_sets.items()},
        kmeans_agreement=_matrix_doc(grid, [res.kmeans_sets[k] for k in grid]),
        training={"threshold": cfg.score_threshold, "indicator": cfg.score_indicator,
                  "n_training": len(run.selection.training), "n_rest": len(run.selection.rest)},
        autoencoder={"max_error": run.model.max_error, "n_outliers": len(run.outliers),
                     "layout": run.model.hidden_widths, "final_loss": run.model.loss_history[-1]
                     if run.model.loss_history else None},
        cross_check={str(k): c.to_json() for k, c in res.cross_checks.items()},
        surrogate={"training_accuracy": sur.training_accuracy, "nodes": sur.tree.node_count,
                   "depth": sur.tree.depth, "contradictory_duplicates": sur.contradictions,
                   "top_importance": [[f, v] for f, v in list(sur.importance.items())[:10]]},
    )
    if res.variants:
        labels = sorted(res.variants)
        ref = res.kmeans_sets[cfg.reference_k]
        doc["autoencoder_variants"] = {
            "agreement": _matrix_doc(labels, [res.variants[v] for v in labels]),
            "outlier_share": {v: ae.cross_check(res.variants[v], ref, run.selection).outlier_share
                              for v in labels},
            "n_outliers": {v: len(res.variants[v]) for v in labels},
        }
    return doc


def _entities(res: SubsetResult, cfg: PipelineConfig, truth: dict[str, str]) -> list[dict]:
    if res.skipped:
        return []
    run, sur = res.autoencoder, res.surrogate
    ref = res.kmeans_sets[cfg.reference_k]
    flagged = set(run.outliers.ids).union(*(o.ids for o in res.kmeans_sets.values()))
    rows = []
    pos = {tin: i for i, tin in enumerate(res.data.ids)}
    for tin in sorted(flagged):
        exp = surrogate.classify(sur.tree, res.data.values[pos[tin]])
        rows.append({
            "tin": tin,
            "subset": res.name,
            "kmeans_flag": tin in ref,
            "kmeans_score": ref.scores.get(tin),
            "kmeans_votes": sum(tin in o for o in res.kmeans_sets.values()),
            "ae_flag": tin in run.outliers,
            "reconstruction_error": run.errors[tin],
            "in_training": tin in run.selection.training,
            "planted": truth.get(tin),
            "explanation": list(exp.path),
            "surrogate_class": exp.label,
        })
    return rows


def run(cfg: PipelineConfig, out_dir: str | Path | None = None) -> RiskReport:
    """Execute every stage and return the risk report (also written when ``out_dir``)."""
    cfg.check_files()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full, truth = load_inputs(cfg, out)
    with _stage("split"):
        l10, a10 = split_by_employees(full, cfg.employee_cutoff)
        logger.info("L10: %d entities, A10: %d entities", len(l10), len(a10))
        if cfg.write_intermediate:
            full.to_csv(out / "features.csv")
    kinds = dict(zip(truth["tin"], truth["kind"])) if truth is not None else {}
    subsets = {}
    for name, data in zip(SUBSETS, (l10, a10)):
        subsets[name] = run_subset(name, data, cfg, cfg.ponders or None, out)
    entities = [e for name in SUBSETS for e in _entities(subsets[name], cfg, kinds)]
    config = cfg.to_dict()
    config.pop("out_dir")
    document = {
        "format": REPORT_FORMAT,
        "config": config,
        "n_entities": len(full),
        "n_features": full.d,
        "subsets": {name: _subset_doc(subsets[name], cfg) for name in SUBSETS},
        "entities": entities,
    }
    report = RiskReport(document, entities, subsets, truth)
    report.write(out)
    logger.info("report written to %s", out / "report.json")
    return report
