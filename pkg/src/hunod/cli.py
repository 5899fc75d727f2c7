"""Command-line entry point: ``hunod <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from hunod import autoencoder as ae
from hunod import kmeans, pipeline, surrogate, synth
from hunod.errors import ConfigError, DataError, HunodError
from hunod.features import (
    FeatureConfig,
    read_declarations,
    read_features,
    scoring_indicators,
    write_feature_files,
)

logger = logging.getLogger("hunod")


def _seed(value: int) -> int:
    env = os.environ.get(pipeline.SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{pipeline.SEED_ENV} must be an integer, got {env!r}") from None
    return value


def _scores(data, column: str):
    if column == "auto":
        return scoring_indicators(data, "fball")
    if column in data.schema.names:
        return data.column(column)
    return scoring_indicators(data, column)


def cmd_gen(args) -> None:
    plan = synth.load_plan(args.plan) if args.plan else synth.DEFAULT_PLAN
    cfg = synth.GeneratorConfig(seed=_seed(args.seed), n_entities=args.entities,
                                window_start=args.window_start, anomaly_plan=plan)
    declarations, truth = synth.generate(cfg)
    out, truth_path = synth.write_outputs(declarations, truth, args.out, args.truth)
    print(f"wrote {len(declarations)} declarations to {out} and {len(truth)} planted entities to {truth_path}")


def cmd_features(args) -> None:
    cfg = FeatureConfig(window_start=args.window_start, average_salary=args.average_salary,
                        employee_cutoff=args.employee_cutoff)
    files = write_feature_files(read_declarations(args.declarations), args.out_dir, cfg)
    print(f"{len(files.full)} entities, {files.full.d} features: "
          f"{len(files.l10)} below and {len(files.a10)} at or above {args.employee_cutoff} employees")


def cmd_kmeans(args) -> None:
    data = read_features(args.features)
    w = None if args.unweighted else kmeans.load_ponders(args.ponders, data.schema)
    cfg = kmeans.KMeansConfig(k=args.k, small_pct=args.small_pct, max_outliers_pct=args.max_outliers_pct,
                              n_init=args.n_init, max_iters=args.max_iters, seed=_seed(args.seed))
    found = kmeans.detect(data, w, cfg)
    found.save(args.out)
    print(f"{len(found)} k-means outliers written to {args.out}")


def cmd_ae(args) -> None:
    if args.report and not args.kmeans:
        raise ConfigError("--report needs --kmeans")
    data = read_features(args.features)
    cfg = ae.AutoencoderConfig(layout=args.layers, keep_prob=args.alpha, activity_reg=args.lam,
                               activity_layers=args.activity_layers, epochs=args.epochs,
                               batch_size=args.batch, learning_rate=args.lr, seed=_seed(args.seed))
    ref = kmeans.OutlierSet.load(args.kmeans) if args.kmeans else None
    result = ae.run(data, _scores(data, args.score_col), args.threshold, cfg, ref)
    result.outliers.save(args.out)
    if args.model:
        result.model.save(args.model)
    if args.report:
        doc = ae.cross_check(result.outliers, ref, result.selection).to_json()
        doc.update(n_training=len(result.selection.training), n_rest=len(result.selection.rest),
                   n_outliers=len(result.outliers), max_error=result.model.max_error)
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{len(result.outliers)} autoencoder outliers written to {args.out}")


def cmd_surrogate(args) -> None:
    data = read_features(args.features)
    result = surrogate.fit(data, kmeans.OutlierSet.load(args.ae_outliers), args.measure)
    result.tree.save(args.out)
    if args.importance:
        with open(args.importance, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["feature", "importance"])
            writer.writerows((f, repr(v)) for f, v in result.importance.items())
    if args.explanations:
        with open(args.explanations, "w") as fh:
            for row in result.explanations():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"tree with {result.tree.node_count} nodes, training accuracy {result.training_accuracy:.6f}")


def cmd_run(args) -> None:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig.parse("")
    report = pipeline.run(cfg, args.out_dir)
    out = Path(args.out_dir or cfg.out_dir)
    print(f"report with {len(report.entities)} flagged entities written to {out / 'report.json'}")


def cmd_agreement(args) -> None:
    sets = [kmeans.OutlierSet.load(p) for p in args.sets]
    matrix = pipeline.agreement_matrix(sets)
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.sets]
    if len(labels) != len(sets):
        raise ConfigError(f"{len(labels)} labels for {len(sets)} outlier sets")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow([""] + labels)
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [repr(float(v)) for v in row])
    finally:
        if args.out:
            out.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hunod", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic declarations and ground truth")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--entities", type=int, default=5000)
    p.add_argument("--plan", help="JSON anomaly plan (default: built-in plan)")
    p.add_argument("--window-start", default="2016-03")
    p.add_argument("--out", required=True, help="declarations CSV")
    p.add_argument("--truth", help="ground truth CSV (default: ground_truth.csv beside --out)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("features", help="aggregate declarations into entity features and split by size")
    p.add_argument("--declarations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--window-start", default="2016-03")
    p.add_argument("--average-salary", type=float, default=1000.0)
    p.add_argument("--employee-cutoff", type=int, default=10)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("kmeans", help="ponder-weighted k-means outlier detection")
    p.add_argument("--features", required=True)
    p.add_argument("--ponders", help="JSON feature/family weights (default: built-in map)")
    p.add_argument("--unweighted", action="store_true", help="cluster without ponders")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--small-pct", type=float, default=5.0)
    p.add_argument("--max-outliers-pct", type=float, default=5.0)
    p.add_argument("--n-init", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("ae", help="train the autoencoder on low-risk entities and flag the rest")
    p.add_argument("--features", required=True)
    p.add_argument("--score-col", default="auto", help="'auto' (mean fball), a column, or a feature family")
    p.add_argument("--threshold", type=float, default=0.30)
    p.add_argument("--layers", default="d/2,d/4,d/2")
    p.add_argument("--alpha", type=float, default=0.8, help="dropout keep probability")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="activity regularization")
    p.add_argument("--activity-layers", default="hidden", choices=("hidden", "hidden+output"))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kmeans", help="k-means outliers excluded from training and used for the cross-check")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="cross-check JSON (needs --kmeans)")
    p.add_argument("--model", help="save the trained network (.npz)")
    p.set_defaults(func=cmd_ae)

    p = sub.add_parser("surrogate", help="fit a decision tree replicating the autoencoder labels")
    p.add_argument("--features", required=True)
    p.add_argument("--ae-outliers", required=True)
    p.add_argument("--measure", default="gini", choices=surrogate.MEASURES)
    p.add_argument("--out", required=True)
    p.add_argument("--importance", help="feature importance CSV")
    p.add_argument("--explanations", help="per-entity explanation paths (JSON lines)")
    p.set_defaults(func=cmd_surrogate)

    p = sub.add_parser("run", help="run the whole pipeline from a key = value config file")
    p.add_argument("--config", help="config file (default: all defaults)")
    p.add_argument("--out-dir", help="overrides out_dir from the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("agreement", help="pairwise Jaccard matrix of outlier sets")
    p.add_argument("sets", nargs="+", help="outlier JSON files")
    p.add_argument("--labels", help="comma-separated row/column labels")
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_agreement)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except HunodError as exc:
        print(f"hunod {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"hunod {args.command}: DataError: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
