"""Command-line interface for the experiment pipeline.

Subcommands: fit-scene-model, cem, build-source, build-target, train-sweep,
fig1, evaluate. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as exp
from . import features as features_mod
from . import metrics as metrics_mod
from . import predictor as predictor_mod
from . import risk_estimator as risk_mod
from . import scene_model as scene_mod
from .importance_sampler import check_support, run_cem
from .validation import DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="YAML experiment configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="override the master seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for scene evaluation")


def build_parser():
    parser = _Parser(prog="highway-risk",
                     description="High-risk scene generation and collision-risk "
                                 "prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-scene-model", parents=[], help="fit the scene "
                       "network from a vehicle-records file")
    _add_common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cem", help="learn the collision-seeking proposal")
    _add_common(p)
    p.add_argument("--scene-model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--history", type=Path, required=True)

    p = sub.add_parser("build-source", help="build the weighted source dataset")
    _add_common(p)
    p.add_argument("--scene-model", type=Path, required=True)
    p.add_argument("--proposal", type=Path, default=None)
    p.add_argument("--num-scenes", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("build-target", help="generate the artificial target "
                       "domain datasets and records")
    _add_common(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--labels", choices=("risk", "low-ttc"), default="risk")

    p = sub.add_parser("train-sweep", help="train the predictor variants "
                       "across target positive-risk counts")
    _add_common(p)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target-train", type=Path, required=True)
    p.add_argument("--target-val", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--summary", type=Path, default=None)

    p = sub.add_parser("fig1", help="behavioral-correlation ratio by horizon")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--horizons", type=str, required=True,
                   help="comma-separated horizons in seconds")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="score a trained model on a dataset")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--predictions", type=Path, default=None)
    return parser


def cmd_fit_scene_model(args, config):
    records, _ = scene_mod.read_records(args.records)
    bn = exp.fit_scene_model(config, records)
    payload = bn.to_json_dict()
    payload["provenance"] = exp.provenance(config, n_records=len(records))
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"fit scene model on {len(records)} records -> {args.out}")


def cmd_cem(args, config):
    bn = scene_mod.SceneBayesNet.load(args.scene_model)
    proposal, history = run_cem(bn, config.cem, config.master_seed)
    payload = proposal.to_json_dict()
    payload["provenance"] = exp.provenance(config)
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    history.to_csv(args.history)
    probs = history.collision_probs()
    first = probs[0] if probs else float("nan")
    last = probs[-1] if probs else float("nan")
    print(f"proposal after {len(probs)} iterations: collision probability "
          f"{first:.5f} -> {last:.5f}")


def cmd_build_source(args, config):
    bn = scene_mod.SceneBayesNet.load(args.scene_model)
    proposal = None
    if args.proposal is not None:
        proposal = scene_mod.SceneBayesNet.load(args.proposal)
        check_support(bn, proposal)
    if args.num_scenes is not None:
        config = replace(config,
                         source=replace(config.source,
                                        num_scenes=args.num_scenes))
    samples = exp.build_source_data(config, bn, proposal, args.out,
                                    threads=args.threads)
    rate = float(np.mean([s.w * s.y for s in samples]))
    print(f"wrote {len(samples)} source samples -> {args.out} "
          f"(weighted collision rate {rate:.6f})")


def cmd_build_target(args, config):
    train, val, records = exp.build_target_data(
        config, args.out_dir, threads=args.threads, label_mode=args.labels)
    positives = sum(1 for s in train if s.y > 0)
    print(f"wrote {len(train)} train / {len(val)} validation samples and "
          f"{len(records)} records -> {args.out_dir} "
          f"({positives} positive-risk train samples)")


def cmd_train_sweep(args, config):
    source, _ = risk_mod.read_dataset(args.source)
    target_train, _ = risk_mod.read_dataset(args.target_train)
    validation, _ = risk_mod.read_dataset(args.target_val)
    results, summary = exp.train_sweep(config, source, target_train, validation,
                                       threads=args.threads)
    head = exp.provenance(config)
    exp.write_csv(args.out,
                  ["method", "positive_count", "seed", "nll_all",
                   "nll_positive", "ap", "best_epoch"],
                  [[r["method"], r["positive_count"], r["seed"], r["nll_all"],
                    r["nll_positive"], r["ap"], r["best_epoch"]]
                   for r in results], header=head)
    summary_path = args.summary or args.out.with_name(
        args.out.stem + "_summary.csv")
    exp.write_csv(summary_path,
                  ["method", "positive_count", "metric", "mean", "stderr", "n"],
                  [[r["method"], r["positive_count"], r["metric"], r["mean"],
                    r["stderr"], r["n"]] for r in summary], header=head)
    print(f"wrote {len(results)} sweep rows -> {args.out}")


def cmd_fig1(args, config):
    horizons = [float(h) for h in args.horizons.split(",") if h.strip()]
    if not horizons:
        raise UsageError("at least one horizon is required")
    samples, header = risk_mod.read_dataset(args.dataset)
    schema = features_mod.FeatureSchema.load(str(args.dataset) + ".schema.json")
    curve = exp.horizon_correlation_table(samples, horizons, schema,
                                          dt=config.sim.dt)
    exp.write_csv(args.out, ["horizon_s", "behavioral_ratio"],
                  [[h, "" if r is None else r] for h, r in curve],
                  header=exp.provenance(config, dataset=args.dataset.name))
    shown = ", ".join(f"{h:g}s={'-' if r is None else format(r, '.3f')}"
                      for h, r in curve)
    print(f"correlation ratio by horizon: {shown}")


def cmd_evaluate(args, config):
    samples, _ = risk_mod.read_dataset(args.dataset)
    model = predictor_mod.RiskPredictor.load(args.model)
    schema_path = Path(str(args.dataset) + ".schema.json")
    if schema_path.exists() and getattr(model, "schema_digest_", ""):
        schema = features_mod.FeatureSchema.load(schema_path)
        if schema.digest() != model.schema_digest_:
            raise DataError("model feature schema does not match the dataset")
    x = np.stack([s.x for s in samples])
    y = np.asarray([s.y for s in samples])
    w = np.asarray([s.w for s in samples])
    preds = model.predict_proba(x)
    rows = [["nll_all", metrics_mod.nll(preds, y, w)]]
    if np.any(y > 0):
        rows.append(["nll_positive",
                     metrics_mod.nll(preds, y, w, subset="positive-risk")])
        rows.append(["ap", metrics_mod.average_precision(preds,
                                                         (y > 0).astype(int))])
    exp.write_csv(args.out, ["metric", "value"], rows,
                  header=exp.provenance(config, dataset=args.dataset.name))
    if args.predictions is not None:
        with open(args.predictions, "w") as f:
            for s, p in zip(samples, preds):
                f.write(json.dumps({"scene_id": s.scene_id, "ego_id": s.ego_id,
                                    "label": s.y, "prediction": float(p)}) + "\n")
    for name, value in rows:
        print(f"{name}: {value:.6f}")


_COMMANDS = {
    "fit-scene-model": cmd_fit_scene_model,
    "cem": cmd_cem,
    "build-source": cmd_build_source,
    "build-target": cmd_build_target,
    "train-sweep": cmd_train_sweep,
    "fig1": cmd_fig1,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = exp.load_config(args.config, seed=args.seed)
        _COMMANDS[args.command](args, config)
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
