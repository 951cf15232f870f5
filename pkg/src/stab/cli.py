"""Command-line entry points: train, eval, predict, ablate (plus ``synth`` for toy CSVs).

Every failure prints one line ``stab-error: <kind>: <message>`` on stderr
and exits with status 2.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import (
    SYNTHETIC_KINDS,
    Dataset,
    DatasetSchema,
    EvalReport,
    Preprocessor,
    evaluate,
    fit_preprocessor,
    load_csv,
    load_schema,
    make_synthetic,
    write_csv,
)
from .errors import ConfigError, StabError
from .model import VARIANTS, ModelConfig, StabModel, count_parameters, predict_bayesian, variant_config
from .training import train


def load_dataset(exp: ExperimentConfig) -> Dataset:
    d = exp.data
    if d.synthetic:
        spec = dict(d.synthetic)
        unknown = sorted(set(spec) - {"kind", "n_rows", "seed"})
        if unknown or "kind" not in spec:
            raise ConfigError(f"data.synthetic needs 'kind' (and optional n_rows, seed); unknown: {unknown}")
        return make_synthetic(spec["kind"], int(spec.get("n_rows", 2000)), int(spec.get("seed", d.split_seed)))
    if not d.path or not d.schema:
        raise ConfigError("data.path and data.schema are required unless data.synthetic is set")
    return load_csv(d.path, load_schema(d.schema), split_seed=d.split_seed)


def resolved_model_config(exp: ExperimentConfig, schema: DatasetSchema, prep: Preprocessor) -> ModelConfig:
    task_fields = {"task": schema.task}
    if schema.task == "classification":
        task_fields["n_classes"] = max(prep.n_classes, 2)
    return variant_config(exp.variant, replace(exp.model, **task_fields)).validate()


def run_training(exp: ExperimentConfig, progress=None):
    """Load data, fit preprocessing, build and train the configured variant."""
    ds = load_dataset(exp)
    train_ds = ds.subset("train")
    prep = fit_preprocessor(train_ds, exp.data.scale_numeric, exp.data.label_scale)
    mcfg = resolved_model_config(exp, ds.schema, prep)
    model = StabModel(mcfg, len(ds.schema.numeric), prep.cardinalities)
    val = ds.subset("val")
    model, history = train(model, prep.apply(train_ds), prep.apply(val) if len(val) else None, exp.train, progress, prep)
    return ds, prep, model, history


def checkpoint_metadata(exp: ExperimentConfig, schema: DatasetSchema, prep: Preprocessor, model: StabModel, history) -> dict:
    cfg = exp.to_dict()
    cfg["model"] = {k: v for k, v in vars(model.config).items()}
    return {
        "config": cfg,
        "schema": schema.to_dict(),
        "preprocessor": prep.to_dict(),
        "seed": exp.seed,
        "epoch": history.best_epoch,
        "metric": history.metric,
        "best_metric": history.best_metric,
    }


def restore(path: str | Path) -> tuple[dict, ExperimentConfig, DatasetSchema, Preprocessor, StabModel]:
    meta, params = load_checkpoint(path)
    exp = ExperimentConfig.from_dict(meta["config"])
    schema = DatasetSchema.from_dict(meta["schema"])
    prep = Preprocessor.from_dict(meta["preprocessor"])
    model = StabModel(ModelConfig(**meta["config"]["model"]), len(schema.numeric), prep.cardinalities)
    model.load_state_dict(dict(params))
    return meta, exp, schema, prep, model


def cmd_train(config: str, overrides: Sequence[str] = (), out=None) -> int:
    out = out or sys.stdout
    exp = load_config(config, overrides)
    ds, prep, model, history = run_training(exp, progress=out)
    ckpt = Path(exp.output.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, checkpoint_metadata(exp, ds.schema, prep, model, history), list(model.state_dict().items()))
    hist = Path(exp.output.history)
    hist.parent.mkdir(parents=True, exist_ok=True)
    hist.write_text(history.to_jsonl(), encoding="utf-8")
    summary = {
        "event": "done",
        "checkpoint": str(ckpt),
        "history": str(hist),
        "epochs": len(history.records),
        "best_epoch": history.best_epoch,
        history.metric: history.best_metric,
    }
    out.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def evaluate_split(model: StabModel, prep: Preprocessor, ds: Dataset, N: int | None, seed: int) -> EvalReport:
    enc = prep.apply(ds)
    avg = predict_bayesian(model, enc.x_num, enc.x_cat, N, seed)
    if model.config.task == "classification":
        return evaluate(avg.argmax(axis=-1), enc.y, "classification")
    return evaluate(avg, enc.y, "regression", prep)


def cmd_eval(
    checkpoint: str,
    data: str | None = None,
    split: str = "test",
    N: int | None = None,
    seed: int = 0,
    out=None,
) -> int:
    out = out or sys.stdout
    _, exp, schema, prep, model = restore(checkpoint)
    if data is not None:
        ds = load_csv(data, schema, split_seed=exp.data.split_seed)
    else:
        ds = load_dataset(exp)
    if split != "all":
        ds = ds.subset(split)
    N = model.config.N_infer if N is None else N
    report = evaluate_split(model, prep, ds, N, seed)
    out.write(json.dumps({**report.to_dict(), "N": N, "seed": seed, "split": split}, sort_keys=True) + "\n")
    return 0


def cmd_predict(checkpoint: str, input_csv: str, output: str | None = None, N: int | None = None, seed: int = 0, out=None) -> int:
    out = out or sys.stdout
    _, _, schema, prep, model = restore(checkpoint)
    ds = load_csv(input_csv, schema, require_target=False)
    enc = prep.apply(ds)
    avg = predict_bayesian(model, enc.x_num, enc.x_cat, N, seed)
    if model.config.task == "classification":
        preds = [str(v) for v in prep.inverse_labels(avg.argmax(axis=-1))]
    else:
        preds = [repr(float(v)) for v in prep.inverse_labels(avg)]
    fh = open(output, "w", newline="", encoding="utf-8") if output else out
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prediction"])
        w.writerows([p] for p in preds)
    finally:
        if output:
            fh.close()
    return 0


def run_ablation(exp: ExperimentConfig, split: str = "test") -> list[dict]:
    """Train every variant with the same seed, data and budget; one result row per variant."""
    rows = []
    for variant in VARIANTS:
        run = copy.deepcopy(exp)
        run.variant = variant
        try:
            ds, prep, model, history = run_training(run)
            report = evaluate_split(model, prep, ds.subset(split), None, run.seed)
            counts = count_parameters(model)
            rows.append(
                {
                    "variant": variant,
                    "metric": report.metric,
                    "value": report.value,
                    "params": counts["total"],
                    "parallel_params": counts["parallel"],
                    "overhead_pct": 100.0 * counts["hybrid_overhead"],
                    "epochs": len(history.records),
                    "error": None,
                }
            )
        except StabError as exc:
            rows.append({"variant": variant, "error": f"{exc.kind}: {exc}"})
    return rows


def format_table(rows: list[dict]) -> str:
    header = f"{'variant':<11} {'metric':<8} {'value':>10} {'params':>9} {'overhead%':>10} {'epochs':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        if r.get("error"):
            lines.append(f"{r['variant']:<11} FAILED {r['error']}")
        else:
            lines.append(
                f"{r['variant']:<11} {r['metric']:<8} {r['value']:>10.4f} {r['params']:>9d} "
                f"{r['overhead_pct']:>10.2f} {r['epochs']:>7d}"
            )
    return "\n".join(lines)


def cmd_ablate(config: str, overrides: Sequence[str] = (), out=None) -> int:
    out = out or sys.stdout
    exp = load_config(config, overrides)
    rows = run_ablation(exp)
    out.write(format_table(rows) + "\n")
    return 1 if any(r.get("error") for r in rows) else 0


def cmd_synth(kind: str, n_rows: int, seed: int, output: str, schema_out: str | None, out=None) -> int:
    out = out or sys.stdout
    ds = make_synthetic(kind, n_rows, seed)
    ds.schema.split_column = "split"
    write_csv(output, ds)
    if schema_out:
        Path(schema_out).write_text(yaml.safe_dump(ds.schema.to_dict(), sort_keys=False), encoding="utf-8")
    out.write(json.dumps({"rows": len(ds), "csv": output, "schema": schema_out}) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stab", description="Stochastic-competition transformer for tabular data")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one variant; extra --section.key=value args override the config")
    t.add_argument("config")

    e = sub.add_parser("eval", help="Bayesian-averaged evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="CSV to evaluate (default: the training data source)")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--N", type=int, default=None, help="number of stochastic passes (default: N_infer)")
    e.add_argument("--seed", type=int, default=0)

    pr = sub.add_parser("predict", help="write predictions for a CSV without targets")
    pr.add_argument("checkpoint")
    pr.add_argument("input")
    pr.add_argument("--output", "-o")
    pr.add_argument("--N", type=int, default=None)
    pr.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train vanilla/stochastic/hybrid/full and compare")
    a.add_argument("config")

    s = sub.add_parser("synth", help="write a synthetic toy dataset as CSV")
    s.add_argument("kind", choices=SYNTHETIC_KINDS)
    s.add_argument("--rows", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--schema-out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra and args.command not in ("train", "ablate"):
            raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "train":
            return cmd_train(args.config, extra)
        if args.command == "ablate":
            return cmd_ablate(args.config, extra)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, args.split, args.N, args.seed)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.input, args.output, args.N, args.seed)
        return cmd_synth(args.kind, args.rows, args.seed, args.output, args.schema_out)
    except StabError as exc:
        _fail(exc.kind, str(exc))
    except (OSError, yaml.YAMLError) as exc:
        _fail("io", str(exc))
    except (KeyError, TypeError) as exc:
        _fail("config", f"{type(exc).__name__}: {exc}")
    return 2


def _fail(kind: str, message: str) -> None:
    print(f"stab-error: {kind}: {' '.join(message.split())}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
