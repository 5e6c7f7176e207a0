"""Batch command-line front end: generate, train, eval, predict, ablate, and
embed-export. Every command writes a run manifest before any other artifact.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace

from . import __version__
from . import fusion as fusion_mod
from . import metrics as metrics_mod
from . import records as records_mod
from . import synth as synth_mod
from . import trainer as trainer_mod
from .fusion import NumericalError
from .losses import LossConfig
from .records import ValidationError
from .textenc import PrecomputedEmbeddings

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def load_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}: line {line_no} is not key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def resolve(args, file_values: dict[str, str], key: str, default, cast):
    """Precedence: CLI flag > config file > built-in default."""
    cli_value = getattr(args, key.replace("-", "_"), None)
    if cli_value is not None:
        return cli_value
    if key in file_values:
        raw = file_values[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes")
        return cast(raw)
    return default


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, resolved: dict, inputs: list, outputs: list, seed):
    manifest = {
        "command": command,
        "package_version": __version__,
        "resolved_config": resolved,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (CLI flags win)")
    p.add_argument("--seed", type=int, default=None)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["multilabel", "heart-failure"], default=None)
    p.add_argument("--target", choices=["current", "next-visit"], default=None)
    p.add_argument("--hf-index", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--norm", choices=["layer", "batch"], default=None)
    p.add_argument("--activation", choices=["gelu", "relu"], default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--fusion-depth", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--embeddings", default=None, help="precomputed text-embedding CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus (JSONL) and prevalence stats")
    _add_common(g)
    g.add_argument("--n-patients", type=int, default=None)
    g.add_argument("--visits-min", type=int, default=None)
    g.add_argument("--visits-max", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--stats", default=None, help="prevalence CSV (default <out>.stats.csv)")

    t = sub.add_parser("train", help="train on a corpus and write a checkpoint + log")
    _add_common(t)
    _add_model_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--ablation", choices=list(records_mod.ABLATIONS), default=None)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--log", default=None, help="training log CSV (default <checkpoint>.log.csv)")
    t.add_argument("--cohort", default=None, help="cohort report CSV")

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a metric report")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--k", type=int, nargs="+", default=None)
    e.add_argument("--per-label", action="store_true")
    e.add_argument("--subset-accuracy", action="store_true")
    e.add_argument("--embeddings", default=None)
    e.add_argument("--out", required=True, help="CSV report path (a .json twin is written too)")

    pr = sub.add_parser("predict", help="per-visit probability dump")
    _add_common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", choices=["train", "test", "all"], default="test")
    pr.add_argument("--embeddings", default=None)
    pr.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train full/no_text/no_labtext and tabulate")
    _add_common(a)
    _add_model_flags(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="comparison table CSV")
    a.add_argument("--workdir", default=None, help="directory for per-run checkpoints")

    x = sub.add_parser("embed-export", help="fused hidden representations per sample")
    _add_common(x)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", choices=["train", "test", "all"], default="test")
    x.add_argument("--embeddings", default=None)
    x.add_argument("--out", required=True)
    return parser


def _resolved_train_configs(args, fv):
    task = resolve(args, fv, "task", "multilabel", str).replace("-", "_")
    data_cfg = trainer_mod.DataConfig(
        task=task,
        target=resolve(args, fv, "target", records_mod.TARGET_CURRENT, str),
        hf_index=resolve(args, fv, "hf-index", records_mod.DEFAULT_HF_INDEX, int),
        train_fraction=resolve(args, fv, "train-fraction", 0.8, float),
    )
    loss_cfg = LossConfig(alpha=resolve(args, fv, "alpha", 0.95, float))
    train_cfg = trainer_mod.TrainConfig(
        learning_rate=resolve(args, fv, "lr", 1e-4, float),
        epochs=resolve(args, fv, "epochs", 10, int),
        batch_size=resolve(args, fv, "batch-size", 8, int),
        seed=resolve(args, fv, "seed", 0, int),
        ablation=resolve(args, fv, "ablation", records_mod.ABLATION_FULL, str),
        optimizer=resolve(args, fv, "optimizer", trainer_mod.OPTIMIZER_ADAM, str),
        loss=loss_cfg,
    )
    return data_cfg, train_cfg, data_cfg.train_fraction


def _model_cfg_for(args, fv, n_labels):
    from .model import ModelConfig
    from .textenc import TextEncoderConfig
    from .tst import TSTConfig

    tst_cfg = TSTConfig(
        norm=resolve(args, fv, "norm", "layer", str),
        activation=resolve(args, fv, "activation", "gelu", str),
    )
    return ModelConfig(
        n_labels=n_labels,
        text=TextEncoderConfig(),
        tst=tst_cfg,
        fusion_depth=resolve(args, fv, "fusion-depth", 1, int),
    )


def _load_split(args, records, train_fraction, seed):
    split = getattr(args, "split", "all")
    if split == "all":
        return records
    train, test = records_mod.patient_level_split(records, train_fraction, seed)
    return train if split == "train" else test


def cmd_generate(args) -> int:
    fv = load_config_file(args.config) if args.config else {}
    cfg = synth_mod.GeneratorConfig(
        n_patients=resolve(args, fv, "n-patients", 100, int),
        visit_count_range=(
            resolve(args, fv, "visits-min", 2, int),
            resolve(args, fv, "visits-max", 6, int),
        ),
        seed=resolve(args, fv, "seed", 0, int),
    )
    synth_mod.validate_generator_config(cfg)
    stats_path = args.stats or f"{args.out}.stats.csv"
    write_manifest(
        f"{args.out}.manifest.json",
        "generate",
        {"n_patients": cfg.n_patients, "visit_count_range": list(cfg.visit_count_range),
         "d": cfg.d, "seed": cfg.seed},
        inputs=[args.config] if args.config else [],
        outputs=[args.out, stats_path],
        seed=cfg.seed,
    )
    corpus = synth_mod.generate(cfg)
    records_mod.save_records(corpus, args.out)
    synth_mod.write_stats_csv(synth_mod.prevalence_stats(corpus, cfg.label_names), stats_path)
    print(f"wrote {len(corpus)} patients to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    fv = load_config_file(args.config) if args.config else {}
    data_cfg, train_cfg, train_fraction = _resolved_train_configs(args, fv)
    records = records_mod.load_records(args.data)
    train_records, test_records = records_mod.patient_level_split(
        records, train_fraction, train_cfg.seed
    )
    corpus_labels = len(records[0].visits[0].labels) if records and records[0].visits else 0
    n_labels = 1 if data_cfg.task == records_mod.TASK_HEART_FAILURE else corpus_labels
    model_cfg = _model_cfg_for(args, fv, n_labels)
    precomputed = PrecomputedEmbeddings.load(args.embeddings) if args.embeddings else None
    if precomputed is not None:
        model_cfg = replace(model_cfg, text=replace(model_cfg.text, embed_dim=precomputed.dim))

    log_path = args.log or f"{args.checkpoint}.log.csv"
    outputs = [args.checkpoint, log_path] + ([args.cohort] if args.cohort else [])
    write_manifest(
        f"{args.checkpoint}.manifest.json",
        "train",
        {
            "data": args.data,
            "task": data_cfg.task,
            "target": data_cfg.target,
            "ablation": train_cfg.ablation,
            "alpha": train_cfg.loss.alpha,
            "lr": train_cfg.learning_rate,
            "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size,
            "train_fraction": train_fraction,
            "norm": model_cfg.tst.norm,
            "seed": train_cfg.seed,
        },
        inputs=[args.data] + ([args.embeddings] if args.embeddings else []),
        outputs=outputs,
        seed=train_cfg.seed,
    )
    trained, history, cohort = trainer_mod.train(
        train_records, data_cfg, train_cfg, model_cfg,
        eval_records=test_records, precomputed=precomputed,
    )
    trainer_mod.save_checkpoint(trained, args.checkpoint)
    trainer_mod.write_training_log(history, log_path)
    if args.cohort:
        records_mod.write_cohort_csv(cohort, args.cohort)
    final = [row for row in history if row["split"] == "test"]
    if final:
        print(
            f"epoch {final[-1]['epoch']}: test f1_macro={final[-1]['f1_macro']:.4f} "
            f"accuracy={final[-1]['accuracy']:.4f}"
        )
    print(f"checkpoint: {args.checkpoint}")
    return EXIT_OK


def _load_for_eval(args):
    trained = trainer_mod.load_checkpoint(args.checkpoint)
    records = records_mod.load_records(args.data)
    split_records = _load_split(
        args, records, trained.data_cfg.train_fraction, trained.train_cfg.seed
    )
    precomputed = PrecomputedEmbeddings.load(args.embeddings) if args.embeddings else None
    return trained, split_records, precomputed


def cmd_eval(args) -> int:
    trained, split_records, precomputed = _load_for_eval(args)
    k_list = args.k if args.k else list(trainer_mod.DEFAULT_K_LIST)
    json_path = f"{args.out}.json"
    write_manifest(
        f"{args.out}.manifest.json",
        "eval",
        {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
         "k": k_list, "seed": trained.train_cfg.seed},
        inputs=[args.checkpoint, args.data],
        outputs=[args.out, json_path],
        seed=trained.train_cfg.seed,
    )
    report = trainer_mod.evaluate(
        trained, split_records, k_list=k_list, precomputed=precomputed,
        per_label=args.per_label, subset_accuracy=args.subset_accuracy,
    )
    metrics_mod.write_report_csv(report, args.out)
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    for name, value in report.rows():
        print(f"{name}: {value:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    trained, split_records, precomputed = _load_for_eval(args)
    write_manifest(
        f"{args.out}.manifest.json",
        "predict",
        {"checkpoint": args.checkpoint, "data": args.data, "split": args.split},
        inputs=[args.checkpoint, args.data],
        outputs=[args.out],
        seed=trained.train_cfg.seed,
    )
    samples, pred_set = trainer_mod.predictions(trained, split_records, precomputed)
    rows = []
    for i, sample in enumerate(samples):
        for j in range(pred_set.n_labels):
            rows.append(
                (
                    sample.patient_id,
                    sample.visit_index,
                    j,
                    pred_set.scores[i, j],
                    int(pred_set.bits[i, j]),
                    int(pred_set.targets[i, j]),
                )
            )
    fusion_mod.write_prediction_csv(args.out, rows)
    print(f"wrote {len(rows)} prediction rows to {args.out}")
    return EXIT_OK


ABLATE_MODES = ("full", "no_text", "no_labtext")


def cmd_ablate(args) -> int:
    import os

    fv = load_config_file(args.config) if args.config else {}
    data_cfg, train_cfg, train_fraction = _resolved_train_configs(args, fv)
    records = records_mod.load_records(args.data)
    train_records, test_records = records_mod.patient_level_split(
        records, train_fraction, train_cfg.seed
    )
    corpus_labels = len(records[0].visits[0].labels) if records and records[0].visits else 0
    n_labels = 1 if data_cfg.task == records_mod.TASK_HEART_FAILURE else corpus_labels
    model_cfg = _model_cfg_for(args, fv, n_labels)
    workdir = args.workdir or os.path.dirname(os.path.abspath(args.out))
    os.makedirs(workdir, exist_ok=True)
    checkpoints = {mode: os.path.join(workdir, f"ablate_{mode}.ckpt") for mode in ABLATE_MODES}
    write_manifest(
        f"{args.out}.manifest.json",
        "ablate",
        {"data": args.data, "modes": list(ABLATE_MODES), "alpha": train_cfg.loss.alpha,
         "lr": train_cfg.learning_rate, "epochs": train_cfg.epochs, "seed": train_cfg.seed},
        inputs=[args.data],
        outputs=[args.out] + list(checkpoints.values()),
        seed=train_cfg.seed,
    )
    table = []
    for mode in ABLATE_MODES:
        run_cfg = replace(train_cfg, ablation=mode)
        trained, _, _ = trainer_mod.train(
            train_records, data_cfg, run_cfg, model_cfg, eval_records=None
        )
        trainer_mod.save_checkpoint(trained, checkpoints[mode])
        report = trainer_mod.evaluate(trained, test_records)
        table.append((mode, report))
    _write_ablation_table(args.out, table)
    for mode, report in table:
        print(f"{mode}: f1_macro={report.f1_macro:.4f} accuracy={report.accuracy:.4f}")
    return EXIT_OK


def _write_ablation_table(path, table) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            [
                "model", "precision", "recall", "f1_macro", "f1_weighted", "accuracy",
                "recall_at_3", "ndcg_at_3", "recall_at_5", "ndcg_at_5",
            ]
        )
        for mode, r in table:
            writer.writerow(
                [
                    mode,
                    repr(r.precision), repr(r.recall), repr(r.f1_macro),
                    repr(r.f1_weighted), repr(r.accuracy),
                    repr(r.recall_at_k.get(3, float("nan"))),
                    repr(r.ndcg_at_k.get(3, float("nan"))),
                    repr(r.recall_at_k.get(5, float("nan"))),
                    repr(r.ndcg_at_k.get(5, float("nan"))),
                ]
            )


def cmd_embed_export(args) -> int:
    trained, split_records, precomputed = _load_for_eval(args)
    write_manifest(
        f"{args.out}.manifest.json",
        "embed-export",
        {"checkpoint": args.checkpoint, "data": args.data, "split": args.split},
        inputs=[args.checkpoint, args.data],
        outputs=[args.out],
        seed=trained.train_cfg.seed,
    )
    rows = trainer_mod.export_embeddings(trained, split_records, precomputed)
    trainer_mod.write_embedding_csv(rows, args.out)
    print(f"wrote {len(rows)} embedding rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "embed-export": cmd_embed_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
