"""Command-line entry point: gen, train, eval, estimate-k, ood.

Option precedence is flags > config file > built-in defaults.  Every run
writes exactly one ``run_manifest.json`` with the resolved config, input
and output paths, artifact checksums, and wall-clock duration; feeding a
manifest back via --config reproduces the run bit-for-bit.

The PROTOGCD_OUT environment variable overrides the default of --out.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import estimation, figures, ood as ood_mod
from .errors import ConfigError, ProtoGcdError
from .evaluation import evaluate
from .model import load_checkpoint, save_checkpoint
from .optimizer import OptimizerConfig
from .trainer import TrainConfig, train

OUT_ENV = "PROTOGCD_OUT"
DEFAULT_OUT = "protogcd-out"

TRAIN_DEFAULTS = {
    "lambda_sup": 0.35,
    "lambda_entropy": 2.0,
    "lambda_sep": 0.1,
    "tau_c": 0.07,
    "tau_base": 0.1,
    "tau_sharp": 0.05,
    "tau_sep": 0.1,
    "e_ramp": 100,
    "epochs": 200,
    "batch_size": 128,
    "view_sigma": 0.05,
    "seed": 0,
    "use_dapl": True,
    "warm_start": False,
    "select_best": False,
    "feature_dim": None,
    "projection_dim": 32,
    "adapter_strategy": "identity",
    "lr0": 0.1,
    "lr_min": None,
    "momentum": 0.9,
    "weight_decay": 0.0,
}

GEN_DEFAULTS = {
    "classes": None,
    "old": None,
    "per_class": "200",
    "dim": 16,
    "kappa": 50.0,
    "labeled_fraction": 0.5,
    "min_angle_deg": 25.0,
    "seed": 0,
    "ood_components": 0,
    "ood_count": 1000,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            elif isinstance(v, float):
                cells.append(format(v, ".10g"))
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    data = json.loads(p.read_text(encoding="utf-8"))
    # A run manifest doubles as a config file.
    if isinstance(data, dict) and "config" in data and isinstance(data["config"], dict):
        return data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return data


def _resolve(parser: argparse.ArgumentParser, args: argparse.Namespace,
             defaults: dict, required: tuple = ()) -> dict:
    """flags > config file > defaults; missing required keys are usage errors."""
    config = _load_config_file(getattr(args, "config", None))
    merged = dict(defaults)
    for key, value in config.items():
        if key in merged:
            merged[key] = value
    for key in defaults:
        if hasattr(args, key):
            merged[key] = getattr(args, key)
    for key in required:
        if merged.get(key) is None:
            parser.error(f"missing required option --{key.replace('_', '-')}")
    return merged


def _out_dir(args: argparse.Namespace) -> Path:
    out = getattr(args, "out", None)
    if out is None:
        out = os.environ.get(OUT_ENV, DEFAULT_OUT)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_config(resolved: dict, num_prototypes: int | None = None,
                  epochs: int | None = None) -> TrainConfig:
    opt = OptimizerConfig(
        lr0=resolved["lr0"], lr_min=resolved["lr_min"],
        momentum=resolved["momentum"], weight_decay=resolved["weight_decay"],
        total_epochs=epochs if epochs is not None else resolved["epochs"],
    )
    return TrainConfig(
        lambda_sup=resolved["lambda_sup"],
        lambda_entropy=resolved["lambda_entropy"],
        lambda_sep=resolved["lambda_sep"],
        tau_c=resolved["tau_c"], tau_base=resolved["tau_base"],
        tau_sharp=resolved["tau_sharp"], tau_sep=resolved["tau_sep"],
        e_ramp=resolved["e_ramp"],
        epochs=epochs if epochs is not None else resolved["epochs"],
        batch_size=resolved["batch_size"], view_sigma=resolved["view_sigma"],
        seed=resolved["seed"], use_dapl=resolved["use_dapl"],
        warm_start=resolved["warm_start"], select_best=resolved["select_best"],
        feature_dim=resolved["feature_dim"],
        projection_dim=resolved["projection_dim"],
        adapter_strategy=resolved["adapter_strategy"],
        num_prototypes=num_prototypes,
        optimizer=opt,
    )


def _eval_report_files(report, out: Path, stem: str) -> dict[str, Path]:
    tsv = _write_tsv(out / f"{stem}.tsv",
                     ["acc_all", "acc_old", "acc_new", "compactness", "separation"],
                     [[report.acc_all, report.acc_old, report.acc_new,
                       report.compactness, report.separation]])
    fig = figures.eval_bars(report, out / "figures" / f"{stem}.png")
    return {stem: tsv, f"{stem}_figure": fig}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (or a run manifest)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--out", help=f"output directory (default ${OUT_ENV} "
                                      f"or {DEFAULT_OUT})")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads for this run")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    sup = argparse.SUPPRESS
    parser.add_argument("--epochs", type=int, default=sup)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=sup)
    parser.add_argument("--lambda-sup", dest="lambda_sup", type=float, default=sup)
    parser.add_argument("--lambda-entropy", dest="lambda_entropy", type=float,
                        default=sup)
    parser.add_argument("--lambda-sep", dest="lambda_sep", type=float, default=sup)
    parser.add_argument("--tau-c", dest="tau_c", type=float, default=sup)
    parser.add_argument("--tau-base", dest="tau_base", type=float, default=sup)
    parser.add_argument("--tau-sharp", dest="tau_sharp", type=float, default=sup)
    parser.add_argument("--tau-sep", dest="tau_sep", type=float, default=sup)
    parser.add_argument("--e-ramp", dest="e_ramp", type=int, default=sup)
    parser.add_argument("--view-sigma", dest="view_sigma", type=float, default=sup)
    parser.add_argument("--proj-dim", dest="projection_dim", type=int, default=sup)
    parser.add_argument("--feature-dim", dest="feature_dim", type=int, default=sup)
    parser.add_argument("--adapter", dest="adapter_strategy",
                        choices=["identity", "random"], default=sup)
    parser.add_argument("--lr", dest="lr0", type=float, default=sup)
    parser.add_argument("--lr-min", dest="lr_min", type=float, default=sup)
    parser.add_argument("--momentum", type=float, default=sup)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float,
                        default=sup)
    parser.add_argument("--no-dapl", dest="use_dapl", action="store_false",
                        default=sup)
    parser.add_argument("--warm-start", dest="warm_start", action="store_true",
                        default=sup)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protogcd",
        description="Prototype-based generalized category discovery on fixed "
                    "embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic vMF-mixture dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=argparse.SUPPRESS)
    p.add_argument("--old", type=int, default=argparse.SUPPRESS)
    p.add_argument("--per-class", dest="per_class", default=argparse.SUPPRESS,
                   help="samples per class: one int or comma list")
    p.add_argument("--dim", type=int, default=argparse.SUPPRESS)
    p.add_argument("--kappa", type=float, default=argparse.SUPPRESS)
    p.add_argument("--labeled-fraction", dest="labeled_fraction", type=float,
                   default=argparse.SUPPRESS)
    p.add_argument("--min-angle-deg", dest="min_angle_deg", type=float,
                   default=argparse.SUPPRESS)
    p.add_argument("--ood-components", dest="ood_components", type=int,
                   default=argparse.SUPPRESS,
                   help="also emit an outlier set from this many held-out "
                        "components")
    p.add_argument("--ood-count", dest="ood_count", type=int,
                   default=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train and evaluate on the unlabeled pool")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--eval-split", dest="eval_split",
                   help="held-out dataset for an inductive report")
    p.add_argument("--select-best", dest="select_best", action="store_true",
                   default=argparse.SUPPRESS,
                   help="return the best validation checkpoint (needs --eval-split)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=["all", "unlabeled"], default="all")

    p = sub.add_parser("estimate-k", help="estimate the number of new classes")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k-max", dest="k_max", type=int, required=True)
    p.add_argument("--k-old", dest="k_old", type=int, default=None,
                   help="default: number of old classes in the dataset")
    p.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=3)
    p.add_argument("--sweep", action="store_true",
                   help="also score every candidate and report both answers")
    p.add_argument("--criterion", choices=["proto", "acc"], default="proto")

    p = sub.add_parser("ood", help="out-of-distribution scoring")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-data", dest="id_data", required=True)
    p.add_argument("--ood-data", dest="ood_data", required=True)
    p.add_argument("--score", choices=["msp", "mls", "energy", "all"],
                   default="msp")
    p.add_argument("--tau-base", dest="tau_base", type=float, default=0.1)
    return parser


def cmd_gen(parser, args, out: Path) -> tuple[dict, dict, dict]:
    resolved = _resolve(parser, args, GEN_DEFAULTS, required=("classes", "old"))
    per_class = resolved["per_class"]
    if isinstance(per_class, str) and "," in per_class:
        per_class = [int(v) for v in per_class.split(",")]
    else:
        per_class = int(per_class)
    cfg = ds_mod.SyntheticConfig(
        total_classes=resolved["classes"],
        old_class_count=resolved["old"],
        dimension=resolved["dim"],
        samples_per_class=per_class,
        concentration=resolved["kappa"],
        labeled_fraction=resolved["labeled_fraction"],
        min_prototype_angle=np.deg2rad(resolved["min_angle_deg"]),
        seed=resolved["seed"],
    )
    dataset, prototypes = ds_mod.generate_synthetic(cfg)
    manifest_path = ds_mod.save_dataset(dataset, out / "dataset")
    outputs = {"dataset_manifest": manifest_path,
               "dataset_features": manifest_path.parent / "features.pgcd"}
    if resolved["ood_components"] > 0:
        ood_set = ds_mod.generate_ood(
            prototypes, resolved["ood_components"], resolved["ood_count"],
            concentration=resolved["kappa"],
            min_angle=np.deg2rad(resolved["min_angle_deg"]),
            seed=resolved["seed"] + 1,
        )
        ood_manifest = ds_mod.save_dataset(ood_set, out / "ood")
        outputs["ood_manifest"] = ood_manifest
        outputs["ood_features"] = ood_manifest.parent / "features.pgcd"
    print(f"generated {len(dataset)} samples "
          f"({dataset.n_labeled} labeled) in {out / 'dataset'}")
    return resolved, {}, outputs


def cmd_train(parser, args, out: Path) -> tuple[dict, dict, dict]:
    resolved = _resolve(parser, args, TRAIN_DEFAULTS)
    dataset = ds_mod.load_dataset(args.data)
    validation = ds_mod.load_dataset(args.eval_split) if args.eval_split else None
    cfg = _train_config(resolved)

    log_path = out / "training_log.tsv"
    if log_path.exists():
        log_path.unlink()
    params, history = train(dataset, cfg, validation=validation,
                            log_path=log_path)
    if not log_path.exists():  # epochs=0 still yields the artifact
        log_path.write_text("", encoding="utf-8")

    checkpoint = out / "checkpoint.pgck"
    save_checkpoint(params, checkpoint, k_old=len(dataset.old_classes))

    _, unlabeled_idx = ds_mod.split_gcd(dataset)
    report = evaluate(params, dataset, indices=unlabeled_idx)
    outputs = {"checkpoint": checkpoint, "training_log": log_path}
    outputs.update(_eval_report_files(report, out, "eval_report"))
    if history.records:
        outputs["training_figure"] = figures.training_curves(
            history.records, out / "figures" / "training_curves.png")
    if validation is not None:
        inductive = evaluate(params, validation)
        outputs.update(_eval_report_files(inductive, out, "inductive_report"))
    print(f"trained {cfg.epochs} epochs; transductive acc_all="
          f"{report.acc_all:.4f} old={report.acc_old:.4f} new={report.acc_new:.4f}")
    inputs = {"data": Path(args.data)}
    if args.eval_split:
        inputs["eval_split"] = Path(args.eval_split)
    return resolved, inputs, outputs


def cmd_eval(parser, args, out: Path) -> tuple[dict, dict, dict]:
    params, meta = load_checkpoint(args.checkpoint)
    dataset = ds_mod.load_dataset(args.data)
    if params.d_in != dataset.dim:
        raise ConfigError(
            f"checkpoint expects inputs of dimension {params.d_in}, "
            f"dataset has {dataset.dim}")
    indices = None
    if args.subset == "unlabeled":
        _, indices = ds_mod.split_gcd(dataset)
    report = evaluate(params, dataset, indices=indices)
    outputs = _eval_report_files(report, out, "eval_report")
    print(f"acc_all={report.acc_all:.4f} old={report.acc_old:.4f} "
          f"new={report.acc_new:.4f}")
    return ({"subset": args.subset}, {"checkpoint": Path(args.checkpoint),
                                      "data": Path(args.data)}, outputs)


def cmd_estimate_k(parser, args, out: Path) -> tuple[dict, dict, dict]:
    resolved = _resolve(parser, args, TRAIN_DEFAULTS)
    dataset = ds_mod.load_dataset(args.data)
    k_old = args.k_old if args.k_old is not None else len(dataset.old_classes)
    if k_old < 1:
        raise ConfigError("estimation needs at least one old class")
    cfg = _train_config(resolved)
    result = estimation.estimate_k(
        dataset, k_old=k_old, k_max=args.k_max, cfg=cfg,
        probe_epochs=args.probe_epochs, sweep=args.sweep,
        criterion=args.criterion)

    trace = _write_tsv(out / "estimate_trace.tsv",
                       ["candidate", "acc_score", "centr_score", "proto_score"],
                       [[t.candidate, t.acc_score, t.centr_score, t.proto_score]
                        for t in result.probes])
    iters = _write_tsv(out / "estimate_iterations.tsv",
                       ["iteration", "k_a", "k_b", "k_c1", "k_c2",
                        "p_c1", "p_c2", "p_a", "p_b"],
                       [[it.iteration, it.k_a, it.k_b, it.k_c1, it.k_c2,
                         it.p_c1, it.p_c2, it.p_a, it.p_b]
                        for it in result.iterations])
    rows = [["binary_search", result.estimate]]
    if result.sweep_estimate is not None:
        rows.append(["exhaustive_sweep", result.sweep_estimate])
    report = _write_tsv(out / "estimate_report.tsv", ["method", "k_new"], rows)
    fig = figures.estimate_curves(result.probes, result.estimate,
                                  out / "figures" / "estimate_scores.png")
    print(f"estimated k_new = {result.estimate}"
          + (f" (sweep: {result.sweep_estimate})"
             if result.sweep_estimate is not None else ""))
    resolved.update({"k_max": args.k_max, "k_old": k_old,
                     "probe_epochs": args.probe_epochs, "sweep": args.sweep,
                     "criterion": args.criterion})
    return (resolved, {"data": Path(args.data)},
            {"estimate_report": report, "estimate_trace": trace,
             "estimate_iterations": iters, "estimate_figure": fig})


def cmd_ood(parser, args, out: Path) -> tuple[dict, dict, dict]:
    params, meta = load_checkpoint(args.checkpoint)
    id_set = ds_mod.load_dataset(args.id_data)
    ood_set = ds_mod.load_dataset(args.ood_data)
    for name, d in (("id", id_set), ("ood", ood_set)):
        if params.d_in != d.dim:
            raise ConfigError(
                f"checkpoint expects inputs of dimension {params.d_in}, "
                f"{name} dataset has {d.dim}")
    names = list(ood_mod.SCORE_NAMES) if args.score == "all" else [args.score]
    rows = []
    pairs = {}
    for name in names:
        rep = ood_mod.ood_report(params, id_set.features64(),
                                 ood_set.features64(), name, args.tau_base)
        rows.append([rep.score_name, rep.fpr95, rep.auroc, rep.aupr_in,
                     rep.n_id, rep.n_ood])
        pairs[name] = (
            ood_mod.score_batch(params, id_set.features64(), name, args.tau_base),
            ood_mod.score_batch(params, ood_set.features64(), name, args.tau_base))
        print(f"{rep.score_name}: auroc={rep.auroc:.4f} fpr95={rep.fpr95:.4f} "
              f"aupr_in={rep.aupr_in:.4f}")
    report = _write_tsv(out / "ood_report.tsv",
                        ["score_name", "fpr95", "auroc", "aupr_in",
                         "n_id", "n_ood"], rows)
    fig = figures.ood_histograms(pairs, out / "figures" / "ood_scores.png")
    return ({"score": args.score, "tau_base": args.tau_base},
            {"checkpoint": Path(args.checkpoint), "id_data": Path(args.id_data),
             "ood_data": Path(args.ood_data)},
            {"ood_report": report, "ood_figure": fig})


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "estimate-k": cmd_estimate_k,
    "ood": cmd_ood,
}


def _run(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    out = _out_dir(args)
    started = time.time()
    config, inputs, outputs = COMMANDS[args.command](parser, args, out)
    missing = [str(p) for p in outputs.values() if not Path(p).exists()]
    if missing:
        raise ProtoGcdError(f"artifacts not written: {missing}")
    manifest = {
        "command": args.command,
        "seed": config.get("seed"),
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "checksums": {k: _sha256(v) for k, v in outputs.items()},
        "duration_seconds": time.time() - started,
    }
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = None
    if getattr(args, "threads", None):
        try:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        except ImportError:
            pass
    try:
        return _run(parser, args)
    except (ProtoGcdError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
