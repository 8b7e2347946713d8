"""
ShiftTrace command-line interface.

    python -m app.main generate --kind blobs --out scenario/
    python -m app.main train --data scenario/source.csv --model logreg --out model.json
    python -m app.main monitor --model model.json --source scenario/source.csv \
        --target scenario/target.csv --method xpe --out report.json
    python -m app.main evaluate --report report.json --scenario scenario/ --model model.json
    python -m app.main roars --scenario scenario/ --method xpe
    python -m app.main predict --model model.json < rows.csv

Machine output (JSON or CSV) goes to stdout, logs go to stderr. Exit codes:
0 success, 1 runtime or data error, 2 usage error.
"""
import argparse
import csv
import logging
import sys
import time
from typing import Any, Dict, List, Optional

import numpy as np

from app import __version__, config
from app.bridge import ExternalModel, encode_rows
from app.core import RngSpec, load_dataset, parse_grouping, read_header
from app.errors import DomainError, ParseError, PreconditionError, ShiftTraceError
from app.metrics import (complexity_dataset, gpc, group_importance_ratio, roar_s, shift_faithfulness_dataset)
from app.model import LossKind, ProbabilisticModel, TrainConfig, load_model, model_kind, save_model, train
from app.monitor import METHODS, explain_shift
from app.report import (build_report, dumps, export_attributions_csv, load_report, parse_shape,
                        report_attributions, write_heatmaps, write_json)
from app.shapley import EstimatorConfig
from app.simulator import CORRUPTION_KINDS, SCENARIO_KINDS, MeanImputer, generate, load_scenario, save_scenario

logger = logging.getLogger(__name__)

EVALUATE_METRICS = ["sfaith", "cpx", "gpc", "ratio"]


def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: Optional[str]):
    if text is None:
        return None
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return values[0] if len(values) == 1 else values


def _emit(payload: Dict[str, Any]) -> None:
    sys.stdout.write(dumps(payload))
    sys.stdout.flush()


def _add_model_source(parser: argparse.ArgumentParser, required: bool = True) -> None:
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument("--model", help="Trained model JSON")
    group.add_argument("--model-cmd", help="External command speaking the batch predict protocol")


def _load_optional_labels(path: str, label_column: str, classes: Optional[int] = None):
    """Target files may come without a label column."""
    return load_dataset(path, label_column if label_column in read_header(path) else None, classes)


def _open_model(args: argparse.Namespace, input_dim: int) -> ProbabilisticModel:
    if args.model_cmd:
        return ExternalModel(args.model_cmd, input_dim)
    model = load_model(args.model)
    if model.input_dim != input_dim:
        raise PreconditionError(f"Model expects {model.input_dim} features, data has {input_dim}")
    return model


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        hidden_units=args.hidden,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        validation_fraction=args.validation_fraction,
        seed=args.seed,
    )


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hidden", type=int, default=32, help="Hidden units (mlp)")
    parser.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--patience", type=int, default=10, help="Early stopping patience in epochs")
    parser.add_argument("--validation-fraction", type=float, default=0.1)


def cmd_generate(args: argparse.Namespace) -> None:
    """Write a synthetic shift scenario directory."""
    params = {
        name: getattr(args, name)
        for name in ("b", "gamma", "midpoint", "sigma", "p", "low", "high", "q")
        if getattr(args, name) is not None
    }
    if args.columns is not None:
        params["columns"] = args.columns
    scenario = generate(
        kind=args.kind, n=args.n, d=args.d, n_classes=args.classes, separation=args.separation,
        noise=args.noise, corruption=args.corruption, params=params, features=args.features,
        band=args.band, delta=args.delta, rho=args.rho, test_fraction=args.test_fraction, seed=args.seed,
    )
    directory = save_scenario(scenario, args.out)
    _emit({
        "scenario": str(directory),
        "descriptor": scenario.descriptor,
        "n_source": scenario.source.n,
        "n_target": scenario.target.n,
        "epsilon_label_preserving": scenario.epsilon_label_preserving,
    })


def cmd_train(args: argparse.Namespace) -> None:
    """Train a model on a labeled dataset and save it as JSON."""
    data = load_dataset(args.data, args.label_column)
    if not data.has_labels:
        raise PreconditionError(f"Dataset {args.data} has no labels")
    model = train(model_kind(args.model), data, _train_config(args))
    save_model(model, args.out)
    _emit({"model": str(args.out), "kind": model.kind.value, **model.history})


def _monitor_config(args: argparse.Namespace) -> Dict[str, Any]:
    # --threads and output locations are left out so reports do not depend on them
    return {
        "method": args.method,
        "model": args.model,
        "model_cmd": args.model_cmd,
        "source": args.source,
        "target": args.target,
        "grouping": args.grouping,
        "exact_cap": args.exact_cap,
        "budget": args.budget,
        "alpha": args.alpha,
        "loss": args.loss,
        "background": args.background,
    }


def _load_plan(path: str) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise ParseError(f"Malformed coupling plan {path}: {e}")


def cmd_monitor(args: argparse.Namespace) -> None:
    """Estimate target performance and attribute the shift per target instance."""
    source = load_dataset(args.source, args.label_column)
    target = _load_optional_labels(args.target, args.label_column, source.n_classes)
    if source.d != target.d:
        raise PreconditionError(f"Source has {source.d} features, target has {target.d}")
    grouping = parse_grouping(args.grouping, source.d)
    model = _open_model(args, source.d)
    plan = _load_plan(args.plan) if args.plan else None

    explanation = explain_shift(
        args.method, model, source, target, grouping,
        estimator=EstimatorConfig(exact_cap=args.exact_cap, budget=args.budget),
        rng=RngSpec(args.seed), alpha=args.alpha, loss_kind=LossKind(args.loss),
        tabular=args.background == "source", plan=plan, threads=args.threads,
    )
    report = build_report(explanation, args.seed, _monitor_config(args))
    write_json(report, args.out)

    indices = [int(i) for i in explanation.target_index]
    if args.attributions_csv:
        export_attributions_csv(explanation.attributions, indices, args.attributions_csv)
    if args.heatmap_dir:
        shape = parse_shape(args.heatmap_shape, source.d)
        write_heatmaps(explanation.attributions, indices, grouping, shape, args.heatmap_dir)
    logger.info(f"✓ Report written to {args.out}")
    _emit({"report": str(args.out), "method": args.method, **report["performance"],
           "instances": len(report["instances"]), "warnings": len(report["warnings"])})


def cmd_evaluate(args: argparse.Namespace) -> None:
    """Score a report's attributions against a scenario's ground truth."""
    report = load_report(args.report)
    scenario = load_scenario(args.scenario)
    indices, attributions = report_attributions(report)
    if not attributions:
        raise PreconditionError(f"Report {args.report} holds no instances")
    requested = args.metrics
    unknown = sorted(set(requested) - set(EVALUATE_METRICS))
    if unknown:
        raise DomainError(f"Unknown metrics {unknown}. Must be among {EVALUATE_METRICS}")

    d = scenario.source.d
    grouping = parse_grouping(report["config"].get("grouping", "identity"), d)
    rows = np.asarray(indices, dtype=np.int64)
    target = scenario.target
    if target.has_missing:
        target = MeanImputer.fit(scenario.source).impute(target)
    model = None
    if "sfaith" in requested or "gpc" in requested:
        if not (args.model or args.model_cmd):
            raise PreconditionError("S-Faith and GPC need --model or --model-cmd")
        model = _open_model(args, d)
    loss_kind = LossKind(report["config"].get("loss", LossKind.CROSS_ENTROPY.value))

    metrics: Dict[str, Any] = dict(report.get("metrics") or {})
    if "sfaith" in requested:
        if scenario.true_pre_shift is None:
            raise PreconditionError(f"S-Faith needs pre_shift.csv in {args.scenario}")
        result = shift_faithfulness_dataset(
            attributions, model, target.subset(rows), scenario.true_pre_shift[rows], scenario.source.labels[rows],
            grouping, args.subset_size, args.n_subsets, RngSpec(args.seed), args.tau, loss_kind,
        )
        metrics["s_faith"] = {k: v for k, v in result.items() if k != "excluded_instances"}
        metrics["excluded_instances"] = [indices[j] for j in result["excluded_instances"]]
    if "cpx" in requested:
        metrics["complexity"] = complexity_dataset(attributions)
    if "gpc" in requested:
        if scenario.true_pre_shift is None:
            raise PreconditionError(f"GPC needs pre_shift.csv in {args.scenario}")
        column = args.column if args.column is not None else int(scenario.descriptor["features"][0])
        if not 0 <= column < d:
            raise DomainError(f"GPC column {column} out of range 0..{d - 1}")
        player = int(grouping.group_of[column])
        keep = [j for j, a in enumerate(attributions) if abs(a.v_full - a.v_empty) >= args.tau]
        kept_rows = rows[keep]
        metrics["gpc"] = gpc(
            [attributions[j].values[player] for j in keep], model, target.features[kept_rows],
            scenario.true_pre_shift[kept_rows], target.labels[kept_rows], loss_kind,
        )
    if "ratio" in requested:
        if args.designated is not None:
            groups = args.designated
        else:
            # Default: the groups holding the scenario's shifted features
            groups = sorted({int(grouping.group_of[i]) for i in scenario.descriptor.get("features", [])})
        metrics["group_ratio"] = group_importance_ratio(attributions, groups)

    report["metrics"] = metrics
    write_json(report, args.out or args.report)
    _emit({"metrics": metrics})


def cmd_roars(args: argparse.Namespace) -> None:
    """Remove-and-retrain score of one attribution method on a scenario."""
    scenario = load_scenario(args.scenario)
    grouping = parse_grouping(args.grouping, scenario.source.d)
    result = roar_s(
        args.method, scenario, model_kind(args.model_kind), _train_config(args), args.removal, args.seed,
        grouping, EstimatorConfig(exact_cap=args.exact_cap, budget=args.budget), args.tau, threads=args.threads,
    )
    _emit(result.to_json())


def cmd_predict(args: argparse.Namespace) -> None:
    """Batch predict protocol: feature rows on stdin, probability rows on stdout."""
    model = load_model(args.model)
    rows = []
    for r, row in enumerate(csv.reader(sys.stdin), start=1):
        if not row:
            continue
        try:
            rows.append([float(cell) for cell in row])
        except ValueError:
            raise ParseError(f"Malformed numeric input at row {r}: {row}")
    if not rows:
        return
    sys.stdout.write(encode_rows(model.predict_proba(np.asarray(rows, dtype=np.float64))))
    sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=config.SEED, help="Global seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=config.THREADS, help="Worker threads; results do not depend on it")
    common.add_argument("--log-level", default=config.LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--label-column", default="label")

    estimator = argparse.ArgumentParser(add_help=False)
    estimator.add_argument("--grouping", default="identity", help="identity, blocks:<size> or explicit:<ids>")
    estimator.add_argument("--exact-cap", type=int, default=config.EXACT_CAP,
                           help="Largest player count attributed by exact enumeration")
    estimator.add_argument("--budget", type=int, default=config.BUDGET, help="Kernel estimator coalition budget")

    parser = argparse.ArgumentParser(prog="shifttrace", description="Explain performance changes under distribution shift")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="Generate a synthetic shift scenario")
    p.add_argument("--kind", required=True, choices=SCENARIO_KINDS)
    p.add_argument("--out", required=True, help="Scenario directory")
    p.add_argument("--n", type=int, default=400, help="Rows per domain")
    p.add_argument("--d", type=int, default=8, help="Feature count")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--corruption", choices=CORRUPTION_KINDS, default="brightness")
    p.add_argument("--features", type=_int_list, help="Corrupted feature indices (default all)")
    p.add_argument("--b", type=_float_list, help="Brightness offset")
    p.add_argument("--gamma", type=float, help="Contrast factor")
    p.add_argument("--midpoint", type=_float_list, help="Contrast midpoint")
    p.add_argument("--sigma", type=_float_list, help="Gaussian noise scale")
    p.add_argument("--p", type=float, help="Impulse rate")
    p.add_argument("--low", type=_float_list, help="Impulse low value")
    p.add_argument("--high", type=_float_list, help="Impulse high value")
    p.add_argument("--q", type=float, help="Missing rate")
    p.add_argument("--columns", type=_int_list, help="Columns marked missing (default the corrupted features)")
    p.add_argument("--band", type=_int_list, help="Designated band for group_signal")
    p.add_argument("--delta", type=float, default=10.0, help="Group offset inside the band")
    p.add_argument("--rho", type=float, default=1.0, help="Group-B fraction of the target")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="Train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=["logreg", "mlp", "logistic_regression", "mlp_1hidden"])
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("monitor", parents=[common, estimator], help="Estimate and explain a shift")
    _add_model_source(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--method", choices=METHODS, default="xpe")
    p.add_argument("--alpha", type=float, default=0.05, help="KS significance level")
    p.add_argument("--loss", choices=[k.value for k in LossKind], default=LossKind.CROSS_ENTROPY.value)
    p.add_argument("--background", choices=["zeros", "source"], default="zeros",
                   help="Standard attribution reference for lad/axs")
    p.add_argument("--plan", help="External coupling CSV (source rows x target rows) for the coupling method")
    p.add_argument("--out", required=True, help="Report JSON")
    p.add_argument("--attributions-csv")
    p.add_argument("--heatmap-dir")
    p.add_argument("--heatmap-shape", help="HxW; square by default")
    p.set_defaults(handler=cmd_monitor)

    p = sub.add_parser("evaluate", parents=[common], help="Add metrics to a report")
    _add_model_source(p, required=False)
    p.add_argument("--report", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--metrics", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   default=["sfaith", "cpx"], help=f"Comma-separated subset of {EVALUATE_METRICS}")
    p.add_argument("--subset-size", type=int)
    p.add_argument("--n-subsets", type=int, default=100)
    p.add_argument("--tau", type=float, default=config.TAU)
    p.add_argument("--column", type=int, help="Corrupted column for GPC")
    p.add_argument("--designated", type=_int_list, help="Designated group ids for the ratio")
    p.add_argument("--out", help="Output report (default: update in place)")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("roars", parents=[common, estimator], help="Remove-and-retrain score")
    p.add_argument("--scenario", required=True)
    p.add_argument("--method", choices=METHODS, default="xpe")
    p.add_argument("--model-kind", choices=["logreg", "mlp", "logistic_regression", "mlp_1hidden"], default="mlp")
    p.add_argument("--removal", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=config.TAU)
    _add_train_flags(p)
    p.set_defaults(handler=cmd_roars)

    p = sub.add_parser("predict", parents=[common], help="Batch predict from stdin")
    p.add_argument("--model", required=True)
    p.set_defaults(handler=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config.setup_logging(args.log_level)
    if args.threads < 1:
        parser.error(f"--threads must be positive, got {args.threads}")

    started = time.perf_counter()
    try:
        args.handler(args)
    except (ShiftTraceError, OSError) as e:
        logger.error(f"⚠ {args.command} failed: {e}")
        return getattr(e, "exit_code", 1)
    summary = config.process_summary()
    logger.debug(
        f"{args.command} finished in {time.perf_counter() - started:.2f}s, "
        f"memory {summary['memory_mb']} MB, {summary['num_threads']} threads"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
