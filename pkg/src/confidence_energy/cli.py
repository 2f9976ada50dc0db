"""Command-line driver: generate, calibrate, corrupt, train, infer, evaluate, sweep.

Every run writes ``<out>.manifest.json`` next to its primary output. The
manifest holds the fully resolved argument vector, so

    confidence-energy replay run.csv.manifest.json

reproduces the primary outputs byte for byte.
"""

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import EmptyCalibrationWarning, build_store, load_store, save_store
from .energy import (
    CERN1,
    CERN2,
    EnergyParams,
    InvalidStateError,
    load_instances,
    load_params,
    save_instances,
    save_params,
)
from .harness import (
    CorruptionConfig,
    GeneratorConfig,
    corrupt,
    default_confusion_map,
    evaluate,
    generate_split,
    robustness_sweep,
)
from .inference import SOFTMAX, canonical_regime, infer_many, load_predictions, save_predictions
from .learning import TrainConfig, train, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class DataError(Exception):
    """Input that parses as arguments but not as data."""


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _nonneg(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return value


# -- parser ------------------------------------------------------------------


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    shared.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    shared.add_argument("--mode", choices=(CERN1, CERN2), default=None,
                        help="energy form; defaults to the params file, else cern2")
    shared.add_argument("--regime", default="confidence-energy",
                        choices=("softmax", "energy", "confidence-energy",
                                 "softmax-only", "energy-only", "confidence"))
    shared.add_argument("--out", required=True, help="primary output path")

    lambdas = argparse.ArgumentParser(add_help=False)
    for name in ("node", "edge", "event"):
        lambdas.add_argument(f"--lambda-{name}", type=_nonneg, default=None,
                             help=f"override the {name} multiplier")

    parser = argparse.ArgumentParser(prog="confidence-energy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[shared], help="draw synthetic labelled scenes")
    p.add_argument("--n-instances", type=int, default=200)
    p.add_argument("--n-calibration", type=int, default=None, help="default: --n-instances")
    p.add_argument("--calibration-out", default=None, help="default: <out stem>.calibration.jsonl")
    p.add_argument("--n-events", type=int, default=4)
    p.add_argument("--n-node-labels", type=int, default=6)
    p.add_argument("--n-edge-labels", type=int, default=4)
    p.add_argument("--nodes-min", type=int, default=3)
    p.add_argument("--nodes-max", type=int, default=8)
    p.add_argument("--edge-density", type=float, default=0.3)
    p.add_argument("--signal-strength", type=float, default=0.7)

    p = sub.add_parser("calibrate", parents=[shared], help="build a calibration store")
    p.add_argument("instances")
    p.add_argument("--epsilon", type=float, default=None, help="fixed p-value floor (default: per category)")
    p.add_argument("--n-events", type=int, default=None, help="default: inferred from the instances")

    p = sub.add_parser("corrupt", parents=[shared], help="corrupt potential rows")
    p.add_argument("instances")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--confusion-map", default=None, help="JSON matrix; default: the generator's map")

    p = sub.add_parser("train", parents=[shared, lambdas], help="fit energy-layer weights")
    p.add_argument("instances")
    p.add_argument("--store", required=True)
    p.add_argument("--init", default=None, help="initial params (default: zeros)")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--decay", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--train-lambdas", action="store_true")
    p.add_argument("--trace", default=None, help="default: <out>.trace.csv")

    p = sub.add_parser("infer", parents=[shared, lambdas], help="predict labels")
    p.add_argument("instances")
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True)

    p = sub.add_parser("evaluate", parents=[shared], help="score predictions")
    p.add_argument("predictions")
    p.add_argument("instances")
    p.add_argument("--score-labels", action="store_true", help="also require correct node/edge labels")

    p = sub.add_parser("sweep", parents=[shared, lambdas], help="accuracy versus corruption")
    p.add_argument("instances")
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--q-grid", type=_float_list, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--confusion-map", default=None, help="JSON matrix; default: the generator's map")
    p.add_argument("--summary", default=None, help="default: <out stem>.summary.json")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    return parser


# -- helpers -----------------------------------------------------------------


def _sibling(out, suffix):
    out = Path(out)
    return str(out.with_name(out.stem + suffix))


def _load_instances(path, require_truth=False):
    try:
        instances = load_instances(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if require_truth:
        if not instances:
            raise DataError(f"{path}: no training instances")
        for k, inst in enumerate(instances, start=1):
            if inst.truth is None:
                raise DataError(f"{path}: instance #{k} ({inst.instance_id!r}) has no truth block")
    return instances


def _n_events(instances, explicit=None):
    if explicit is not None:
        return explicit
    for inst in instances:
        if inst.n_events is not None:
            return inst.n_events
        if inst.event_potential is not None:
            return len(inst.event_potential)
    found = [inst.truth.event_class for inst in instances if inst.truth is not None]
    if not found:
        raise DataError("cannot infer the number of event classes; pass --n-events")
    return max(found) + 1


def _confusion_map(path, n_events, n_node_labels):
    if path is None:
        return default_confusion_map(n_events, n_node_labels)
    with open(path, encoding="utf-8") as fh:
        m = np.asarray(json.load(fh), dtype=np.float64)
    if m.shape != (n_events, n_node_labels):
        raise DataError(f"{path}: confusion map shape {m.shape} != {(n_events, n_node_labels)}")
    return m


def _params(args):
    params = load_params(args.params)
    changes = {}
    for name in ("node", "edge", "event"):
        value = getattr(args, f"lambda_{name}", None)
        if value is not None:
            changes[f"lambda_{name}"] = value
    if args.mode is not None:
        changes["mode"] = args.mode
    return params.copy(**changes) if changes else params


def _check_regime(regime, mode):
    if regime == SOFTMAX and mode == CERN1:
        raise UsageError("the softmax regime needs an event potential; it cannot run in cern1 mode")


# -- commands ----------------------------------------------------------------


def cmd_generate(args):
    mode = args.mode or CERN2
    config = GeneratorConfig(
        n_events=args.n_events,
        n_node_labels=args.n_node_labels,
        n_edge_labels=args.n_edge_labels,
        nodes_range=(args.nodes_min, args.nodes_max),
        edge_density=args.edge_density,
        signal_strength=args.signal_strength,
        with_event=mode == CERN2,
        seed=args.seed,
    )
    n_cal = args.n_instances if args.n_calibration is None else args.n_calibration
    evals, cals, _ = generate_split(config, args.n_instances, n_cal)
    cal_out = args.calibration_out or _sibling(args.out, ".calibration.jsonl")
    save_instances(evals, args.out)
    save_instances(cals, cal_out)
    return {"generator": config.to_dict(), "outputs": [args.out, cal_out]}


def cmd_calibrate(args):
    instances = _load_instances(args.instances, require_truth=True)
    first = instances[0]
    n_events = _n_events(instances, args.n_events)
    try:
        store = build_store(instances, first.n_node_labels, first.n_edge_labels, n_events, args.epsilon)
    except ValueError as exc:
        raise DataError(f"{args.instances}: {exc}") from None
    save_store(store, args.out)
    counts = store.group_counts()
    empty = sorted(k for k, v in counts.items() if v == 0)
    for level in ("node", "edge", "event"):
        sizes = [v for k, v in counts.items() if k[0] == level]
        print(f"{level}: {sum(sizes)} records in {len(sizes)} categories, "
              f"{sum(1 for v in sizes if v == 0)} empty")
    for level, c, y in empty:
        print(f"warning: empty calibration category level={level} event_class={c} label={y}",
              file=sys.stderr)
    return {
        "label_sizes": list(store.label_sizes),
        "epsilon": store.epsilon,
        "n_records": len(store),
        "n_empty_categories": len(empty),
        "outputs": [args.out],
    }


def cmd_corrupt(args):
    instances = _load_instances(args.instances)
    mode = args.mode or CERN2
    cmap = None
    if mode == CERN2 and instances:
        first = instances[0]
        cmap = _confusion_map(args.confusion_map, _n_events(instances), first.n_node_labels)
    config = CorruptionConfig(args.q, args.severity, args.seed, cmap)
    out = []
    for k, inst in enumerate(instances):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, k]))
        out.append(corrupt(inst, config, rng))
    save_instances(out, args.out)
    return {"q": args.q, "severity": args.severity, "event_recompute": cmap is not None, "outputs": [args.out]}


def cmd_train(args):
    instances = _load_instances(args.instances, require_truth=True)
    store = load_store(args.store)
    if args.init is not None:
        params = load_params(args.init)
    else:
        params = EnergyParams.zeros(*(store.n_events, store.n_node_labels, store.n_edge_labels))
    changes = {k: getattr(args, k) for k in ("lambda_node", "lambda_edge", "lambda_event")
               if getattr(args, k) is not None}
    if args.mode is not None:
        changes["mode"] = args.mode
    params = params.copy(**changes)
    config = TrainConfig(
        learning_rate=args.learning_rate,
        decay=args.decay,
        batch_size=args.batch_size,
        max_iterations=args.max_iterations,
        train_lambdas=args.train_lambdas,
        seed=args.seed,
    )
    fitted, trace = train(instances, params, store, config)
    trace_out = args.trace or args.out + ".trace.csv"
    save_params(fitted, args.out)
    write_trace(trace, trace_out, config.learning_rate)
    print(f"final mean batch loss {trace[-1]!r}")
    return {"train": vars(config), "mode": fitted.mode, "outputs": [args.out, trace_out]}


def cmd_infer(args):
    params = _params(args)
    regime = canonical_regime(args.regime)
    _check_regime(regime, params.mode)
    instances = _load_instances(args.instances)
    store = load_store(args.store)
    predictions = infer_many(instances, params, store, regime, threads=args.threads)
    save_predictions(predictions, args.out)
    return {"regime": regime, "mode": params.mode, "lambdas": list(params.lambdas), "outputs": [args.out]}


def cmd_evaluate(args):
    predictions = load_predictions(args.predictions)
    instances = {inst.instance_id: inst for inst in _load_instances(args.instances)}
    truths = []
    for pred in predictions:
        inst = instances.get(pred.instance_id)
        if inst is None:
            raise DataError(f"prediction for unknown instance {pred.instance_id!r}")
        if inst.truth is None:
            raise DataError(f"instance {inst.instance_id!r} has no truth block")
        truths.append(inst.truth)
    mca, mpca = evaluate(predictions, truths, score_labels=args.score_labels)
    result = {"n": len(predictions), "MCA": mca, "MPCA": mpca}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    print(f"MCA {mca:.4f}  MPCA {mpca:.4f}  (n={len(predictions)})")
    return {"score_labels": args.score_labels, "outputs": [args.out]}


def cmd_sweep(args):
    params = _params(args)
    if params.mode == CERN1:
        raise UsageError("the sweep runs the softmax regime, which needs cern2 mode")
    instances = _load_instances(args.instances, require_truth=True)
    store = load_store(args.store)
    first = instances[0]
    cmap = _confusion_map(args.confusion_map, params.n_events, first.n_node_labels)
    config = CorruptionConfig(0.0, args.severity, args.seed, cmap)
    report = robustness_sweep(instances, params, store, args.q_grid, config, threads=args.threads)
    summary = args.summary or _sibling(args.out, ".summary.json")
    report.to_csv(args.out)
    report.config["lambdas"] = list(params.lambdas)
    report.write_summary(summary)
    for row in report.rows:
        print(f"q={row.q:<5g} {row.regime:<18} MCA {row.mca:.4f}  drop {row.drop_mca:+.4f}")
    return {"q_grid": args.q_grid, "severity": args.severity, "outputs": [args.out, summary]}


COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


# -- manifest ----------------------------------------------------------------


def resolved_argv(parser, args):
    """Argument vector with every option spelled out, defaults included."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    argv, positional = [args.command], []
    for action in sub._actions:
        if action.dest == "help":
            continue
        value = getattr(args, action.dest)
        if not action.option_strings:
            positional.append(str(value))
        elif isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(action.option_strings[0])
        elif value is not None:
            if isinstance(value, list):
                value = ",".join(repr(float(v)) for v in value)
            argv += [action.option_strings[0], str(value)]
    return argv + positional


def write_manifest(path, command, argv, config, seed, duration):
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "version": __version__,
        "duration_seconds": duration,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, default=str)
        fh.write("\n")


def _run(parser, args):
    if args.command == "replay":
        with open(args.manifest, encoding="utf-8") as fh:
            argv = json.load(fh)["argv"]
        return main(argv)
    start = time.perf_counter()
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    _check_regime(canonical_regime(args.regime), args.mode)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyCalibrationWarning)
        config = COMMANDS[args.command](args)
    n_empty = sum(issubclass(w.category, EmptyCalibrationWarning) for w in caught)
    if n_empty:
        print(f"warning: {n_empty} p-value batch(es) touched empty calibration categories", file=sys.stderr)
    argv = resolved_argv(parser, args)
    write_manifest(args.out + ".manifest.json", args.command, argv, config, args.seed,
                   time.perf_counter() - start)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(parser, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, KeyError, InvalidStateError, OSError) as exc:
        print(f"{parser.prog}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
