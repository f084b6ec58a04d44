"""Command line for point-cloud influence maps: gen, train, explain, eval.

Exit codes: 0 success, 2 usage or contract error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, network, xai
from .errors import ContractError, FormatError, ParseError

log = logging.getLogger("pointfbi")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3
POOLING_FLAGS = {"max": "max", "max_mean": "max_mean_concat"}
SUITES = ("perturb", "rotate", "outliers", "timing", "smoothness", "zerograd")


class UsageError(Exception):
    pass


def _echo(path: Path, command: str, args: argparse.Namespace) -> None:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, "params": params}, indent=2, default=str) + "\n")


def _say(**metrics) -> None:
    for k, v in metrics.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")


def _writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def cmd_gen(args) -> int:
    if args.points < data.MIN_GENERATED_POINTS:
        raise ContractError(f"--points must be at least {data.MIN_GENERATED_POINTS}, got {args.points}")
    if args.per_class < 1:
        raise ContractError("--per-class must be >= 1")
    out = Path(args.out)
    _writable_dir(out)
    _echo(out / "run.json", "gen", args)
    counts = data.save_dataset(out, args.per_class, args.points, args.seed, args.test_per_class)
    _say(train_files=counts["train"], test_files=counts["test"])
    return EXIT_OK


def _load_split(root: str, split: str) -> data.Dataset:
    if not Path(root, split).is_dir():
        raise UsageError(f"no {split!r} split under {root}; run `pointfbi gen` first")
    return data.load_dataset(root, split)


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise ContractError(f"--epochs must be >= 1, got {args.epochs}")
    train_set = _load_split(args.data, "train")
    test_set = _load_split(args.data, "test")
    out = Path(args.out)
    _echo(out.with_name(out.name + ".run.json"), "train", args)
    config = network.ModelConfig(pooling=POOLING_FLAGS[args.pooling])
    model = network.train(
        config,
        train_set,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        test=test_set,
        batch_size=args.batch_size,
        augment_rotations=args.augment_rotations,
    )
    network.save_model(model, out)
    _say(final_loss=model.info.losses[-1], test_acc=model.info.test_accuracy)
    return EXIT_OK


def cmd_explain(args) -> int:
    if args.method == "intgrad" and args.steps < 2:
        raise ContractError(f"--steps must be >= 2 for intgrad, got {args.steps}")
    model = network.load_model(args.model)
    pc = data.normalize(data.read_xyz(args.input))
    out = Path(args.out)
    _echo(out.with_name(out.name + ".run.json"), "explain", args)
    influence = xai.explain(model, pc, args.method, p=args.p, steps=args.steps, seed=args.seed)
    data.write_ply(pc, influence.scores, out)
    if args.scores:
        with open(args.scores, "w") as fh:
            fh.write("index,score\n")
            fh.writelines(f"{i},{s:.6f}\n" for i, s in enumerate(influence.scores))
    _say(points=pc.n, method=args.method, score_min=float(influence.scores.min()), score_max=float(influence.scores.max()))
    return EXIT_OK


def _suite_perturb(model, test, args, out):
    rows = []
    for method in args.methods.split(","):
        curve = evaluation.perturbation_test(model, test, method, p=args.p, steps=args.steps, seed=args.seed, jobs=args.jobs)
        (out / method).mkdir(exist_ok=True)
        evaluation.write_curve_csv(curve, out / method / "curve.csv")
        rows.append((f"auc_{method}", curve.auc))
    return rows


def _suite_rotate(model, test, args, out):
    res = evaluation.rotation_deviation(model, test, jobs=args.jobs)
    if res.warning:
        log.warning("more than 1%% of points excluded from delta")
    return [("delta", res.delta), ("delta_excluded_fraction", res.excluded_fraction)]


def _suite_outliers(model, test, args, out):
    study = evaluation.outlier_study(model, test, seed=args.seed, jobs=args.jobs)
    # severity -> count mapping is a synthetic stand-in (10 outliers per level), reported for the record
    rows = [("r_fraction", study.mean), ("outliers_per_severity_level", data.OUTLIERS_PER_SEVERITY)]
    rows += [(f"r_severity_{s}", v) for s, v in study.by_severity.items()]
    rows += [(f"accuracy_severity_{s}", v) for s, v in study.accuracy_by_severity.items()]
    return rows


def _suite_timing(model, test, args, out):
    # single execution stream so medians are meaningful
    res = evaluation.timing_bench(model, test[0], repeats=args.repeats, steps=args.steps)
    rows = [(f"median_ms_{m}", 1000 * t) for m, t in res.medians.items()]
    rows += [(f"fbi_speedup_vs_{m}", res.speedup(m)) for m in res.medians if m != "fbi"]
    return rows


def _suite_smoothness(model, test, args, out):
    def one(pc):
        g = data.build_knn_graph(pc, args.k)
        feats = network.features(model, pc)
        cp = xai.critical_points(feats)
        return (
            evaluation.smoothness_tv(xai.fbi(feats), g).tv,
            evaluation.smoothness_tv(cp, g),
            g.connected,
            0 < cp.scores.sum() < pc.n,
        )

    parts = evaluation._map(one, test, args.jobs)
    checked = [cp for _, cp, conn, mixed in parts if conn and mixed]
    return [
        ("tv_fbi", float(np.mean([p[0] for p in parts]))),
        ("tv_critical", float(np.mean([p[1].tv for p in parts]))),
        ("lemma_clouds_checked", len(checked)),
        ("lemma_min_max_jump", min((cp.max_jump for cp in checked), default=float("nan"))),
    ]


def _suite_zerograd(model, test, args, out):
    if model.config.pooling != "max":
        raise ContractError(
            "zerograd needs a pure max-pooling model; max_mean_concat spreads gradient to every point"
        )
    counts = evaluation._map(lambda pc: evaluation.zero_gradient_count(model, pc), test, args.jobs)
    bounds = [pc.n - model.config.n_features for pc in test]
    return [
        ("zero_grad_min", min(counts)),
        ("zero_grad_mean", float(np.mean(counts))),
        ("zero_grad_bound", min(bounds)),
        ("zero_grad_bound_holds_fraction", float(np.mean([c >= b for c, b in zip(counts, bounds)]))),
    ]


def cmd_eval(args) -> int:
    if args.jobs < 1:
        raise ContractError("--jobs must be >= 1")
    if args.suite == "timing":
        args.jobs = 1
    model = network.load_model(args.model)
    test = _load_split(args.data, "test")
    out = Path(args.out)
    _writable_dir(out)
    _echo(out / "run.json", "eval", args)
    suite = {
        "perturb": _suite_perturb,
        "rotate": _suite_rotate,
        "outliers": _suite_outliers,
        "timing": _suite_timing,
        "smoothness": _suite_smoothness,
        "zerograd": _suite_zerograd,
    }[args.suite]
    rows = suite(model, test, args, out)
    evaluation.write_report_csv(rows, out / "report.csv")
    _say(**dict(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointfbi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic primitive dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100, help="training clouds per class")
    p.add_argument("--test-per-class", type=int, default=None, help="defaults to per-class / 5")
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a classifier and write a PCXW file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment-rotations", action="store_true")
    p.add_argument("--pooling", choices=sorted(POOLING_FLAGS), default="max")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="color a cloud by per-point influence")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--method", required=True, choices=xai.METHODS)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", default=None, help="optional CSV of index,score")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="run an evaluation suite on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default="fbi,critical,gradient,intgrad,random")
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ContractError, UsageError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
