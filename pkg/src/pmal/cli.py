"""Command-line pipeline: synthetic data, training, mining, optimisation, evaluation.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys are
the long flag names, with dashes or underscores); flags given on the command
line override the file. Exit codes: 0 success, 2 usage or validation error,
1 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import backbone as bb
from .datastore import (
    AlignmentError,
    align_runs,
    ensure_parent,
    read_dataset,
    read_embedding_archive,
    write_dataset,
    write_embedding_archive,
)
from .idx import choose_known, load_mnist, make_osr_split
from .metric import build_metric
from .mining import PrototypeBook, filter_diverse
from .openset import evaluate, read_report
from .pipeline import PipelineConfig, continue_plain, run_pmal
from .protolearn import LossCurve, ProtoLossConfig, optimize_embedding
from .synthlab import SynthSpec, generate, holdout
from .uncertainty import reference_subsample, robustness, select_candidates

log = logging.getLogger("pmal")


class UsageError(ValueError):
    """Invalid flags, config values or inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser: argparse.ArgumentParser, config: dict) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects true/false, got {value!r}")
            defaults[key] = low in _TRUE
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in value.split()]
        else:
            defaults[key] = value  # argparse converts string defaults with the action's type
    parser.set_defaults(**defaults)


def _check_choices(parser: argparse.ArgumentParser, args) -> None:
    for action in parser._actions:
        if action.choices is not None and getattr(args, action.dest, None) is not None:
            if getattr(args, action.dest) not in action.choices:
                raise UsageError(f"{action.dest} must be one of {sorted(action.choices)}")


# ---------------------------------------------------------------------------
# shared flag groups


def _common(p):
    p.add_argument("--config", help="file of 'key = value' lines; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p, epochs=30):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--lr-decay-every", type=int, default=20)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=16)


def _proto_flags(p):
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--lambda-p", type=float, default=1.0)
    p.add_argument("--distance", choices=["attention", "nearest"], default="attention")
    p.add_argument("--refresh", choices=["per_step", "per_epoch"], default="per_step")


def _mining_flags(p):
    p.add_argument("--epsilon", type=float, default=0.7)
    p.add_argument("--prototypes", type=int, default=10)
    p.add_argument("--normalize-gap", action="store_true", help="divide topology gaps by sqrt(|reference|)")
    p.add_argument("--reference-size", type=int, default=None)


def _train_config(args, seed=None, epochs=None) -> bb.TrainConfig:
    return bb.TrainConfig(
        epochs=args.epochs if epochs is None else epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_decay_every=args.lr_decay_every,
        rng_seed=args.seed if seed is None else seed,
        hidden_dim=args.hidden_dim,
        embed_dim=args.embed_dim,
    )


def _proto_config(args) -> ProtoLossConfig:
    return ProtoLossConfig(
        margin=args.margin, weight=args.lambda_p, distance_mode=args.distance, refresh_policy=args.refresh
    )


def _check_mining(args):
    if not 0 < args.epsilon <= 1:
        raise UsageError(f"epsilon must be in (0, 1], got {args.epsilon}")
    if args.prototypes < 1:
        raise UsageError(f"prototypes must be >= 1, got {args.prototypes}")
    if args.threads < 1:
        raise UsageError("threads must be >= 1")


def _validated(build, names):
    """Run a config constructor, re-raising its ValueError in terms of CLI keys."""
    try:
        return build()
    except ValueError as exc:
        msg = str(exc)
        for field, key in names.items():
            msg = msg.replace(field, key)
        raise UsageError(f"invalid config: {msg}") from exc


_TRAIN_NAMES = {"learning_rate": "lr", "rng_seed": "seed"}
_PROTO_NAMES = {"weight": "lambda_p", "distance_mode": "distance", "refresh_policy": "refresh"}


def _existing(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args):
    names = {
        "degraded_fraction": "q",
        "class_mean_radius": "radius",
        "modes_per_class": "modes",
        "rng_seed": "seed",
    }
    spec = _validated(
        lambda: SynthSpec(
            k_known=args.k_known,
            k_unknown=args.k_unknown,
            feature_dim=args.feature_dim,
            samples_per_class=args.samples_per_class,
            class_mean_radius=args.radius,
            sigma_lo=args.sigma_lo,
            sigma_hi=args.sigma_hi,
            degraded_fraction=args.q,
            modes_per_class=args.modes,
            mode_spread=args.mode_spread,
            rng_seed=args.seed,
        ),
        names,
    )
    if not 0 <= args.test_fraction < 1:
        raise UsageError(f"invalid config: test_fraction must be in [0, 1), got {args.test_fraction}")
    if spec.k_unknown < 1:
        raise UsageError("invalid config: k_unknown must be >= 1 for an open-set split")
    known, unknown, truth = generate(spec)
    train, test = holdout(known, args.test_fraction, args.seed)
    out = Path(args.out)
    write_dataset(train, out / "train", args.force)
    write_dataset(test, out / "known_test", args.force)
    write_dataset(unknown, out / "unknown_test", args.force)
    truth.write_csv(out / "truth.csv")
    print(f"wrote {train.n} train, {test.n} known test, {unknown.n} unknown test samples to {out}")


def cmd_train(args):
    data = read_dataset(_existing(args.dataset, "dataset"))
    cfg = _validated(lambda: _train_config(args), _TRAIN_NAMES)
    model = bb.train_classifier(data, cfg)
    acc = bb.accuracy(model, data)
    loss = bb.dataset_loss(model, data)
    out = Path(args.out)
    bb.save_model(model, out / "checkpoint", args.force)
    write_embedding_archive(bb.extract_embedding_space(model, data, args.run_id), out / "archive", args.force)
    ensure_parent(out / "train.log").write_text(
        f"seed = {cfg.rng_seed}\nepochs = {cfg.epochs}\nfinal_loss = {loss:.6f}\nfinal_accuracy = {acc:.6f}\n",
        encoding="utf-8",
    )
    print(f"training accuracy = {acc:.4f}, loss = {loss:.4f}")


def cmd_mine(args):
    _check_mining(args)
    data = read_dataset(_existing(args.dataset, "dataset"))
    if len(args.archives) < 2:
        raise UsageError("mining needs at least two archives (--archives A B ...)")
    spaces = [read_embedding_archive(_existing(p, "archive")) for p in args.archives]
    bundle = align_runs(spaces)
    if spaces[0].source_checksum != data.checksum() or spaces[0].n != data.n:
        raise AlignmentError("archives were not extracted from this dataset")
    if not 1 <= args.mining_run <= len(spaces):
        raise UsageError(f"mining_run must be in 1..{len(spaces)}")
    metrics = [build_metric(s) for s in spaces]
    reference = None if args.reference_size is None else reference_subsample(data.n, args.reference_size, args.seed)
    table = robustness(bundle, metrics, reference, data.ids, args.normalize_gap, args.threads)
    cands = select_candidates(table, data, args.epsilon)
    run = args.mining_run - 1
    book = filter_diverse(cands, spaces[run], metrics[run], args.prototypes, args.threads)
    out = Path(args.out)
    table.write_csv(out / "robustness.csv", data.labels)
    book.write_csv(out / "book.csv")
    sizes = ", ".join(f"{k}:{len(book.ids(k))}" for k in book.classes)
    print(f"prototypes per class {sizes}")


def cmd_optimize(args):
    data = read_dataset(_existing(args.dataset, "dataset"))
    model = bb.load_model(_existing(args.checkpoint, "checkpoint"))
    book = PrototypeBook.read_csv(_existing(args.book, "book"))
    cfg = _validated(lambda: _train_config(args, seed=args.seed), _TRAIN_NAMES)
    proto = _validated(lambda: _proto_config(args), _PROTO_NAMES)
    curve = LossCurve()
    tuned = optimize_embedding(model, data, book, cfg, proto, curve)
    out = Path(args.out)
    bb.save_model(tuned, out / "checkpoint", args.force)
    curve.write_csv(out / "loss.csv")
    totals = np.array([row[3] for row in curve.rows])
    if len(totals):
        tenth = max(1, len(totals) // 10)
        first, last = totals[:tenth].mean(), totals[-tenth:].mean()
        trend = "decreasing" if last < first else "not decreasing"
        log.info("loss trend: first %.4f last %.4f (%s)", first, last, trend)
        print(f"loss trend: first = {first:.4f}, last = {last:.4f} ({trend})")


def _report_files(report, out: Path, force: bool):
    for name in ("report.txt", "roc.csv", "roc.svg"):
        if (out / name).exists() and not force:
            raise FileExistsError(f"{out / name} exists; pass --force to overwrite")
    report.write(out / "report.txt")
    report.write_roc_csv(out / "roc.csv")
    report.write_roc_svg(out / "roc.svg")


def cmd_eval(args):
    model = bb.load_model(_existing(args.checkpoint, "checkpoint"))
    known = read_dataset(_existing(args.known_test, "known-test"))
    unknown = read_dataset(_existing(args.unknown_test, "unknown-test"))
    book = train = None
    if args.rule == "dr":
        book = PrototypeBook.read_csv(_existing(args.book, "book"))
        train = read_dataset(_existing(args.train_dataset, "train-dataset"))
    report = evaluate(model, known, unknown, args.rule, book, train, args.distance)
    _report_files(report, Path(args.out), args.force)
    print(report.as_text(), end="")


def _mnist_split(args, seed):
    train_x, train_y, test_x, test_y = load_mnist(_existing(args.raw, "raw"))
    known = args.known if args.known else choose_known(seed)
    return known, make_osr_split(train_x, train_y, test_x, test_y, known, seed, args.per_class, args.test_per_class)


def cmd_ingest_mnist(args):
    known, (train, known_test, unknown_test) = _mnist_split(args, args.seed)
    out = Path(args.out)
    write_dataset(train, out / "train", args.force)
    write_dataset(known_test, out / "known_test", args.force)
    write_dataset(unknown_test, out / "unknown_test", args.force)
    ensure_parent(out / "known_classes.txt").write_text(" ".join(map(str, known)) + "\n", encoding="utf-8")
    print(f"known classes {known}: {train.n} train, {known_test.n} known test, {unknown_test.n} unknown test")


def summary_lines(reports: dict) -> list:
    """``name_metric = mean ± std (n=...)`` for each report series."""
    lines = []
    for name, series in reports.items():
        for metric in ("auroc", "accuracy"):
            vals = np.array([r[metric] for r in series], dtype=float)
            lines.append(f"{name}_{metric} = {vals.mean():.4f} ± {vals.std():.4f} (n={len(vals)})")
    return lines


def cmd_protocol(args):
    """Full pipeline plus softmax baseline over several seeds/splits, with a mean ± std summary."""
    _check_mining(args)
    if args.seeds < 1:
        raise UsageError("seeds must be >= 1")
    train_cfg = _validated(lambda: _train_config(args), _TRAIN_NAMES)
    proto = _validated(lambda: _proto_config(args), _PROTO_NAMES)
    cfg = PipelineConfig(
        train=train_cfg,
        optimize_epochs=args.optimize_epochs,
        optimize_lr_decay_every=args.optimize_lr_decay_every,
        proto=proto,
        runs=args.runs,
        epsilon=args.epsilon,
        prototypes=args.prototypes,
        normalize_gap=args.normalize_gap,
        reference_size=args.reference_size,
        threads=args.threads,
    )
    if args.runs < 2:
        raise UsageError("runs must be >= 2")
    if (args.raw is None) == (args.data is None):
        raise UsageError("give exactly one of --raw (MNIST IDX directory) or --data (split directory)")
    out = Path(args.out)
    series = {"pmal_dr": [], "pmal_pr": [], "baseline_pr": []}
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        if args.raw is not None:
            _, (train, known_test, unknown_test) = _mnist_split(args, seed)
        else:
            root = _existing(args.data, "data")
            train, known_test, unknown_test = (read_dataset(root / n) for n in ("train", "known_test", "unknown_test"))
        result = run_pmal(train, cfg, seed)
        baseline = continue_plain(result.mining.models[0], train, cfg, seed, result.mining.book)
        book = result.mining.book
        reports = {
            "pmal_dr": evaluate(result.model, known_test, unknown_test, "dr", book, train, proto.distance_mode),
            "pmal_pr": evaluate(result.model, known_test, unknown_test, "pr"),
            "baseline_pr": evaluate(baseline, known_test, unknown_test, "pr"),
        }
        for name, rep in reports.items():
            _report_files(rep, out / f"seed_{seed}" / name, args.force)
            series[name].append({"auroc": rep.auroc, "accuracy": rep.closed_set_accuracy})
        result.curve.write_csv(out / f"seed_{seed}" / "loss.csv")
        print(f"seed {seed}: " + ", ".join(f"{n} auroc {r.auroc:.4f}" for n, r in reports.items()))
    lines = summary_lines(series)
    ensure_parent(out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_summarize(args):
    groups = {}
    for path in args.reports:
        rep = read_report(_existing(path, "report"))
        groups.setdefault(str(rep.get("rule", "report")), []).append(rep)
    lines = summary_lines(groups)
    if args.out:
        ensure_parent(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="pmal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-synth"] = sub.add_parser("gen-synth", help="generate a synthetic open-set dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--k-known", type=int, default=10)
    p.add_argument("--k-unknown", type=int, default=5)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--sigma-lo", type=float, default=0.5)
    p.add_argument("--sigma-hi", type=float, default=2.5)
    p.add_argument("--q", type=float, default=0.3, help="fraction of degraded samples per class")
    p.add_argument("--modes", type=int, default=1)
    p.add_argument("--mode-spread", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_synth)

    p = subs["train"] = sub.add_parser("train", help="train one backbone run and export its embedding archive")
    _common(p)
    _train_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run-id", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = subs["mine"] = sub.add_parser("mine", help="mine prototypes from two or more embedding archives")
    _common(p)
    _mining_flags(p)
    p.add_argument("--archives", nargs="+", required=True)
    p.add_argument("--dataset", required=True, help="the dataset the archives were extracted from")
    p.add_argument("--mining-run", type=int, default=1, help="archive (1-based) whose space ranks diversity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = subs["optimize"] = sub.add_parser("optimize", help="continue training with the prototype loss")
    _common(p)
    _train_flags(p, epochs=20)
    _proto_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--book", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize)

    p = subs["eval"] = sub.add_parser("eval", help="known/unknown evaluation with PR or DR")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--known-test", required=True)
    p.add_argument("--unknown-test", required=True)
    p.add_argument("--rule", choices=["pr", "dr"], default="dr")
    p.add_argument("--distance", choices=["attention", "nearest"], default="attention")
    p.add_argument("--book")
    p.add_argument("--train-dataset", help="dataset holding the prototype samples (DR only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    def mnist_flags(p):
        p.add_argument("--known", type=int, nargs="+", help="known digit classes (default: seeded choice of 4)")
        p.add_argument("--per-class", type=int, default=None, help="training samples per known class")
        p.add_argument("--test-per-class", type=int, default=None)

    p = subs["ingest-mnist"] = sub.add_parser("ingest-mnist", help="convert raw MNIST IDX files to an open-set split")
    _common(p)
    mnist_flags(p)
    p.add_argument("--raw", required=True, help="directory with the four MNIST IDX files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest_mnist)

    p = subs["protocol"] = sub.add_parser("protocol", help="multi-seed pipeline vs softmax baseline with summary")
    _common(p)
    _train_flags(p)
    _proto_flags(p)
    _mining_flags(p)
    mnist_flags(p)
    p.add_argument("--raw", help="MNIST IDX directory (a fresh split per seed)")
    p.add_argument("--data", help="directory with train/known_test/unknown_test datasets")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--optimize-epochs", type=int, default=20)
    p.add_argument("--optimize-lr-decay-every", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_protocol)

    p = subs["summarize"] = sub.add_parser("summarize", help="mean ± std over report files")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_summarize)
    return parser, subs


def _parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sp = subs[args.command]
        _apply_config(sp, read_config(args.config))
        args = parser.parse_args(argv)
        _check_choices(sp, args)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"pmal: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except bb.TrainingDiverged as exc:
        print(f"pmal: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, FileExistsError) as exc:
        print(f"pmal: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ArithmeticError) as exc:
        print(f"pmal: runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
