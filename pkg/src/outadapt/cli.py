"""Command-line entry point: ``outadapt <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical abort.
"""
import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcheck, metrics, report, synth
from .exceptions import ConfigurationError, DataError, NumericalError
from .trainer import GAN_OBJECTIVES, MODES, TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("outadapt")


class UsageError(Exception):
    pass


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def read_config_file(path):
    """``key=value`` lines; keys may use dashes or underscores, ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


# --- gen-data ---------------------------------------------------------------


def cmd_gen_data(args):
    if args.size % 8 or args.size < 8:
        raise UsageError(f"--size {args.size} must be a positive multiple of 8")
    if not 3 <= args.classes <= 8:
        raise UsageError(f"--classes {args.classes} must be between 3 and 8")
    src = synth.SOURCE_STYLE
    tgt = synth.TARGET_STYLE
    if args.source_brightness is not None:
        src = replace(src, brightness=args.source_brightness)
    if args.target_brightness is not None:
        tgt = replace(tgt, brightness=args.target_brightness)
    if args.target_gamma is not None:
        tgt = replace(tgt, gamma=args.target_gamma)
    if args.noise is not None:
        src, tgt = replace(src, noise=args.noise), replace(tgt, noise=args.noise)
    if args.texture is not None:
        src, tgt = replace(src, texture=args.texture), replace(tgt, texture=args.texture)
    splits = synth.make_splits(seed=args.seed, n_source=args.n_source, n_target=args.n_target,
                               n_test=args.n_test, size=args.size, n_classes=args.classes,
                               source_style=src, target_style=tgt)
    manifest = synth.write_splits(args.out, splits)
    print(f"wrote {sum(len(v) for v in splits.values())} samples, manifest {manifest}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _infer_classes(data, split):
    samples = synth.load_split(data, split, with_labels=False)
    if not samples:
        raise ConfigurationError(f"split {split!r} under {data} is empty")
    return samples[0].n_classes


def config_from_args(args):
    n_classes = args.classes or _infer_classes(args.data, args.source_split)
    return TrainConfig(
        mode=args.mode, gan=args.gan,
        lambda_seg=tuple(args.lambda_seg) if args.lambda_seg else None,
        lambda_adv=tuple(args.lambda_adv) if args.lambda_adv else None,
        total_steps=args.steps, seed=args.seed, lr_g=args.lr_g, lr_d=args.lr_d,
        n_classes=n_classes, widths=tuple(args.widths),
        checkpoint_interval=args.checkpoint_interval, data=args.data,
        source_split=args.source_split, target_split=args.target_split, out=args.out,
        log_timing=not args.deterministic)


def cmd_train(args):
    config = config_from_args(args)
    trainer, logs = train(config)
    if logs:
        last = logs[-1]
        parts = [f"step {last.step}"]
        parts += [f"seg{i + 1}={v:.4f}" for i, v in enumerate(last.seg)]
        parts += [f"adv{i + 1}={v:.4f}" for i, v in enumerate(last.adv)]
        parts += [f"d{i + 1}={v:.4f}" for i, v in enumerate(last.d)]
        print("final: " + " ".join(parts))
    print(f"checkpoint: {Path(config.out) / 'final.oack'}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------

_TUPLE_FIELDS = {"lambda_seg", "lambda_adv", "widths", "betas"}


def config_from_manifest(path):
    """Rebuild a TrainConfig from a run manifest written by ``train``."""
    values = report.read_manifest(path)
    if not values:
        raise FileNotFoundError(f"run manifest {path} not found or empty")
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.name in _TUPLE_FIELDS:
            kwargs[f.name] = tuple(_floats(raw))
        elif f.name == "log_timing":
            kwargs[f.name] = raw == "True"
        elif isinstance(f.default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(f.default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw or None
    if "widths" in kwargs:
        kwargs["widths"] = tuple(int(v) for v in kwargs["widths"])
    return TrainConfig(**kwargs)


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    config = config_from_manifest(ckpt.parent / "manifest.txt")
    trainer = load_checkpoint(ckpt, config, force=args.force)
    samples = synth.load_split(args.data, args.split)
    rep = metrics.evaluate(trainer.G, samples)
    text = rep.to_csv()
    out = Path(args.out) if args.out else ckpt.parent / "report.csv"
    out.write_text(text)
    sys.stdout.write(text)
    if args.oracle_report:
        oracle = metrics.IoUReport.from_csv(Path(args.oracle_report).read_text())
        baseline = ""
        if args.baseline_report:
            baseline = f"{metrics.IoUReport.from_csv(Path(args.baseline_report).read_text()).miou:.6f}"
        gap = metrics.miou_gap(rep, oracle)
        gap_text = f"baseline,adapted,oracle,gap\n{baseline},{rep.miou:.6f},{oracle.miou:.6f},{gap:.6f}\n"
        (out.parent / "gap.csv").write_text(gap_text)
        sys.stdout.write(gap_text)
    return EXIT_OK


# --- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args):
    ops = [o for chunk in (args.ops or []) for o in chunk.split(",") if o]
    try:
        results = gradcheck.run(ops or None, seeds=(args.seed, args.seed + 1, args.seed + 2),
                                n_coords=args.coords)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else 1


# --- report -----------------------------------------------------------------


def cmd_report(args):
    missing = [p for p in args.logs if not report.resolve_log(p).exists()]
    if missing:
        raise FileNotFoundError(f"log(s) not found: {', '.join(map(str, missing))}")
    summary = report.build_report(args.logs, args.out, deterministic=args.deterministic)
    print(f"wrote {len(summary)} run(s) to {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="outadapt", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write source/target synthetic splits")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--n-source", type=int, default=200)
    g.add_argument("--n-target", type=int, default=200)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--source-brightness", type=float)
    g.add_argument("--target-brightness", type=float)
    g.add_argument("--target-gamma", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--texture", type=float)
    g.set_defaults(func=cmd_gen_data)

    defaults = TrainConfig()
    t = sub.add_parser("train", help="train G (and discriminators) on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=MODES, default=defaults.mode)
    t.add_argument("--gan", choices=GAN_OBJECTIVES, default=defaults.gan)
    t.add_argument("--lambda-adv", type=float, nargs="+", help="one weight per level")
    t.add_argument("--lambda-seg", type=float, nargs="+", help="one weight per level")
    t.add_argument("--steps", type=int, default=defaults.total_steps)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr-g", type=float, default=defaults.lr_g)
    t.add_argument("--lr-d", type=float, default=defaults.lr_d)
    t.add_argument("--classes", type=int, help="defaults to the dataset's class count")
    t.add_argument("--widths", type=int, nargs=5, default=list(defaults.widths))
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--source-split", default=defaults.source_split)
    t.add_argument("--target-split", default=defaults.target_split)
    t.add_argument("--deterministic", action="store_true", help="leave the ms column empty")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="IoU report of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="target_test")
    e.add_argument("--out", help="report CSV (default: next to the checkpoint)")
    e.add_argument("--oracle-report", help="report CSV of the oracle run; appends the mIoU gap")
    e.add_argument("--baseline-report", help="report CSV of the source-only run for the gap table")
    e.add_argument("--force", action="store_true", help="ignore a config-hash mismatch")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ops", nargs="*", help="restrict to these ops")
    c.add_argument("--coords", type=int, default=gradcheck.MIN_COORDS)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="learning curves and comparison tables")
    r.add_argument("--logs", nargs="+", required=True, help="run directories or train_log.csv files")
    r.add_argument("--out", required=True)
    r.add_argument("--deterministic", action="store_true", help="omit timestamps")
    r.set_defaults(func=cmd_report)
    p.commands = {"gen-data": g, "train": t, "eval": e, "gradcheck": c, "report": r}
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    for action in parser.commands.values():
        dests = {a.dest: a for a in action._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in dests:
                continue
            a = dests[key]
            if a.nargs in ("+", "*") or isinstance(a.nargs, int):
                conv = a.type or str
                defaults[key] = [conv(v) for v in raw.replace(",", " ").split()]
            elif a.const is True and a.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes")
            else:
                defaults[key] = (a.type or str)(raw)
            if a.required:
                a.required = False
        action.set_defaults(**defaults)


def _thread_limit():
    raw = os.environ.get("OUTADAPT_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"OUTADAPT_THREADS must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise UsageError(f"OUTADAPT_THREADS must be a positive integer, got {raw!r}")
    return threads


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (UsageError, ValueError) as exc:
        print(f"outadapt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"outadapt: {exc}", file=sys.stderr)
        return EXIT_IO
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _thread_limit()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigurationError, DataError) as exc:
        print(f"outadapt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"outadapt: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"outadapt: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
