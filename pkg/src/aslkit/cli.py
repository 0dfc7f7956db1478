"""Command-line entry point: ``aslkit <subcommand> ...``.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .autodiff import NumericalError
from .data_io import (
    ConfigError,
    FormatError,
    RunConfig,
    load_checkpoint,
    load_manifest,
    load_predictions,
    save_checkpoint,
    save_predictions,
)
from .metrics import MetricError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("aslkit")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key=value run config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    p.add_argument("--seed", type=int, help="overrides train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aslkit", description="Action-sensitivity temporal localization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    _common(p)
    p.add_argument("--mode", choices=("mq", "nlq"), default="mq")
    p.add_argument("--videos", type=int, default=250)
    p.add_argument("--val", type=int, default=50, help="how many of the videos go to the val split")
    p.add_argument("--length", type=int, default=256, help="time steps per video")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--noise", type=float, default=1.0)

    for name in ("train-mq", "train-nlq"):
        p = sub.add_parser(name, help=f"train a {name[6:].upper()} model")
        _common(p)
        p.add_argument("--data", type=Path, required=True, help="dataset manifest.json")

    p = sub.add_parser("predict", help="decode predictions from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", help="defaults to eval.split")

    for name in ("eval-mq", "eval-nlq"):
        p = sub.add_parser(name, help=f"evaluate a {name[5:].upper()} prediction file")
        _common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--predictions", type=Path, required=True)
        p.add_argument("--split", help="defaults to eval.split")

    p = sub.add_parser("ensemble", help="MQ: mean-logit over checkpoints; NLQ: top-5 merge of prediction files")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoints", type=Path, nargs="+")
    g.add_argument("--predictions", type=Path, nargs="+")
    p.add_argument("--split", help="defaults to eval.split")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, out_required=False)
    return parser


def resolve_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    run.apply_overrides(args.overrides)
    if args.seed is not None:
        run.set("train.seed", args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return run


def _eval_and_write(preds, samples, run, mode, out, threads, title):
    from .report import write_eval_report
    from .train import evaluate

    report = evaluate(preds, samples, run, mode, threads)
    write_eval_report(report, out, run.dumps(), figures=run["eval.figures"], title=title)
    print((out / "report.txt").read_text(), end="")
    return report


def cmd_synth(args, run: RunConfig) -> None:
    from .synth import SynthSpec, synth_generate

    try:
        spec = SynthSpec(
            n_videos=args.videos, n_val=args.val, T=args.length, D=args.dim, C=args.classes, noise=args.noise, mode=args.mode
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = run["train.seed"]
    manifest = synth_generate(seed, spec, args.out)
    print(f"wrote {len(manifest.videos)} videos to {args.out / 'manifest.json'}")


def cmd_train(args, run: RunConfig, mode: str) -> None:
    from .report import plot_training
    from .train import EpochRecord, decode_all, load_samples, predict_dense, train

    manifest = load_manifest(args.data)
    if manifest.mode != mode:
        raise UsageError(f"manifest is for {manifest.mode!r}, command expects {mode!r}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.txt")
    log_path = out / "train_log.tsv"
    with log_path.open("w") as fh:
        fh.write("\t".join(EpochRecord.COLUMNS) + "\n")

        def on_epoch(rec):
            fh.write(rec.row() + "\n")
            fh.flush()

        result = train(manifest, run, on_epoch=on_epoch)
    save_checkpoint(out / "model.aslm", result.model.config, result.parameters())
    if run["eval.figures"]:
        plot_training(result.history, out)
    print(f"checkpoint written to {out / 'model.aslm'}")
    if manifest.split(run["eval.split"]):
        samples = load_samples(manifest, run["eval.split"])
        preds = decode_all(predict_dense(result.model, samples, run["train.batch"]), run, mode)
        save_predictions(out / "predictions.tsv", preds)
        _eval_and_write(preds, samples, run, mode, out / "eval", args.threads, f"{mode} {run['eval.split']} after training")


def _checkpoint_model(path):
    from .train import model_from_params

    config, params = load_checkpoint(path)
    model, _ = model_from_params(config, params)
    return model


def cmd_predict(args, run: RunConfig) -> None:
    from .train import decode_all, load_samples, predict_dense

    manifest = load_manifest(args.data)
    model = _checkpoint_model(args.checkpoint)
    if model.config.mode != manifest.mode:
        raise UsageError(f"checkpoint is {model.config.mode!r}, manifest is {manifest.mode!r}")
    samples = load_samples(manifest, args.split or run["eval.split"])
    preds = decode_all(predict_dense(model, samples, run["train.batch"]), run, manifest.mode)
    args.out.mkdir(parents=True, exist_ok=True)
    save_predictions(args.out / "predictions.tsv", preds)
    run.save(args.out / "config.txt")
    print(f"{len(preds)} predictions written to {args.out / 'predictions.tsv'}")


def cmd_eval(args, run: RunConfig, mode: str) -> None:
    from .train import load_samples

    manifest = load_manifest(args.data)
    if manifest.mode != mode:
        raise UsageError(f"manifest is for {manifest.mode!r}, command expects {mode!r}")
    samples = load_samples(manifest, args.split or run["eval.split"])
    preds = load_predictions(args.predictions)
    _eval_and_write(preds, samples, run, mode, args.out, args.threads, f"{mode} {args.predictions}")


def cmd_ensemble(args, run: RunConfig) -> None:
    from .postprocess import ensemble_topk_merge
    from .train import decode_all, ensemble_dense, group_by_sample, load_samples, predict_dense

    manifest = load_manifest(args.data)
    samples = load_samples(manifest, args.split or run["eval.split"])
    mode = manifest.mode
    if args.checkpoints:
        if mode != "mq":
            raise UsageError("checkpoint ensembling (mean logits) is the MQ path; use --predictions for NLQ")
        models = [_checkpoint_model(p) for p in args.checkpoints]
        first = models[0].config
        for p, m in zip(args.checkpoints[1:], models[1:]):
            if m.config != first:
                raise UsageError(f"{p} has a different model config than {args.checkpoints[0]}")
        dense = ensemble_dense([predict_dense(m, samples, run["train.batch"]) for m in models])
        preds = decode_all(dense, run, mode)
    else:
        if mode != "nlq":
            raise UsageError("prediction-file ensembling (top-5 merge) is the NLQ path; use --checkpoints for MQ")
        per_file = [group_by_sample(load_predictions(p)) for p in args.predictions]
        preds = []
        for s in samples:
            preds.extend(ensemble_topk_merge([f.get(s.sample_id, []) for f in per_file]))
    args.out.mkdir(parents=True, exist_ok=True)
    save_predictions(args.out / "predictions.tsv", preds)
    _eval_and_write(preds, samples, run, mode, args.out, args.threads, f"{mode} ensemble")


def cmd_gradcheck(args, run: RunConfig) -> None:
    from .gradsuite import run_suite

    results = run_suite(run["train.seed"])
    lines = ["check\tworst_rel_error\tentries\tseconds"]
    lines += [f"{r.name}\t{r.worst:.3e}\t{r.checked}\t{r.seconds:.2f}" for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.tsv").write_text(text)
        run.save(args.out / "config.txt")
    print(text, end="")
    print(f"worst relative error: {max(r.worst for r in results):.3e}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = resolve_config(args)
        cmd = args.command
        if cmd == "synth":
            cmd_synth(args, run)
        elif cmd in ("train-mq", "train-nlq"):
            cmd_train(args, run, cmd[6:])
        elif cmd == "predict":
            cmd_predict(args, run)
        elif cmd in ("eval-mq", "eval-nlq"):
            cmd_eval(args, run, cmd[5:])
        elif cmd == "ensemble":
            cmd_ensemble(args, run)
        elif cmd == "gradcheck":
            cmd_gradcheck(args, run)
    except (ConfigError, UsageError) as exc:
        print(f"aslkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"aslkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, MetricError, OSError, ValueError) as exc:
        print(f"aslkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
