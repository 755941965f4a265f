"""Command-line entry point: ``unsupseg {synth,train,segment,tune,eval}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure.  Results go to stdout, diagnostics and the effective configuration
to stderr.  Every subcommand accepts ``--config FILE`` with flat
``key=value`` lines (keys are the long option names, ``-`` or ``_``);
explicit flags override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, ContractError, DataError, NumericError, UnsupSegError

log = logging.getLogger("unsupseg")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser():
    parser = _Parser(prog="unsupseg", description="Self-supervised phoneme boundary detection.")
    parser.add_argument("--version", action="version", version=f"unsupseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic annotated corpus with 80/10/10 manifests")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=_positive_int, default=200, help="number of utterances")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth, required=("out",))

    p = sub.add_parser("train", help="train an encoder")
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--val-manifest", help="validation manifest")
    p.add_argument("--out", help="output directory for model.ckpt, history.json, train.log")
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--neg-k", type=_positive_int, default=5, help="negatives per frame")
    p.add_argument("--crop-sec", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--proj-dim", type=_positive_int, default=64)
    p.add_argument("--channels", type=_positive_int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", help="write the loss curves to this image file")
    p.set_defaults(func=cmd_train, required=("manifest", "val_manifest", "out"))

    p = sub.add_parser("segment", help="predict boundaries for one WAV file")
    p.add_argument("--model")
    p.add_argument("--wav")
    p.add_argument("--delta", type=float)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--time-offset", type=float, default=0.0)
    p.add_argument("--dump-scores", help="write index/raw/normalized scores here")
    p.add_argument("--out", help="boundary file (default: stdout)")
    p.add_argument("--plot", help="write the score curve to this image file")
    p.add_argument("--annotation", help="gold .phn file to overlay on --plot")
    p.set_defaults(func=cmd_segment, required=("model", "wav", "delta"))

    p = sub.add_parser("tune", help="choose the peak threshold on an annotated manifest")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--grid", default="0:1:0.05", help="start:stop:step, inclusive")
    p.add_argument("--metric", choices=("rval", "f1"), default="rval")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--time-offset", type=float, default=0.0)
    p.add_argument("--include-edges", action="store_true")
    p.add_argument("--plot", help="write metric-vs-threshold curves to this image file")
    p.set_defaults(func=cmd_tune, required=("model", "manifest"))

    p = sub.add_parser("eval", help="evaluate predicted boundaries on an annotated manifest")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--delta", type=float)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--time-offset", type=float, default=0.0)
    p.add_argument("--include-edges", action="store_true")
    p.add_argument("--per-utterance", help="write per-utterance metric lines here")
    p.set_defaults(func=cmd_eval, required=("model", "manifest", "delta"))

    for p in sub.choices.values():
        p.add_argument("--config", help="flat key=value file of option defaults")
    return parser


def read_config_file(path, subparser):
    """Parse ``key=value`` lines, checking keys against ``subparser``."""
    actions = {a.dest: a for a in subparser._actions
               if a.dest not in ("help", "config") and a.option_strings}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        dest = key.strip().replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}:{lineno}: unknown key {key.strip()!r}")
        action, value = actions[dest], value.strip()
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{path}:{lineno}: {key.strip()} needs a boolean")
            values[dest] = value.lower() in ("true", "1", "yes")
        else:
            try:
                values[dest] = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key.strip()}: {exc}") from None
            if action.choices and values[dest] not in action.choices:
                raise ConfigError(f"{path}:{lineno}: {key.strip()} must be one of {action.choices}")
    return values


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise ConfigError("a subcommand is required (synth, train, segment, tune, eval)")
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**read_config_file(args.config, subparser))
        args = parser.parse_args(argv)
    missing = [name for name in args.required if getattr(args, name) is None]
    if missing:
        raise ConfigError("missing required option(s): "
                          + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def echo_config(args):
    seed = getattr(args, "seed", None)
    log.info("unsupseg %s command=%s seed=%s", __version__, args.command, seed)
    for key, value in sorted(vars(args).items()):
        if key in ("func", "required", "command"):
            continue
        log.info("config %s=%s", key, value)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        echo_config(args)
        return args.func(args) or 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ContractError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except UnsupSegError as exc:
        log.error("%s", exc)
        return EXIT_DATA


def _peak_params(args):
    from .segmenter import PeakParams
    return PeakParams(args.delta, not args.no_normalize, args.time_offset)


def cmd_synth(args):
    from .corpus import split_manifest, synth_corpus, write_manifest

    out = Path(args.out)
    manifest = synth_corpus(out / "wav", args.n, args.seed)
    for name, part in zip(("train", "val", "test"), split_manifest(manifest)):
        write_manifest(out / f"{name}.tsv", part.records)
        print(f"{name}\t{len(part)}\t{out / f'{name}.tsv'}")


def cmd_train(args):
    from .contrastive import TrainConfig, save_history, train
    from .corpus import load_corpus, read_manifest
    from .encoder import EncoderConfig, save_checkpoint

    config = TrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs,
                         K=args.neg_k, crop_seconds=args.crop_sec, patience=args.patience,
                         seed=args.seed)
    config.validate()
    enc_config = EncoderConfig(channels=args.channels, projection_dim=args.proj_dim)
    train_set = [w for _, w, _ in load_corpus(read_manifest(args.manifest))]
    val_set = [w for _, w, _ in load_corpus(read_manifest(args.val_manifest))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    log_path.write_text("epoch\ttrain_loss\tval_loss\tseconds\n")
    encoder, history = train(train_set, val_set, config, enc_config, log_path=log_path)
    save_checkpoint(encoder, out / "model.ckpt")
    save_history(history, out / "history.json")
    if args.plot:
        from .plots import plot_history
        plot_history(args.plot, history)
    print(f"checkpoint\t{out / 'model.ckpt'}")
    print(f"best_epoch\t{history.best_epoch}")
    print(f"best_val_loss\t{min(history.val_loss):.6f}")


def cmd_segment(args):
    from .corpus import load_wav, parse_annotation
    from .encoder import load_checkpoint
    from .segmenter import segment, write_boundaries, write_score_dump

    params = _peak_params(args)
    encoder = load_checkpoint(args.model)
    wav = load_wav(args.wav)
    times, raw = segment(encoder, wav, params)
    if args.out:
        write_boundaries(args.out, times)
    else:
        sys.stdout.write("".join(f"{t:.6f}\n" for t in times))
    if args.dump_scores:
        write_score_dump(args.dump_scores, raw)
    if args.plot:
        from .plots import plot_scores
        gold = parse_annotation(args.annotation).boundaries() if args.annotation else ()
        plot_scores(args.plot, raw, times, gold, encoder.config.hop_samples,
                    encoder.config.sample_rate, params.delta)


def cmd_tune(args):
    from .corpus import load_corpus, read_manifest
    from .encoder import load_checkpoint
    from .segmenter import delta_grid, tune_delta

    grid = delta_grid(args.grid)
    encoder = load_checkpoint(args.model)
    utterances = load_corpus(read_manifest(args.manifest), need_annotations=True)
    best, table = tune_delta(encoder, utterances, grid, args.tolerance, args.metric,
                             not args.no_normalize, args.time_offset, args.include_edges)
    print("delta\tP\tR\tF1\tOS\tR-value")
    for delta, rep in table:
        pc = rep.percentages()
        print(f"{delta:g}\t" + "\t".join(f"{v:.2f}" for v in pc.values()))
    best_rep = dict(table)[best]
    value = best_rep.r_value if args.metric == "rval" else best_rep.f1
    print(f"best_delta\t{best:g}")
    print(f"best_{args.metric}\t{100 * value:.2f}")
    if args.plot:
        from .plots import plot_tuning
        plot_tuning(args.plot, table, best)


def cmd_eval(args):
    from .corpus import load_corpus, read_manifest
    from .encoder import load_checkpoint
    from .metrics import evaluate_corpus, evaluate_per_utterance
    from .segmenter import add_edges, gold_map, segment

    params = _peak_params(args)
    encoder = load_checkpoint(args.model)
    utterances = load_corpus(read_manifest(args.manifest), need_annotations=True)
    pred = {}
    for key, wav, _ in utterances:
        times, _ = segment(encoder, wav, params)
        pred[key] = add_edges(times, wav.duration) if args.include_edges else times
    gold = gold_map(utterances, args.include_edges)
    report = evaluate_corpus(pred, gold, args.tolerance)
    print(report.table())
    print("\n".join(report.to_lines()))
    if args.per_utterance:
        per = evaluate_per_utterance(pred, gold, args.tolerance)
        rows = [f"{k}\t" + "\t".join(f"{v:.2f}" for v in rep.percentages().values())
                for k, rep in per.items()]
        Path(args.per_utterance).write_text("key\tP\tR\tF1\tOS\tR-value\n"
                                            + "".join(r + "\n" for r in rows))


if __name__ == "__main__":
    sys.exit(main())
