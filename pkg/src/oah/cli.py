"""Command-line entry point.

    oah gen-corpus --out-dir data
    oah train --corpus data --out-dir run --alpha 0.1 --epochs 15
    oah decode --corpus data --checkpoint run/model.ckpt --mode oah --beam 8 --out-dir dec
    oah ablate --corpus data --axis beam --checkpoint run/model.ckpt --values 1,5,10,50

Every command accepts ``--config FILE`` holding flat ``key=value`` lines
(keys are the long flag names with dashes or underscores); explicit flags
override the file.  The resolved settings are written to ``config.txt``
in the output directory and can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import encoder as E
from . import kernel as K
from .corpus import (Corpus, FeatureFormatError, GrammarError, VocabError, corpus_cer, load_corpus,
                     make_corpus, save_corpus, toy_grammar)
from .model import CheckpointError, load_checkpoint, save_checkpoint, toy_config
from .pipeline import MODES, decode
from .training import TrainConfig, TrainingDiverged, train_toy, write_metrics_csv

log = logging.getLogger("oah")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SUMMARY_FIELDS = ("mode", "beam", "streaming", "utterances", "cer", "rtf", "empty")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, args: argparse.Namespace) -> None:
    skip = {"command", "func", "config", "verbose"}
    lines = [f"{k}={_fmt(v)}\n" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]
    Path(path).write_text("".join(lines), encoding="utf-8")


def _fmt(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return ",".join(map(str, v))
    return str(v)


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _unit_float(text) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} outside [0, 1]")
    return v


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse once to find --config, load it as defaults, parse again."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    values = read_config(args.config)
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[key]
        conv = action.type or (_bool if isinstance(action, argparse._StoreTrueAction) else str)
        try:
            defaults[key] = conv(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _model_config(args, vocab_size: int, feat_dim: int):
    return toy_config(vocab_size=vocab_size, feat_dim=feat_dim, tau=args.tau, epsilon=args.epsilon,
                      d_model=args.d_model, heads=args.heads, enc_blocks=args.enc_blocks,
                      dec_blocks=args.dec_blocks, ffn_hidden=args.ffn_hidden, conv_channels=args.conv_channels)


def _load_corpus(path) -> Corpus:
    path = Path(path)
    if not (path / "vocab.txt").exists():
        raise DataError(f"{path}: not a corpus directory (vocab.txt missing)")
    return load_corpus(path)


def _check_compatible(p, corpus: Corpus, ckpt) -> None:
    v, d = len(corpus.vocab), None
    if p.config.vocab_size != v:
        raise DataError(f"{ckpt}: checkpoint vocab_size={p.config.vocab_size} but corpus vocab has {v} entries")
    for split in (corpus.train, corpus.dev, corpus.test):
        if split:
            d = split[0].features.shape[1]
            break
    if d is not None and p.config.feat_dim != d:
        raise DataError(f"{ckpt}: checkpoint feat_dim={p.config.feat_dim} but corpus features have dim {d}")


def cmd_gen_corpus(args) -> int:
    grammar = toy_grammar(homophones=not args.no_homophones)
    corpus = make_corpus(grammar, {"train": args.train_size, "dev": args.dev_size, "test": args.test_size},
                         noise=args.noise, seed=args.seed, feat_dim=args.feat_dim)
    out = Path(args.out_dir)
    save_corpus(out, corpus)
    write_config(out / "config.txt", args)
    log.info("wrote %d/%d/%d utterances to %s", len(corpus.train), len(corpus.dev), len(corpus.test), out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(alpha=args.alpha, lr_scale=args.lr_scale, warmup_steps=args.warmup,
                           epochs=args.epochs, batch_size=args.batch_size, avg_last_k=args.avg_last_k,
                           seed=args.seed, dev_beam=args.beam)
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(args) -> int:
    tc = _train_config(args)
    corpus = _load_corpus(args.corpus)
    if not corpus.train:
        raise DataError(f"{args.corpus}: empty training split")
    cfg = _model_config(args, len(corpus.vocab), corpus.train[0].features.shape[1])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", args)
    params, metrics = train_toy(corpus.train, corpus.dev, cfg, tc, out_dir=out / "epochs", resume=args.resume)
    save_checkpoint(out / "model.ckpt", params, meta={"train_config": dataclasses.asdict(tc),
                                                      "averaged": min(tc.avg_last_k, len(metrics))})
    write_metrics_csv(out / "metrics.csv", metrics)
    log.info("wrote %s", out / "model.ckpt")
    return EXIT_OK


def _decode_split(p, utts, args, mode, beam, sink=None, vocab=None):
    """Sequential decode (RTF methodology); returns ``(cer, rtf, empty)``."""
    pairs, audio, empty = [], 0.0, 0
    t0 = time.perf_counter()
    for u in utts:
        r = decode(p, u.features, mode, beam, score_eos=args.score_eos, ctc_interp=args.ctc_interp,
                   lam=args.interp_lambda, streaming=args.streaming)
        pairs.append((r.selected, u.transcript))
        audio += u.features.shape[0] * E.FRAME_SHIFT_MS / 1000.0
        empty += r.status != "ok"
        if sink is not None:
            sink.write(json.dumps(r.to_json(u.id, vocab)) + "\n")
    elapsed = time.perf_counter() - t0
    return corpus_cer(pairs), elapsed / audio if audio else float("nan"), empty


def cmd_decode(args) -> int:
    if args.streaming and args.mode != "oah":
        raise UsageError("--streaming applies to --mode oah only")
    corpus = _load_corpus(args.corpus)
    p, _, _ = load_checkpoint(args.checkpoint)
    _check_compatible(p, corpus, args.checkpoint)
    utts = corpus.split(args.split)
    if args.limit is not None:
        utts = utts[: args.limit]
    if not utts:
        raise DataError(f"{args.corpus}: split {args.split!r} is empty")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", args)
    with open(out / "nbest.jsonl", "w", encoding="utf-8") as fh:
        cer, rtf, empty = _decode_split(p, utts, args, args.mode, args.beam, fh, corpus.vocab)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        w.writerow([args.mode, args.beam, int(args.streaming), len(utts), f"{cer:.6f}", f"{rtf:.6f}", empty])
    log.info("%s beam %d: CER %.4f  RTF %.4f", args.mode, args.beam, cer, rtf)
    return EXIT_OK


def _run_dir(root: Path, axis: str, value) -> Path:
    return root / f"{axis}_{value}"


def cmd_ablate(args) -> int:
    corpus = _load_corpus(args.corpus)
    out = Path(args.out_dir)
    if args.axis == "beam":
        if args.checkpoint is None:
            raise UsageError("--axis beam needs --checkpoint")
        ckpts = {b: Path(args.checkpoint) for b in args.values}
    else:
        if args.runs_dir is None:
            raise UsageError(f"--axis {args.axis} needs --runs-dir")
        root = Path(args.runs_dir)
        ckpts = {v: _run_dir(root, args.axis, v) / "model.ckpt" for v in args.values}
        missing = [v for v, c in ckpts.items() if not c.exists()]
        if missing and not args.train_missing:
            lines = [f"  oah train --corpus {args.corpus} --{args.axis} {v} --out-dir {_run_dir(root, args.axis, v)}"
                     for v in missing]
            raise DataError("missing checkpoints; train them first (or pass --train-missing):\n" + "\n".join(lines))
        for v in missing:
            sub = argparse.Namespace(**vars(args))
            setattr(sub, args.axis, v)
            sub.out_dir = str(_run_dir(root, args.axis, v))
            sub.resume = False
            cmd_train(sub)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", args)
    fields = [args.axis] + (["latency_ms"] if args.axis == "epsilon" else [])
    fields += [f"{s}_cer_{m}" for s in ("dev", "test") for m in ("ops", "oah")] + ["rtf_ops", "rtf_oah"]
    rows = []
    for v, ckpt in ckpts.items():
        p, _, _ = load_checkpoint(ckpt)
        _check_compatible(p, corpus, ckpt)
        beam = v if args.axis == "beam" else args.beam
        row = {args.axis: v}
        if args.axis == "epsilon":
            row["latency_ms"] = E.latency_ms(p.config.encoder.epsilon)
        for split in ("dev", "test"):
            utts = corpus.split(split)[: args.limit] if args.limit else corpus.split(split)
            for mode in ("ops", "oah"):
                cer, rtf, _ = _decode_split(p, utts, args, mode, beam)
                row[f"{split}_cer_{mode}"] = f"{cer:.6f}"
                if split == "test":
                    row[f"rtf_{mode}"] = f"{rtf:.6f}"
        log.info("%s=%s  %s", args.axis, v, row)
        rows.append(row)
    with open(out / f"table_{args.axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")


def _model_flags(p):
    p.add_argument("--tau", type=int, default=10, help="left context, encoder frames")
    p.add_argument("--epsilon", type=int, default=5, help="future context, encoder frames")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--enc-blocks", type=int, default=3)
    p.add_argument("--dec-blocks", type=int, default=2)
    p.add_argument("--ffn-hidden", type=int, default=128)
    p.add_argument("--conv-channels", type=int, default=64)


def _train_flags(p):
    p.add_argument("--alpha", type=_unit_float, default=0.1, help="CTC weight in [0, 1]")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-scale", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=400)
    p.add_argument("--avg-last-k", type=int, default=5)


def _decode_flags(p):
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--score-eos", type=_bool, nargs="?", const=True, default=False,
                   help="include the end token in one-step scoring")
    p.add_argument("--ctc-interp", type=float, default=0.0, help="add this times the CTC log-prob when ranking OAH")
    p.add_argument("--interp-lambda", type=_unit_float, default=0.5, help="CTC weight in ns mode")
    p.add_argument("--streaming", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--limit", type=int, default=None, help="decode only the first N utterances")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="oah", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-corpus", help="write a synthetic homophone corpus")
    _common(g)
    g.add_argument("--train-size", type=int, default=2000)
    g.add_argument("--dev-size", type=int, default=200)
    g.add_argument("--test-size", type=int, default=300)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--feat-dim", type=int, default=40)
    g.add_argument("--no-homophones", type=_bool, nargs="?", const=True, default=False)
    g.set_defaults(func=cmd_gen_corpus)

    t = subs.add_parser("train", help="joint CTC/attention training")
    _common(t)
    t.add_argument("--corpus", required=True)
    _model_flags(t)
    _train_flags(t)
    t.add_argument("--beam", type=int, default=8, help="beam for per-epoch dev CER")
    t.add_argument("--resume", type=_bool, nargs="?", const=True, default=False)
    t.set_defaults(func=cmd_train)

    d = subs.add_parser("decode", help="decode a split, write N-best JSON lines and summary.csv")
    _common(d)
    d.add_argument("--corpus", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--split", default="test", choices=("train", "dev", "test"))
    d.add_argument("--mode", default="oah", choices=MODES)
    _decode_flags(d)
    d.set_defaults(func=cmd_decode)

    a = subs.add_parser("ablate", help="CER/RTF table along one axis")
    _common(a)
    a.add_argument("--corpus", required=True)
    a.add_argument("--axis", required=True, choices=("alpha", "epsilon", "beam"))
    a.add_argument("--values", required=True, type=_float_list)
    a.add_argument("--checkpoint", help="model for the beam axis")
    a.add_argument("--runs-dir", help="holds <axis>_<value>/model.ckpt for alpha/epsilon")
    a.add_argument("--train-missing", type=_bool, nargs="?", const=True, default=False)
    _model_flags(a)
    _train_flags(a)
    _decode_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser, {"gen-corpus": g, "train": t, "decode": d, "ablate": a}


def _normalize_values(args):
    if getattr(args, "command", None) == "ablate":
        if args.axis in ("epsilon", "beam"):
            if any(v != int(v) for v in args.values):
                raise UsageError(f"--values must be integers for axis {args.axis}")
            args.values = [int(v) for v in args.values]
        elif any(not 0.0 <= v <= 1.0 for v in args.values):
            raise UsageError("alpha values must lie in [0, 1]")


def main(argv=None) -> int:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cmd = next((a for a in argv if a in subs), None)
        args = _apply_config(parser, subs[cmd], argv) if cmd else parser.parse_args(argv)
        _normalize_values(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"oah: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"oah: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, FeatureFormatError, CheckpointError, VocabError, GrammarError) as exc:
        print(f"oah: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, K.NumericError, FloatingPointError) as exc:
        print(f"oah: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
