"""Command-line front end: generate, train, decode, eval, inspect-attention, average, compare.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
Set ``STBD_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import experiments as X
from .config import RunConfig
from .data import (CmvnStats, cer, edit_distance, generate_toy_corpus, load_corpus,
                   save_corpus)
from .decode import (capture_attention, decode_utterance, monotone_steps, write_attention_csv,
                     write_pgm)
from .errors import ConfigError, DataError, NumericError, STBDError, UsageError
from .model import L2R, R2L, Transformer, load_checkpoint, write_checkpoint
from .train import average_checkpoints, fit, prepare, read_curve, select_best

log = logging.getLogger("stbd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DECODE_MODES = {"bidirectional": "bidirectional", "bs-l2r": "l2r", "bs-r2l": "r2l"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it through exit code 1 instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(x):
    return f"{x:.6g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_corpus(cfg, splits):
    root = Path(cfg.corpus_dir)
    corpus = load_corpus(root, splits)
    stats_path = root / "cmvn.bin"
    if not stats_path.exists():
        raise DataError(f"{stats_path} missing")
    stats = CmvnStats.load(stats_path)
    return corpus, stats


def _check_model_fits(model_cfg, corpus, stats, what):
    if model_cfg.vocab_size != len(corpus.vocab):
        raise DataError(f"{what} expects {model_cfg.vocab_size} tokens but the corpus vocabulary has "
                        f"{len(corpus.vocab)}")
    if model_cfg.d_in != 3 * len(stats.mean):
        raise DataError(f"{what} expects {model_cfg.d_in // 3}-dim frames but the corpus has {len(stats.mean)}")


def _load_model(path, corpus, stats):
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    model, meta = load_checkpoint(path)
    _check_model_fits(model.cfg, corpus, stats, f"checkpoint {path}")
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg, args):
    out = Path(args.out or cfg.corpus_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    corpus = generate_toy_corpus(**cfg.corpus_kwargs())
    try:
        save_corpus(corpus, out)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    sizes = " ".join(f"{k}={len(v)}" for k, v in corpus.splits.items())
    print(f"wrote corpus to {out}: {sizes} vocab={len(corpus.vocab)}")
    return EXIT_OK


def cmd_train(cfg, args):
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    corpus, stats = _load_corpus(cfg, ("train", "dev"))
    model_cfg = cfg.model_config(len(corpus.vocab))
    if cfg.vocab_size + 5 != len(corpus.vocab):
        raise DataError(f"config vocab_size={cfg.vocab_size} but corpus has {len(corpus.vocab) - 5} content tokens")
    _check_model_fits(model_cfg, corpus, stats, "config")
    out = Path(args.out or cfg.out_dir)
    model = Transformer(model_cfg)
    state = fit(model, prepare(corpus["train"], stats), prepare(corpus["dev"], stats), out,
                cfg.train_config(), cfg.optimizer_config(), cfg.loss_config(), cfg.decode_config())
    best = select_best(state.history, cfg.best_n)
    print(f"trained {cfg.mode} for {state.epoch} epochs ({state.step} steps); "
          f"averaged epochs {','.join(map(str, best))} into {out / 'averaged.ckpt'}")
    return EXIT_OK


def cmd_decode(cfg, args):
    corpus, stats = _load_corpus(cfg, (args.split,))
    model, _ = _load_model(args.checkpoint, corpus, stats)
    mode = DECODE_MODES[args.mode] if args.mode else cfg.decode_mode
    dcfg = cfg.decode_config(mode=mode, beam_size=args.beam or cfg.beam_size)
    items = prepare(corpus[args.split], stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = corpus.vocab
    if args.beam_sweep:
        rows = X.beam_sweep(model, items, dcfg, jobs=args.jobs)
        _write_csv(out / "beam_sweep.csv", ["beam", "cer", "backward_fraction"],
                   [[r["beam"], _fmt(r["cer"]), _fmt(r["backward_fraction"])] for r in rows])
        for r in rows:
            print(f"beam {r['beam']}: cer {_fmt(r['cer'])} backward_fraction {_fmt(r['backward_fraction'])}")
        return EXIT_OK
    results = X.decode_items(model, items, dcfg, jobs=args.jobs)
    _write_csv(out / "hyps.csv", ["utt_id", "direction", "penalized_score", "raw_score", "hypothesis"],
               [[r.utt_id, r.direction, _fmt(r.penalized), _fmt(r.raw), " ".join(vocab.decode(r.tokens))]
                for r in results])
    # full-precision sidecar for exact comparisons
    with open(out / "scores_full.txt", "w") as fh:
        for r in results:
            fh.write(f"{r.utt_id} {r.penalized!r} {r.raw!r}\n")
    back = X.backward_fraction(results)
    print(f"decoded {len(results)} utterances mode={mode} beam={dcfg.beam_size} "
          f"cer={_fmt(X.decoded_cer(results))} backward_fraction={_fmt(back)} forward_fraction={_fmt(1 - back)}")
    return EXIT_OK


def _read_transcripts(path, column):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "utt_id" not in reader.fieldnames or column not in reader.fieldnames:
                raise DataError(f"{path}: expected columns utt_id and {column}")
            rows = {}
            for r in reader:
                if r["utt_id"] in rows:
                    raise DataError(f"{path}: duplicate utterance id {r['utt_id']}")
                rows[r["utt_id"]] = r[column].split()
            return rows
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_eval(cfg, args):
    refs = _read_transcripts(args.ref, "transcript")
    hyps = _read_transcripts(args.hyp, "hypothesis")
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing hypotheses for: " + ", ".join(missing))
        if extra:
            parts.append("no reference for: " + ", ".join(extra))
        raise DataError("; ".join(parts))
    ids = {}
    as_ids = lambda words: [ids.setdefault(w, len(ids)) for w in words]
    rows, errs, total = [], 0, 0
    for uid in sorted(refs):
        ref, hyp = as_ids(refs[uid]), as_ids(hyps[uid])
        if not ref:
            raise DataError(f"{uid}: empty reference")
        e = edit_distance(ref, hyp)
        errs += e
        total += len(ref)
        rows.append([uid, len(ref), e, _fmt(cer(ref, hyp))])
    if args.out:
        _write_csv(args.out, ["utt_id", "ref_len", "edits", "cer"], rows)
    print(f"utterances={len(rows)} edits={errs} ref_tokens={total} corpus_cer={_fmt(errs / total)}")
    return EXIT_OK


def cmd_inspect_attention(cfg, args):
    splits = (args.split,) if args.split else ("train", "dev", "test")
    corpus, stats = _load_corpus(cfg, splits)
    match = [u for s in splits for u in corpus[s] if u.utt_id == args.utt]
    if not match:
        raise DataError(f"utterance {args.utt} not found in {', '.join(splits)}")
    model, _ = _load_model(args.checkpoint, corpus, stats)
    item = prepare(match[:1], stats)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for direction, mode in ((L2R, "l2r"), (R2L, "r2l")):
        dcfg = cfg.decode_config(mode=mode, capture_attention=True)
        res = decode_utterance(model, item.feats, dcfg)
        matrix = capture_attention(res.best)
        emitted = corpus.vocab.decode(list(res.best.tokens))
        write_attention_csv(out / f"attention_{direction}.csv", matrix, direction, emitted)
        if matrix.size:
            write_pgm(out / f"attention_{direction}.pgm", matrix)
        good, total = monotone_steps(matrix, direction)
        kind = "non-decreasing" if direction == L2R else "non-increasing"
        frac = _fmt(good / total) if total else "nan"
        print(f"{direction}: {matrix.shape[0]} tokens x {matrix.shape[1]} frames; "
              f"{kind} argmax steps {good}/{total} = {frac}; hypothesis: {' '.join(corpus.vocab.decode(res.tokens))}")
    return EXIT_OK


def cmd_average(cfg, args):
    if args.run_dir:
        run = Path(args.run_dir)
        curve = run / "curve.csv"
        if not curve.exists():
            raise DataError(f"{curve} missing")
        best = select_best(read_curve(curve), args.best or cfg.best_n)
        paths = [run / f"epoch{e:03d}.ckpt" for e in best]
    else:
        paths = [Path(p) for p in args.checkpoints]
    if not paths:
        raise UsageError("give checkpoints to average or --run-dir")
    for p in paths:
        if not p.exists():
            raise DataError(f"checkpoint {p} not found")
    write_checkpoint(average_checkpoints(paths), args.out)
    print(f"averaged {len(paths)} checkpoints into {args.out}")
    return EXIT_OK


def cmd_compare(cfg, args):
    seeds = [int(s) for s in args.seeds.split(",")]
    per_seed, summary, flags = X.compare(cfg, seeds, args.out, args.split, args.jobs)
    print("condition       mean_cer  std_cer")
    for r in summary:
        print(f"{r['condition']:<15} {_fmt(r['mean_cer']):>8}  {_fmt(r['std_cer'])}")
    for f in flags:
        print(f"FLAG {f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="stbd", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="decode worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write the synthetic corpus")
    g.add_argument("--out", help="corpus directory (default: corpus_dir)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and average the best checkpoints")
    t.add_argument("--mode", choices=("stbd", "st-l2r", "st-r2l"))
    t.add_argument("--out", help="run directory (default: out_dir)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="beam-decode a split")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--split", default="test", choices=("train", "dev", "test"))
    d.add_argument("--mode", choices=tuple(DECODE_MODES))
    d.add_argument("--beam", type=int)
    d.add_argument("--beam-sweep", action="store_true", help="decode with beams 1, 2, 4, 8")
    d.add_argument("--out", default="decode_out")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="corpus CER of a hypotheses CSV")
    e.add_argument("--ref", required=True, help="manifest CSV with utt_id,transcript")
    e.add_argument("--hyp", required=True, help="CSV with utt_id,hypothesis")
    e.add_argument("--out", help="per-utterance CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("inspect-attention", help="export cross-attention heatmaps for one utterance")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--utt", required=True)
    a.add_argument("--split", choices=("train", "dev", "test"))
    a.add_argument("--out", default="attention_out")
    a.set_defaults(func=cmd_inspect_attention)

    v = sub.add_parser("average", help="average checkpoints")
    v.add_argument("checkpoints", nargs="*")
    v.add_argument("--run-dir", help="pick the best epochs from this run's curve.csv")
    v.add_argument("--best", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_average)

    c = sub.add_parser("compare", help="multi-seed comparison of the five decoding conditions")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--split", default="test", choices=("dev", "test"))
    c.add_argument("--out", default="compare_out")
    c.set_defaults(func=cmd_compare)
    return p


def _setup_logging():
    level = os.environ.get("STBD_LOG", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"STBD_LOG={level!r} is not a log level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.replace(seed=args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(cfg, args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, STBDError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
