"""Command-line entry point: ``ahnqs <subcommand> --help``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import querylog
from .adj import AdjacencyIndex, AdjRanker
from .batcher import dump_schedule, schedule
from .evaluation import evaluate, export_states
from .models import CheckpointError, ModelRunner, load_checkpoint, save_checkpoint, top_k
from .querylog import UserHistory, Vocabulary
from .training import TrainConfig, epoch_seed, train

log = logging.getLogger("ahnqs")


class CliError(Exception):
    pass


def _data_paths(data: Path) -> dict[str, Path]:
    return {name: data / f"{name}.tsv" for name in ("train", "valid", "test", "vocab")}


def _load_split(data: Path, name: str) -> list[UserHistory]:
    path = _data_paths(data)[name]
    if not path.exists():
        raise CliError(f"missing corpus file: {path}")
    return querylog.read_corpus(path)


def _history_index(*splits: list[UserHistory]) -> dict[str, UserHistory]:
    out: dict[str, UserHistory] = {}
    for split in splits:
        for h in split:
            out.setdefault(h.user_id, UserHistory(h.user_id)).sessions.extend(h.sessions)
    for h in out.values():
        h.sessions.sort(key=lambda s: s.start)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


# -- subcommands -------------------------------------------------------------

def cmd_preprocess(args) -> None:
    src = _require(Path(args.log), "query log")
    parsed = querylog.read_log(src)
    result = querylog.preprocess(
        parsed.records,
        gap_secs=args.session_gap_secs,
        min_query_count=args.min_query_count,
        min_session_len=args.min_session_len,
        min_user_sessions=args.min_user_sessions,
        test_days=args.test_days,
        valid_days=args.valid_days,
        collapse_duplicates=not args.keep_duplicates,
        skipped_lines=parsed.skipped,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _data_paths(out)
    querylog.write_corpus(paths["train"], result.train)
    querylog.write_corpus(paths["valid"], result.valid)
    querylog.write_corpus(paths["test"], result.test)
    result.vocab.save(paths["vocab"])
    text = querylog.stats_json(result.stats)
    (out / "stats.json").write_text(text + "\n")
    print(text)
    if parsed.skipped:
        print(f"skipped {parsed.skipped} malformed lines (first: line {parsed.bad_lines[0]})",
              file=sys.stderr)


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        overrides = json.loads(_require(Path(args.config), "config file").read_text())
    flags = dict(
        batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
        dropout_hidden=args.dropout, dropout_user=args.dropout, epochs=args.epochs,
        seed=args.seed, min_negatives=args.min_negatives, clip_norm=args.clip_norm,
        hidden_dim=args.hidden_dim,
    )
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.for_model(args.model, **overrides)


def cmd_train(args) -> None:
    data = Path(args.data)
    paths = _data_paths(data)
    vocab = Vocabulary.load(_require(paths["vocab"], "vocabulary"))
    train_split = _load_split(data, "train")
    valid = querylog.read_corpus(paths["valid"]) if args.validate and paths["valid"].exists() else None
    config = _train_config(args)
    log_fh = open(args.log, "a") if args.log else None
    try:
        def sink(line):
            print(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
        params, report = train(train_split, len(vocab), args.model, config, valid=valid, log=sink)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(params, args.out, vocab_path=str(paths["vocab"].resolve()))


def cmd_evaluate(args) -> None:
    data = Path(args.data)
    vocab = Vocabulary.load(_require(_data_paths(data)["vocab"], "vocabulary"))
    train_split = _load_split(data, "train")
    valid_path = _data_paths(data)["valid"]
    valid = querylog.read_corpus(valid_path) if valid_path.exists() else []
    test = _load_split(data, args.split)
    if not test:
        raise CliError(f"{args.split} split is empty")
    history = _history_index(train_split, valid if args.split == "test" else [])
    if args.baseline:
        ranker = AdjRanker(AdjacencyIndex.from_histories(train_split))
        name = "ADJ"
    else:
        if not args.checkpoint:
            raise CliError("give --checkpoint or --baseline adj")
        params, cfg, _ = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
        if cfg.vocab_size != len(vocab):
            raise CliError(
                f"vocabulary mismatch: checkpoint has {cfg.vocab_size} queries, corpus {len(vocab)}"
            )
        ranker = ModelRunner(params)
        name = cfg.kind.name
    report = evaluate(ranker, test, k=args.k, history=history, by=args.buckets)
    text = report.to_json()
    print(text)
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.json").write_text(text + "\n")
        Path(f"{prefix}.tsv").write_text("\n".join(report.tsv_rows(name)) + "\n")


def _load_model_and_vocab(args):
    params, cfg, vocab_path = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    vocab = Vocabulary.load(_require(Path(args.vocab or vocab_path), "vocabulary"))
    if len(vocab) != cfg.vocab_size:
        raise CliError("vocabulary size does not match the checkpoint")
    return params, cfg, vocab


def _print_top(runner: ModelRunner, vocab: Vocabulary, k: int, out=None) -> None:
    out = out or sys.stdout
    for rank, t in enumerate(top_k(runner.scores, k), start=1):
        out.write(f"{rank}\t{vocab.id_to_token[t]}\t{runner.scores[t]:.6f}\n")
    out.flush()


def cmd_suggest(args) -> None:
    params, cfg, vocab = _load_model_and_vocab(args)
    runner = ModelRunner(params)
    if args.user:
        if not args.data:
            raise CliError("--user needs --data")
        data = Path(args.data)
        hist = _history_index(_load_split(data, "train"),
                              querylog.read_corpus(_data_paths(data)["valid"])
                              if _data_paths(data)["valid"].exists() else [])
        if args.user not in hist:
            raise CliError(f"unknown user: {args.user}")
        runner.replay([s.queries for s in hist[args.user].sessions])
    if not args.interactive:
        if not args.queries:
            raise CliError("give one or more queries, or --interactive")
        texts = [querylog.normalize_query(q) for q in args.queries]
        unknown = [q for q in texts if q not in vocab]
        if unknown:
            raise CliError(f"unknown queries: {unknown}")
        runner.begin_session()
        for q in texts:
            runner.step(vocab.encode(q))
        _print_top(runner, vocab, args.top_k)
        return
    runner.begin_session()
    fed = 0
    for line in sys.stdin:
        q = querylog.normalize_query(line)
        if not q:
            if fed:
                runner.end_session()
                print("-- session ended")
            runner.begin_session()
            fed = 0
            continue
        if q not in vocab:
            print(f"unknown query: {q}", file=sys.stderr)
            continue
        runner.step(vocab.encode(q))
        fed += 1
        _print_top(runner, vocab, args.top_k)


def cmd_export_states(args) -> None:
    params, _, _ = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    data = Path(args.data)
    hist = _history_index(*(querylog.read_corpus(p) for n, p in _data_paths(data).items()
                            if n != "vocab" and p.exists()))
    if args.user not in hist:
        raise CliError(f"unknown user: {args.user}")
    try:
        matrix = export_states(ModelRunner(params), hist[args.user], args.session)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc).strip("'\"")) from None
    matrix.to_csv(args.out)


def cmd_dump_schedule(args) -> None:
    histories = _load_split(Path(args.data), args.split)
    with open(args.out, "w") as fh:
        n = dump_schedule(schedule(histories, args.batch_size, epoch_seed(args.seed, args.epoch)), fh)
    print(f"{n} steps written to {args.out}")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ahnqs", description="Neural query suggestion (NQS/HNQS/AHNQS).")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="sessionize, filter and split an AOL query log")
    p.add_argument("log", help="AOL TSV file (AnonID, Query, QueryTime, ItemRank, ClickURL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--session-gap-secs", type=int, default=1800,
                   help="inactivity that ends a session (default 1800)")
    p.add_argument("--min-query-count", type=int, default=20,
                   help="drop queries with fewer occurrences (default 20)")
    p.add_argument("--min-session-len", type=int, default=6,
                   help="drop shorter sessions (default 6)")
    p.add_argument("--min-user-sessions", type=int, default=5,
                   help="drop users with fewer sessions (default 5)")
    p.add_argument("--test-days", type=int, default=30, help="test window in days (default 30)")
    p.add_argument("--valid-days", type=int, default=30,
                   help="validation window carved from training, 0 disables (default 30)")
    p.add_argument("--keep-duplicates", action="store_true",
                   help="do not collapse repeated consecutive queries")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model; defaults differ per model kind")
    p.add_argument("--data", required=True, help="preprocessed corpus directory")
    p.add_argument("--model", required=True, choices=["nqs", "hnqs", "ahnqs"])
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file of TrainConfig fields; flags override it")
    p.add_argument("--epochs", type=int, help="default 20")
    p.add_argument("--batch-size", type=int, help="default 50")
    p.add_argument("--lr", type=float, help="default 0.01 (nqs) / 0.1 (hnqs, ahnqs)")
    p.add_argument("--momentum", type=float, help="default 0.0")
    p.add_argument("--dropout", type=float, help="default 0.5 (nqs) / 0.1 (hnqs, ahnqs)")
    p.add_argument("--hidden-dim", type=int, help="default 100")
    p.add_argument("--min-negatives", type=int, help="random top-up floor for negatives (default 1)")
    p.add_argument("--clip-norm", type=float, help="gradient-norm clip (default off)")
    p.add_argument("--seed", type=int, help="default 0")
    p.add_argument("--validate", action="store_true", help="report valid MRR/Recall@10 per epoch")
    p.add_argument("--log", help="append per-epoch JSON reports to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MRR@K and Recall@K, overall and by session length")
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--baseline", choices=["adj"])
    p.add_argument("-k", type=int, default=10, help="cutoff (default 10)")
    p.add_argument("--split", choices=["test", "valid"], default="test")
    p.add_argument("--buckets", choices=["context", "session"], default="context",
                   help="bucket by prediction context length or whole-session length")
    p.add_argument("--out", help="write <out>.json and <out>.tsv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suggest", help="print top-K next-query suggestions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary file (default: path stored in the checkpoint)")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--data", help="corpus directory, for --user")
    p.add_argument("--user", help="replay this user's history first")
    p.add_argument("--interactive", action="store_true",
                   help="read queries from stdin; a blank line ends the session")
    p.add_argument("queries", nargs="*", help="session prefix (one-shot mode)")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("export-states", help="hidden-state matrix of one user as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--session", type=int,
                   help="session index: trace session-level states; omit for user-level states")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_states)

    p = sub.add_parser("dump-schedule", help="write one epoch's batch schedule as TSV")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="train")
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_schedule)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, CheckpointError, querylog.LogFormatError, querylog.EmptyCorpusError,
            FileNotFoundError, FloatingPointError, ValueError) as exc:
        print(f"ahnqs: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
