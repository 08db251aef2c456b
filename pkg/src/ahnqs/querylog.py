"""AOL query-log reading, sessionization, filtering and splitting."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

AOL_HEADER = ("AnonID", "Query", "QueryTime", "ItemRank", "ClickURL")
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
DAY = 86400


class LogFormatError(ValueError):
    pass


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    user_id: str
    query_text: str
    timestamp: int
    click_rank: int | None = None
    click_url: str | None = None


@dataclass
class Session:
    session_id: int
    user_id: str
    queries: list  # query strings before encoding, token ids after
    timestamps: list[int]

    @property
    def start(self) -> int:
        return self.timestamps[0]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass
class UserHistory:
    user_id: str
    sessions: list[Session] = field(default_factory=list)


@dataclass
class ParsedLog:
    records: list[RawRecord]
    skipped: int
    bad_lines: list[int]


def normalize_query(text: str) -> str:
    return " ".join(text.lower().split())


def parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text.strip(), TIME_FORMAT).replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_log(lines: Iterable[str], max_bad_fraction: float = 0.5) -> ParsedLog:
    """Read AOL TSV lines; malformed lines are skipped and counted."""
    records: list[RawRecord] = []
    bad: list[int] = []
    seen = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split("\t")
        if lineno == 1 and tuple(p.strip() for p in parts[:3]) == AOL_HEADER[:3]:
            continue
        seen += 1
        try:
            if len(parts) < 3:
                raise ValueError("too few fields")
            query = normalize_query(parts[1])
            if not parts[0].strip() or not query:
                raise ValueError("empty field")
            ts = parse_timestamp(parts[2])
            rank = int(parts[3]) if len(parts) > 3 and parts[3].strip() else None
            url = parts[4].strip() if len(parts) > 4 and parts[4].strip() else None
        except ValueError:
            bad.append(lineno)
            continue
        records.append(RawRecord(parts[0].strip(), query, ts, rank, url))
    if seen and len(bad) / seen > max_bad_fraction:
        raise LogFormatError(
            f"{len(bad)} of {seen} lines malformed (first bad line {bad[0]})"
        )
    if bad:
        logger.info("skipped %d malformed lines", len(bad))
    return ParsedLog(records, len(bad), bad)


def read_log(path: str | Path) -> ParsedLog:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_log(fh)


def sessionize(
    records: Sequence[RawRecord], gap_secs: int = 1800, collapse_duplicates: bool = True
) -> list[Session]:
    """Split one user's time-sorted records into sessions.

    A session breaks when the time since the last kept query strictly exceeds
    ``gap_secs``. With ``collapse_duplicates`` a query equal to the previous
    kept query in the same session is dropped (AOL repeats the query line for
    every click).
    """
    if gap_secs <= 0:
        raise ValueError("gap_secs must be positive")
    sessions: list[Session] = []
    cur: Session | None = None
    for rec in records:
        if cur is None or rec.timestamp - cur.timestamps[-1] > gap_secs:
            cur = Session(len(sessions), rec.user_id, [rec.query_text], [rec.timestamp])
            sessions.append(cur)
        elif collapse_duplicates and rec.query_text == cur.queries[-1]:
            continue
        else:
            cur.queries.append(rec.query_text)
            cur.timestamps.append(rec.timestamp)
    return sessions


def build_histories(
    records: Iterable[RawRecord], gap_secs: int = 1800, collapse_duplicates: bool = True
) -> list[UserHistory]:
    """Group records by user, sort by time and sessionize.

    Session ids are global ordinals in (first-seen user, start time) order.
    """
    by_user: dict[str, list[RawRecord]] = {}
    for rec in records:
        by_user.setdefault(rec.user_id, []).append(rec)
    histories = []
    next_id = 0
    for user_id, recs in by_user.items():
        recs.sort(key=lambda r: r.timestamp)  # stable: file order breaks ties
        sessions = sessionize(recs, gap_secs, collapse_duplicates)
        for s in sessions:
            s.session_id = next_id
            next_id += 1
        histories.append(UserHistory(user_id, sessions))
    return histories


def query_counts(histories: Iterable[UserHistory]) -> Counter:
    counts: Counter = Counter()
    for h in histories:
        for s in h.sessions:
            counts.update(s.queries)
    return counts


def _drop_queries(session: Session, keep) -> Session:
    pairs = [(q, t) for q, t in zip(session.queries, session.timestamps) if keep(q)]
    return Session(
        session.session_id, session.user_id, [q for q, _ in pairs], [t for _, t in pairs]
    )


def filter_corpus(
    histories: list[UserHistory],
    min_query_count: int = 20,
    min_session_len: int = 6,
    min_user_sessions: int = 5,
) -> list[UserHistory]:
    """Apply the three corpus thresholds repeatedly until none changes anything."""
    if min(min_query_count, min_session_len, min_user_sessions) < 1:
        raise ValueError("thresholds must be >= 1")
    current = histories
    while True:
        counts = query_counts(current)
        rare = {q for q, c in counts.items() if c < min_query_count}
        out = []
        for h in current:
            sessions = [_drop_queries(s, lambda q: q not in rare) for s in h.sessions]
            sessions = [s for s in sessions if len(s) >= min_session_len]
            if len(sessions) >= min_user_sessions:
                out.append(UserHistory(h.user_id, sessions))
        if not out:
            raise EmptyCorpusError("empty corpus after filtering")
        if _shape(out) == _shape(current):
            return out
        current = out


def _shape(histories):
    return [(h.user_id, [len(s) for s in h.sessions]) for h in histories]


def last_timestamp(histories: Iterable[UserHistory]) -> int:
    return max(s.timestamps[-1] for h in histories for s in h.sessions)


def split_by_time(
    histories: list[UserHistory], test_window_days: int = 30, end_time: int | None = None
) -> tuple[list[UserHistory], list[UserHistory]]:
    """Hold out sessions starting in the final window as the test split.

    The window is ``[end_time - days, +inf)`` with ``end_time`` defaulting to
    the latest timestamp in the corpus. Test queries never seen in training
    are removed, and test sessions left with fewer than two queries dropped.
    """
    if test_window_days < 1:
        raise ValueError("test_window_days must be >= 1")
    if end_time is None:
        end_time = last_timestamp(histories)
    cutoff = end_time - test_window_days * DAY
    train, held = [], []
    for h in histories:
        tr = [s for s in h.sessions if s.start < cutoff]
        te = [s for s in h.sessions if s.start >= cutoff]
        if tr:
            train.append(UserHistory(h.user_id, tr))
        if te:
            held.append(UserHistory(h.user_id, te))
    known = set(query_counts(train))
    test = []
    for h in held:
        sessions = [_drop_queries(s, known.__contains__) for s in h.sessions]
        sessions = [s for s in sessions if len(s) >= 2]
        if sessions:
            test.append(UserHistory(h.user_id, sessions))
    return train, test


class Vocabulary:
    """Bijection between normalized query strings and ids ``0..V-1``.

    Ids are assigned by descending training count, then by text.
    """

    def __init__(self, tokens: Sequence[str], counts: Sequence[int]):
        self.id_to_token = list(tokens)
        self.counts = list(counts)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def build(cls, histories: Iterable[UserHistory]) -> "Vocabulary":
        counts = query_counts(histories)
        items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([t for t, _ in items], [c for _, c in items])

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, token: str) -> int:
        return self.token_to_id[token]

    def encode_histories(self, histories: Iterable[UserHistory]) -> list[UserHistory]:
        return [
            UserHistory(
                h.user_id,
                [
                    Session(s.session_id, s.user_id,
                            [self.token_to_id[q] for q in s.queries], list(s.timestamps))
                    for s in h.sessions
                ],
            )
            for h in histories
        ]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, c) in enumerate(zip(self.id_to_token, self.counts)):
                fh.write(f"{i}\t{c}\t{tok}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                idx, count, tok = line.rstrip("\n").split("\t", 2)
                if int(idx) != lineno - 1:
                    raise LogFormatError(f"{path}:{lineno}: ids must be 0..V-1 in order")
                tokens.append(tok)
                counts.append(int(count))
        return cls(tokens, counts)


@dataclass
class SplitStats:
    queries: int
    unique_queries: int
    sessions: int
    users: int
    avg_queries_per_session: float
    avg_sessions_per_user: float


def split_stats(histories: Sequence[UserHistory]) -> SplitStats:
    sessions = [s for h in histories for s in h.sessions]
    n_q = sum(len(s) for s in sessions)
    return SplitStats(
        queries=n_q,
        unique_queries=len({q for s in sessions for q in s.queries}),
        sessions=len(sessions),
        users=len(histories),
        avg_queries_per_session=n_q / len(sessions) if sessions else 0.0,
        avg_sessions_per_user=len(sessions) / len(histories) if histories else 0.0,
    )


def compute_stats(train, test, valid=None) -> dict[str, SplitStats]:
    if not train or not test:
        raise EmptyCorpusError("statistics need non-empty train and test splits")
    out = {"train": split_stats(train), "test": split_stats(test)}
    if valid:
        out["valid"] = split_stats(valid)
    return out


def stats_json(stats: dict[str, SplitStats]) -> str:
    return json.dumps({k: asdict(v) for k, v in stats.items()}, indent=2)


def write_corpus(path: str | Path, histories: Iterable[UserHistory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            for s in h.sessions:
                for q, t in zip(s.queries, s.timestamps):
                    fh.write(f"{h.user_id}\t{s.session_id}\t{q}\t{t}\n")


def read_corpus(path: str | Path) -> list[UserHistory]:
    """Inverse of :func:`write_corpus`; rows of one session must be contiguous."""
    histories: dict[str, UserHistory] = {}
    last_key = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                user, sid, tok, ts = line.split("\t")
                sid_i, tok_i, ts_i = int(sid), int(tok), int(ts)
            except ValueError as exc:
                raise LogFormatError(f"{path}:{lineno}: bad corpus row") from exc
            hist = histories.setdefault(user, UserHistory(user))
            if (user, sid_i) != last_key:
                hist.sessions.append(Session(sid_i, user, [], []))
                last_key = (user, sid_i)
            hist.sessions[-1].queries.append(tok_i)
            hist.sessions[-1].timestamps.append(ts_i)
    return list(histories.values())


@dataclass
class PreprocessResult:
    train: list[UserHistory]
    valid: list[UserHistory]
    test: list[UserHistory]
    vocab: Vocabulary
    stats: dict[str, SplitStats]
    skipped_lines: int


def preprocess(
    records: Iterable[RawRecord],
    gap_secs: int = 1800,
    min_query_count: int = 20,
    min_session_len: int = 6,
    min_user_sessions: int = 5,
    test_days: int = 30,
    valid_days: int = 30,
    collapse_duplicates: bool = True,
    skipped_lines: int = 0,
) -> PreprocessResult:
    """Full pipeline from raw records to encoded train/valid/test splits.

    The test split is held out first; the vocabulary covers the whole
    training portion. With ``valid_days`` > 0 a validation window is carved
    from the end of the training portion by the same procedure.
    """
    histories = build_histories(records, gap_secs, collapse_duplicates)
    histories = filter_corpus(histories, min_query_count, min_session_len, min_user_sessions)
    end = last_timestamp(histories)
    train, test = split_by_time(histories, test_days, end_time=end)
    if not train:
        raise EmptyCorpusError("no training sessions before the test window")
    vocab = Vocabulary.build(train)
    valid: list[UserHistory] = []
    if valid_days > 0:
        train, valid = split_by_time(train, valid_days, end_time=end - test_days * DAY)
    enc = vocab.encode_histories
    train, valid, test = enc(train), enc(valid), enc(test)
    stats = compute_stats(train, test, valid) if train and test else {}
    return PreprocessResult(train, valid, test, vocab, stats, skipped_lines)
