"""MRR@K / Recall@K, session-length buckets and hidden-state export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .models import ModelRunner
from .querylog import UserHistory

BUCKETS = ("short", "medium", "long")


class Ranker(Protocol):
    def begin_user(self) -> None: ...
    def begin_session(self) -> None: ...
    def feed(self, token: int): ...
    def rank(self, target: int) -> float: ...
    def end_session(self): ...


@dataclass
class PredictionPoint:
    user_id: str
    session_id: int
    prefix_len: int
    target: int
    rank: float  # inf when unranked
    session_len: int = 0

    @property
    def context_len(self) -> int:
        return self.prefix_len + 1


@dataclass
class MetricRow:
    mrr: float
    recall: float
    count: int


@dataclass
class EvalReport:
    k: int
    mrr: float
    recall: float
    count: int
    buckets: dict[str, MetricRow] = field(default_factory=dict)
    points: list[PredictionPoint] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("points")
        return json.dumps(d, indent=2)

    def tsv_rows(self, model: str) -> list[str]:
        rows = [f"{model}\tall\tMRR@{self.k}\t{self.mrr:.6f}",
                f"{model}\tall\tRecall@{self.k}\t{self.recall:.6f}"]
        for name, r in self.buckets.items():
            rows.append(f"{model}\t{name}\tMRR@{self.k}\t{r.mrr:.6f}")
            rows.append(f"{model}\t{name}\tRecall@{self.k}\t{r.recall:.6f}")
        return rows


def metrics(ranks: Iterable[float], k: int = 10) -> tuple[float, float]:
    """Truncated MRR@k and Recall@k of a list of 1-based ranks."""
    ranks = list(ranks)
    if not ranks:
        return 0.0, 0.0
    hits = [r for r in ranks if r <= k]
    return sum(1.0 / r for r in hits) / len(ranks), len(hits) / len(ranks)


def bucket_of(length: int) -> str | None:
    if length <= 1:
        return None
    if length == 2:
        return "short"
    if length <= 4:
        return "medium"
    return "long"


def bucketize(points: Sequence[PredictionPoint], k: int = 10,
              by: str = "context") -> dict[str, MetricRow]:
    """Per-bucket metrics. ``by="context"`` uses prefix+1, ``"session"`` the whole session."""
    groups: dict[str, list[float]] = {b: [] for b in BUCKETS}
    for p in points:
        b = bucket_of(p.context_len if by == "context" else p.session_len)
        if b is not None:
            groups[b].append(p.rank)
    return {b: MetricRow(*metrics(r, k), len(r)) for b, r in groups.items()}


def report_from_points(points: Sequence[PredictionPoint], k: int = 10,
                       by: str = "context") -> EvalReport:
    mrr, rec = metrics((p.rank for p in points), k)
    return EvalReport(k, mrr, rec, len(points), bucketize(points, k, by), list(points))


def evaluate(
    ranker: Ranker,
    test: Sequence[UserHistory],
    k: int = 10,
    history: Mapping[str, UserHistory] | None = None,
    by: str = "context",
) -> EvalReport:
    """Feed every test session query by query and rank each true next query.

    With ``history`` each user's training sessions are replayed first so the
    hierarchical models start from their learned user state.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not test:
        raise ValueError("empty test split")
    points = []
    for user in test:
        ranker.begin_user()
        past = history.get(user.user_id) if history else None
        for s in past.sessions if past else ():
            ranker.begin_session()
            for t in s.queries:
                ranker.feed(t)
            ranker.end_session()
        for s in user.sessions:
            q = s.queries
            ranker.begin_session()
            for n in range(len(q) - 1):
                ranker.feed(q[n])
                points.append(PredictionPoint(user.user_id, s.session_id, n + 1, q[n + 1],
                                              ranker.rank(q[n + 1]), len(q)))
            ranker.feed(q[-1])
            ranker.end_session()
    return report_from_points(points, k, by)


@dataclass
class StateMatrix:
    values: np.ndarray  # hidden units x time steps
    kind: str  # "session" or "user"

    def to_csv(self, path: str | Path) -> None:
        rows, cols = self.values.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit"] + [f"{'q' if self.kind == 'session' else 's'}{j + 1}"
                                   for j in range(cols)])
            for i in range(rows):
                w.writerow([f"h{i}"] + [repr(float(v)) for v in self.values[i]])


def export_states(runner: ModelRunner, history: UserHistory,
                  session_index: int | None = None) -> StateMatrix:
    """Hidden-state trace of one user.

    With ``session_index`` the session-level states after each query of that
    session are returned (earlier sessions are replayed first); otherwise
    the user-level states after each session.
    """
    n = len(history.sessions)
    if session_index is None and not runner.kind.hierarchical:
        raise ValueError("NQS has no user-level RNN to trace")
    if session_index is not None and not 0 <= session_index < n:
        raise KeyError(f"user {history.user_id} has no session {session_index}")
    runner.begin_user()
    cols = []
    for i, s in enumerate(history.sessions):
        runner.begin_session()
        for t in s.queries:
            runner.feed(t)
            if i == session_index:
                cols.append(runner.state.hidden.copy())
        if i == session_index:
            break
        runner.end_session()
        if session_index is None:
            cols.append(runner.state.user.copy())
    return StateMatrix(np.array(cols).T, "session" if session_index is not None else "user")
