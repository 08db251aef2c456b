"""Adjacency co-occurrence baseline (ADJ)."""

from __future__ import annotations

from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .querylog import UserHistory


class AdjacencyIndex:
    """Successor counts per query, each list sorted by (-count, token id)."""

    def __init__(self, successors: dict[int, list[tuple[int, int]]] | None = None):
        self.successors = successors or {}

    @classmethod
    def build(cls, sessions: Iterable[Sequence[int]]) -> "AdjacencyIndex":
        counts: dict[int, Counter] = defaultdict(Counter)
        for s in sessions:
            for a, b in zip(s, s[1:]):
                counts[a][b] += 1
        return cls({
            q: sorted(c.items(), key=lambda kv: (-kv[1], kv[0])) for q, c in counts.items()
        })

    @classmethod
    def from_histories(cls, histories: Iterable[UserHistory]) -> "AdjacencyIndex":
        return cls.build(s.queries for h in histories for s in h.sessions)

    def suggest(self, query: int, k: int = 10) -> list[int]:
        if k < 1:
            raise ValueError("k must be >= 1")
        return [t for t, _ in self.successors.get(query, [])[:k]]

    def __len__(self) -> int:
        return len(self.successors)

    def __eq__(self, other) -> bool:
        return isinstance(other, AdjacencyIndex) and self.successors == other.successors

    def total_count(self) -> int:
        return sum(c for succ in self.successors.values() for _, c in succ)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for q in sorted(self.successors):
                for t, c in self.successors[q]:
                    fh.write(f"{q}\t{t}\t{c}\n")

    @classmethod
    def load(cls, path: str | Path) -> "AdjacencyIndex":
        succ: dict[int, list[tuple[int, int]]] = defaultdict(list)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                q, t, c = map(int, line.split("\t"))
                succ[q].append((t, c))
        return cls({q: sorted(v, key=lambda kv: (-kv[1], kv[0])) for q, v in succ.items()})


def suggest_adj(index: AdjacencyIndex, query: int, k: int = 10) -> list[int]:
    return index.suggest(query, k)


class AdjRanker:
    """Evaluation adapter: ranks by the successor list of the last query."""

    def __init__(self, index: AdjacencyIndex):
        self.index = index
        self.last: int | None = None
        self._ranks: dict[int, int] = {}

    def begin_user(self) -> None:
        self.last = None

    def begin_session(self) -> None:
        self.last = None

    def feed(self, token: int) -> None:
        self.last = token
        self._ranks = {t: i for i, (t, _) in enumerate(self.index.successors.get(token, []), 1)}

    def rank(self, target: int) -> float:
        return float(self._ranks.get(target, float("inf")))

    def end_session(self) -> None:
        self.last = None
