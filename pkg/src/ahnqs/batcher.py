"""Session-parallel mini-batches keyed by user.

Each of ``batch_size`` slots walks one user's sessions in order, emitting one
(input, target) pair per step. A slot whose user runs out is refilled with the
next unstarted user on the following step; once no users remain it idles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .querylog import UserHistory


@dataclass(frozen=True)
class BatchSlot:
    user_id: str
    session_index: int
    session_id: int
    step: int
    input_token: int
    target_token: int
    session_start: bool
    user_start: bool


@dataclass(frozen=True)
class BatchStep:
    slots: tuple[BatchSlot | None, ...]

    @property
    def active(self) -> np.ndarray:
        return np.array([s is not None for s in self.slots])

    def active_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s is not None]


def _user_pairs(history: UserHistory) -> Iterator[BatchSlot]:
    first = True
    for si, session in enumerate(history.sessions):
        q = session.queries
        if len(q) < 2:
            raise ValueError(
                f"session {session.session_id} of user {history.user_id} has < 2 queries"
            )
        for k in range(len(q) - 1):
            yield BatchSlot(
                history.user_id, si, session.session_id, k, q[k], q[k + 1],
                session_start=k == 0, user_start=first,
            )
            first = False


def user_order(n_users: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.arange(n_users)
    return np.random.default_rng(seed).permutation(n_users)


def schedule(
    histories: Sequence[UserHistory], batch_size: int, seed: int | None = 0
) -> Iterator[BatchStep]:
    """Yield the batch steps of one epoch. ``seed=None`` keeps corpus order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    queue = iter([histories[i] for i in user_order(len(histories), seed)])
    streams: list[Iterator[BatchSlot] | None] = [None] * batch_size

    def refill(i):
        for h in queue:
            it = _user_pairs(h)
            first = next(it, None)
            if first is not None:
                streams[i] = it
                return first
        streams[i] = None
        return None

    current: list[BatchSlot | None] = [refill(i) for i in range(batch_size)]
    while any(s is not None for s in current):
        yield BatchStep(tuple(current))
        for i in range(batch_size):
            if current[i] is None:
                continue
            nxt = next(streams[i], None)
            current[i] = nxt if nxt is not None else refill(i)


def negatives_for(
    step: BatchStep,
    slot_index: int,
    vocab_size: int | None = None,
    min_negatives: int = 1,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """In-batch negatives for one slot: the other slots' targets minus its own.

    Tops up with uniform vocabulary samples (never the slot's target) when
    fewer than ``min_negatives`` remain.
    """
    own = step.slots[slot_index].target_token
    negs = [
        s.target_token
        for i, s in enumerate(step.slots)
        if s is not None and i != slot_index and s.target_token != own
    ]
    missing = min_negatives - len(negs)
    if missing > 0:
        if vocab_size is None or vocab_size < 2:
            raise ValueError("random negative top-up needs a vocabulary of size >= 2")
        rng = rng if rng is not None else np.random.default_rng()
        for _ in range(missing):
            t = int(rng.integers(vocab_size - 1))
            negs.append(t + 1 if t >= own else t)
    return negs


def dump_schedule(steps: Iterator[BatchStep], fh) -> int:
    """Write the schedule as TSV; returns the number of steps."""
    fh.write("step\tslot\tuser_id\tsession_id\tposition\tinput\ttarget\tsession_start\tuser_start\n")
    n = 0
    for n, st in enumerate(steps, start=1):
        for i, s in enumerate(st.slots):
            if s is None:
                continue
            fh.write(
                f"{n - 1}\t{i}\t{s.user_id}\t{s.session_id}\t{s.step}\t{s.input_token}"
                f"\t{s.target_token}\t{int(s.session_start)}\t{int(s.user_start)}\n"
            )
    return n
