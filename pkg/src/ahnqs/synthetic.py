"""Generated corpora for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .querylog import Session, UserHistory


def successor_corpus(n_users: int = 20, sessions_per_user: int = 3, seed: int = 0,
                     vocab_size: int = 4, pairs: tuple = ((0, 1),)) -> list[UserHistory]:
    """Sessions of random tokens in which each ``a`` of ``pairs`` is followed by ``b``."""
    rng = np.random.default_rng(seed)
    follow = dict(pairs)
    others = [t for t in range(vocab_size) if t not in follow]
    out, sid = [], 0
    for u in range(n_users):
        sessions = []
        for _ in range(sessions_per_user):
            q = [int(rng.choice(list(follow)))]
            while len(q) < 4:
                q.append(follow[q[-1]] if q[-1] in follow else int(rng.choice(others + list(follow))))
            sessions.append(Session(sid, f"u{u}", q, list(range(len(q)))))
            sid += 1
        out.append(UserHistory(f"u{u}", sessions))
    return out


@dataclass
class PersonalizationCorpus:
    train: list[UserHistory]
    test: list[UserHistory]
    vocab_size: int
    ambiguous: int  # the query whose successor depends on the user
    preference: dict[str, int]  # user -> preferred successor token


def personalization_corpus(
    n_users: int = 200,
    n_prefs: int = 20,
    train_sessions: int = 8,
    test_sessions: int = 2,
    chain_len: int = 2,
    n_noise: int = 30,
    max_noise: int = 2,
    consistency: float = 0.9,
    seed: int = 0,
) -> PersonalizationCorpus:
    """Users whose next query after a shared ambiguous query is a personal habit.

    Every session opens with the ambiguous query, followed by the user's
    preferred successor (with probability ``consistency``, else a random one),
    a fixed chain determined by that successor, then 1..``max_noise`` random
    filler queries. The first prediction of a session can only be resolved
    from the user's earlier sessions.
    """
    rng = np.random.default_rng(seed)
    ambiguous = 0
    succ = np.arange(1, n_prefs + 1)
    chains = (n_prefs + 1 + np.arange(n_prefs * chain_len)).reshape(n_prefs, chain_len)
    noise = n_prefs * (chain_len + 1) + 1 + np.arange(n_noise)
    vocab_size = int(noise[-1]) + 1
    train, test, prefs = [], [], {}
    sid = 0
    for u in range(n_users):
        uid = f"u{u}"
        pref = u % n_prefs
        prefs[uid] = int(succ[pref])
        sessions = []
        for _ in range(train_sessions + test_sessions):
            p = pref if rng.random() < consistency else int(rng.integers(n_prefs))
            q = [ambiguous, int(succ[p]), *map(int, chains[p])]
            q += [int(t) for t in rng.choice(noise, size=int(rng.integers(1, max_noise + 1)))]
            sessions.append(Session(sid, uid, q, list(range(sid * 100, sid * 100 + len(q)))))
            sid += 1
        train.append(UserHistory(uid, sessions[:train_sessions]))
        test.append(UserHistory(uid, sessions[train_sessions:]))
    return PersonalizationCorpus(train, test, vocab_size, ambiguous, prefs)
