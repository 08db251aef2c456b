import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ahnqs.adj import AdjacencyIndex, AdjRanker
from ahnqs.evaluation import (
    PredictionPoint,
    bucket_of,
    bucketize,
    evaluate,
    export_states,
    metrics,
    report_from_points,
)
from ahnqs.models import ModelConfig, ModelRunner, SlotState, init_params, step, zero_params
from ahnqs.querylog import Session, UserHistory


def users(*sessions_per_user):
    out, sid = [], 0
    for u, sessions in enumerate(sessions_per_user):
        ss = []
        for q in sessions:
            ss.append(Session(sid, f"u{u}", list(q), list(range(len(q)))))
            sid += 1
        out.append(UserHistory(f"u{u}", ss))
    return out


def brute_metrics(ranks, k):
    mrr = rec = 0.0
    for r in ranks:
        if r <= k:
            mrr += 1.0 / r
            rec += 1.0
    return mrr / len(ranks), rec / len(ranks)


def test_metric_examples():
    assert metrics([1, 1, 1], 10) == (1.0, 1.0)
    mrr, rec = metrics([1, 2, 4], 10)
    assert abs(mrr - 0.583333) < 1e-6 and abs(mrr - 1.75 / 3) < 1e-15 and rec == 1.0
    assert metrics([11], 10) == (0.0, 0.0)
    assert metrics([float("inf")], 10) == (0.0, 0.0)


@given(st.lists(st.one_of(st.integers(1, 30), st.just(math.inf)), min_size=1), st.integers(1, 20))
def test_metrics_match_brute_force(ranks, k):
    mrr, rec = metrics(ranks, k)
    bm, br = brute_metrics(ranks, k)
    assert mrr == pytest.approx(bm, rel=1e-12) and rec == br
    assert 0 <= mrr <= rec <= 1


def test_bucket_boundaries():
    assert [bucket_of(n) for n in (1, 2, 3, 4, 5, 7)] == [None, "short", "medium", "medium",
                                                          "long", "long"]


@given(st.lists(st.tuples(st.integers(1, 9), st.integers(1, 15)), min_size=1))
def test_buckets_partition_points(items):
    pts = [PredictionPoint("u", 0, p, 0, r, p + 1) for p, r in items]
    rows = bucketize(pts, 10)
    assert sum(r.count for r in rows.values()) == len(pts)
    for r in rows.values():
        assert r.mrr <= r.recall


def test_session_bucket_mode():
    pts = [PredictionPoint("u", 0, 1, 0, 1, 6), PredictionPoint("u", 0, 2, 0, 1, 2)]
    assert bucketize(pts, 10, by="session")["long"].count == 1
    assert bucketize(pts, 10, by="context")["short"].count == 1


def adj_oracle(train, test, k):
    """Count pairs, rank by brute force, score each test prefix."""
    ranks = []
    for h in test:
        for s in h.sessions:
            for n in range(len(s.queries) - 1):
                q, target = s.queries[n], s.queries[n + 1]
                counts = {}
                for th in train:
                    for ts in th.sessions:
                        for a, b in zip(ts.queries, ts.queries[1:]):
                            if a == q:
                                counts[b] = counts.get(b, 0) + 1
                order = sorted(counts, key=lambda c: (-counts[c], c))
                ranks.append(order.index(target) + 1 if target in order else math.inf)
    return ranks


corpus_st = st.lists(st.lists(st.lists(st.integers(0, 5), min_size=2, max_size=7),
                              min_size=1, max_size=4), min_size=1, max_size=6)


@given(corpus_st, corpus_st, st.integers(1, 6))
def test_adj_evaluation_matches_oracle(train_sessions, test_sessions, k):
    train, test = users(*train_sessions), users(*test_sessions)
    rep = evaluate(AdjRanker(AdjacencyIndex.from_histories(train)), test, k=k)
    mrr, rec = brute_metrics(adj_oracle(train, test, k), k)
    assert rep.mrr == pytest.approx(mrr, rel=1e-12, abs=0) and rep.recall == rec
    assert rep.count == sum(len(s.queries) - 1 for h in test for s in h.sessions)
    assert sum(r.count for r in rep.buckets.values()) == rep.count


def test_evaluate_errors():
    r = AdjRanker(AdjacencyIndex())
    with pytest.raises(ValueError, match="empty"):
        evaluate(r, [], k=10)
    with pytest.raises(ValueError):
        evaluate(r, users([[0, 1]]), k=0)


class Recorder:
    """Ranker that records the protocol calls it receives."""

    def __init__(self):
        self.calls = []

    def begin_user(self):
        self.calls.append("U")

    def begin_session(self):
        self.calls.append("S")

    def feed(self, t):
        self.calls.append(t)

    def rank(self, target):
        return 1.0

    def end_session(self):
        self.calls.append("E")


def test_history_replayed_and_last_query_fed():
    rec = Recorder()
    hist = users([[7, 8]])
    test = users([[1, 2, 3]])
    rep = evaluate(rec, test, history={"u0": hist[0]})
    assert rec.calls == ["U", "S", 7, 8, "E", "S", 1, 2, 3, "E"]
    assert [p.prefix_len for p in rep.points] == [1, 2]


def test_model_evaluation_equals_manual_ranking():
    p = init_params(ModelConfig(6, 3, "ahnqs"), 2)
    hist = users([[0, 1, 2], [3, 4]])[0]
    test = users([[5, 0, 1, 2]])
    rep = evaluate(ModelRunner(p), test, k=3, history={"u0": hist})
    r = ModelRunner(p)
    r.replay([s.queries for s in hist.sessions])
    r.begin_session()
    ranks = []
    q = test[0].sessions[0].queries
    for n in range(len(q) - 1):
        s = r.step(q[n])
        ranks.append(1 + int(np.sum(s > s[q[n + 1]])) + int(np.sum(s[:q[n + 1]] == s[q[n + 1]])))
    assert [pt.rank for pt in rep.points] == ranks


def test_report_serialization():
    rep = report_from_points([PredictionPoint("u", 0, 1, 0, 1), PredictionPoint("u", 0, 4, 0, 2)])
    d = json.loads(rep.to_json())
    assert d["mrr"] == 0.75 and d["buckets"]["long"]["count"] == 1 and "points" not in d
    rows = rep.tsv_rows("ADJ")
    assert rows[0] == "ADJ\tall\tMRR@10\t0.750000"
    assert len(rows) == 8


# -- state export ------------------------------------------------------------------

def test_zero_model_exports_zeros():
    p = zero_params(ModelConfig(5, 3, "hnqs"))
    m = export_states(ModelRunner(p), users([[0, 1, 2]])[0], session_index=0)
    assert m.values.shape == (3, 3) and not m.values.any()


def test_session_trace_shape_and_replay_equivalence(tmp_path):
    cfg = ModelConfig(8, 100, "ahnqs")
    p = init_params(cfg, 1)
    h = users([[0, 1, 2], [3, 4, 5, 6, 7]])[0]
    m = export_states(ModelRunner(p), h, session_index=1)
    assert m.values.shape == (100, 5)
    r = ModelRunner(p)
    r.replay([h.sessions[0].queries])
    state = SlotState(np.tanh(r.state.user @ p.init_weight.T + p.init_bias), r.state.user)
    for j, t in enumerate(h.sessions[1].queries):
        _, state = step(p, cfg, state, t)
        np.testing.assert_array_equal(m.values[:, j], state.hidden)
    m.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["unit", "q1", "q2", "q3", "q4", "q5"] and len(rows) == 101
    assert float(rows[1][1]) == m.values[0, 0]


def test_user_trace():
    p = init_params(ModelConfig(8, 4, "hnqs"), 1)
    h = users([[0, 1], [2, 3, 4], [5, 6]])[0]
    m = export_states(ModelRunner(p), h)
    assert m.values.shape == (4, 3)
    r = ModelRunner(p)
    r.replay([s.queries for s in h.sessions[:2]])
    np.testing.assert_array_equal(m.values[:, 1], r.state.user)


def test_export_errors():
    h = users([[0, 1]])[0]
    with pytest.raises(KeyError):
        export_states(ModelRunner(init_params(ModelConfig(4, 2, "hnqs"))), h, session_index=3)
    with pytest.raises(ValueError):
        export_states(ModelRunner(init_params(ModelConfig(4, 2, "nqs"))), h)
