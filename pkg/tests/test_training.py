import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ahnqs.batcher import schedule
from ahnqs.models import ModelConfig, ModelKind, init_params, suggest
from ahnqs.querylog import Session, UserHistory
from ahnqs.synthetic import successor_corpus
from ahnqs.training import (
    BatchTrainer,
    OptState,
    TrainConfig,
    TrainingDiverged,
    adagrad_momentum_step,
    check_model_gradients,
    top1_batch,
    top1_grad,
    top1_loss,
    train,
)

mpmath.mp.dps = 40


def mp_top1(s_pos, s_neg):
    sig = lambda z: 1 / (1 + mpmath.exp(-z))
    s_pos = mpmath.mpf(s_pos)
    return sum(sig(mpmath.mpf(s) - s_pos) + sig(mpmath.mpf(s) ** 2) for s in s_neg) / len(s_neg)


# -- TOP1 --------------------------------------------------------------------------

def test_top1_examples():
    assert top1_loss(0.0, [0.0]) == 1.0
    assert top1_loss(0.0, [0.0, 0.0]) == 1.0
    assert top1_loss(10.0, [0.0]) == pytest.approx(0.50004540, abs=1e-8)
    assert top1_loss(10.0, [0.0]) == pytest.approx(float(mp_top1(10, [0])), rel=1e-15)


def test_top1_needs_negatives():
    with pytest.raises(ValueError):
        top1_loss(0.0, [])
    with pytest.raises(ValueError):
        top1_grad(0.0, [])


@given(st.floats(-5, 5), st.lists(st.floats(-5, 5), min_size=1, max_size=10))
def test_top1_matches_oracles(s_pos, s_neg):
    got = top1_loss(s_pos, s_neg)
    assert got == pytest.approx(oracles.top1(s_pos, s_neg), rel=1e-13)
    assert got == pytest.approx(float(mp_top1(s_pos, s_neg)), rel=1e-13)
    assert 0 < got < 2


def test_top1_grad_at_origin():
    d_pos, d_neg = top1_grad(0.0, [0.0])
    assert d_pos == -0.25
    np.testing.assert_array_equal(d_neg, [0.25])


def test_top1_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(100):
        s_pos = rng.uniform(-1, 1)
        s_neg = rng.uniform(-1, 1, int(rng.integers(1, 8)))
        d_pos, d_neg = top1_grad(s_pos, s_neg)
        num = (top1_loss(s_pos + eps, s_neg) - top1_loss(s_pos - eps, s_neg)) / (2 * eps)
        assert abs(num - d_pos) < 1e-8
        for j in range(s_neg.size):
            up, down = s_neg.copy(), s_neg.copy()
            up[j] += eps
            down[j] -= eps
            num = (top1_loss(s_pos, up) - top1_loss(s_pos, down)) / (2 * eps)
            assert abs(num - d_neg[j]) < 1e-8


def test_regularizer_pushes_negative_scores_up():
    # near the bottom of the tanh range the score regularizer dominates and
    # the gradient on a negative score is negative, so descent raises it
    for s in (-0.9, -0.95, -1.0):
        assert top1_grad(0.0, [s])[1][0] < 0
    # far outside, both terms are below float64 resolution; check the exact value
    _, d = top1_grad(0.0, [-50.0])
    sig = lambda z: 1 / (1 + mpmath.exp(-z))
    exact = sig(-50) * (1 - sig(-50)) + 2 * -50 * sig(2500) * (1 - sig(2500))
    assert d[0] == pytest.approx(float(exact), rel=1e-10)


@given(st.integers(0, 10_000))
def test_top1_batch_matches_rows(seed):
    rng = np.random.default_rng(seed)
    A, N = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    s_pos = rng.uniform(-1, 1, A)
    s_neg = rng.uniform(-1, 1, (A, N))
    mask = rng.random((A, N)) < 0.7
    mask[:, 0] = True
    loss, d_pos, d_neg = top1_batch(s_pos, s_neg, mask)
    for a in range(A):
        negs = s_neg[a][mask[a]]
        assert loss[a] == pytest.approx(top1_loss(s_pos[a], negs), rel=1e-13)
        gp, gn = top1_grad(s_pos[a], negs)
        assert d_pos[a] == pytest.approx(gp, rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(d_neg[a][mask[a]], gn, rtol=1e-12, atol=1e-15)
        assert not d_neg[a][~mask[a]].any()


# -- optimizer ------------------------------------------------------------------------

def test_adagrad_first_step():
    p = {"w": np.array([[0.0]])}
    opt = OptState.for_params(p)
    adagrad_momentum_step(opt, p, {"w": np.array([[1.0]])}, 0.1, 0.0)
    assert p["w"][0, 0] == pytest.approx(-0.1 / (1 + 1e-6), rel=1e-15)
    assert p["w"][0, 0] == pytest.approx(-0.09999990, abs=1e-8)


def test_adagrad_zero_gradient_is_noop():
    p = {"w": np.array([[0.5, -0.2]])}
    opt = OptState.for_params(p)
    adagrad_momentum_step(opt, p, {"w": np.zeros((1, 2))}, 0.1, 0.9)
    np.testing.assert_array_equal(p["w"], [[0.5, -0.2]])


def scalar_adagrad(grads, lr, momentum, eps=1e-6):
    w, G, v, out = 0.0, 0.0, 0.0, []
    for g in grads:
        G += g * g
        v = momentum * v + g / (math.sqrt(G) + eps)
        w -= lr * v
        out.append(w)
    return out


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=20), st.sampled_from([0.0, 0.5, 0.9]))
def test_adagrad_matches_scalar_oracle(grads, momentum):
    p = {"w": np.zeros((1, 1))}
    opt = OptState.for_params(p)
    for g, want in zip(grads, scalar_adagrad(grads, 0.1, momentum)):
        adagrad_momentum_step(opt, p, {"w": np.array([[g]])}, 0.1, momentum)
        assert p["w"][0, 0] == pytest.approx(want, rel=1e-12, abs=1e-15)


@given(st.integers(0, 10_000))
def test_column_shortcut_equals_dense_update(seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(3, 6))
    dense = {"w": base.copy()}
    sparse = {"w": base.copy()}
    o1, o2 = OptState.for_params(dense), OptState.for_params(sparse)
    for _ in range(4):
        cols = np.unique(rng.integers(6, size=3))
        g = np.zeros((3, 6))
        g[:, cols] = rng.normal(size=(3, cols.size))
        adagrad_momentum_step(o1, dense, {"w": g}, 0.1, 0.0)
        adagrad_momentum_step(o2, sparse, {"w": g.copy()}, 0.1, 0.0, columns={"w": cols})
        np.testing.assert_array_equal(dense["w"], sparse["w"])
        np.testing.assert_array_equal(o1.accum["w"], o2.accum["w"])


def test_non_finite_gradient_named():
    p = {"session_gru.input_cand": np.zeros((1, 1))}
    with pytest.raises(FloatingPointError, match="session_gru.input_cand"):
        adagrad_momentum_step(OptState.for_params(p), p,
                              {"session_gru.input_cand": np.array([[np.inf]])}, 0.1, 0.0)


# -- config ------------------------------------------------------------------------------

def test_per_model_defaults():
    nqs, ahnqs = TrainConfig.for_model("nqs"), TrainConfig.for_model("ahnqs")
    assert (nqs.batch_size, nqs.dropout_hidden, nqs.learning_rate, nqs.momentum) == (50, 0.5, 0.01, 0.0)
    assert (ahnqs.batch_size, ahnqs.dropout_hidden, ahnqs.learning_rate, ahnqs.momentum) == (50, 0.1, 0.1, 0.0)
    assert TrainConfig.for_model("hnqs").learning_rate == 0.1
    assert (ahnqs.hidden_dim, ahnqs.epochs) == (100, 20)
    assert TrainConfig.for_model("nqs", learning_rate=None, epochs=3).learning_rate == 0.01


def test_config_validation_and_json():
    for bad in (dict(learning_rate=-1), dict(momentum=1.0), dict(epochs=0), dict(dropout_user=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig.from_json('{"epochs": 3, "seed": 9}') == TrainConfig(epochs=3, seed=9)


# -- trainer ---------------------------------------------------------------------------------

def quick(kind, **kw):
    base = dict(batch_size=10, learning_rate=0.05, dropout_hidden=0.0, dropout_user=0.0,
                epochs=5, hidden_dim=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_leaves_params_unchanged():
    corpus = successor_corpus(n_users=6)
    for kind in ModelKind:
        start = init_params(ModelConfig(4, 8, kind), 3)
        before = {k: v.copy() for k, v in start.as_dict().items()}
        train(corpus, 4, kind, quick(kind, learning_rate=0.0, epochs=3, dropout_hidden=0.3),
              params=start)
        for k, v in start.as_dict().items():
            assert v.tobytes() == before[k].tobytes(), k


@pytest.mark.parametrize("kind", list(ModelKind))
def test_learns_fixed_successor(kind):
    corpus = successor_corpus(seed=0)
    params, report = train(corpus, 4, kind, quick(kind))
    losses = report.epoch_loss
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert suggest(params, ModelConfig(4, 8, kind), [0], k=1).top[0] == 1


@pytest.mark.parametrize("kind", list(ModelKind))
def test_same_seed_same_params(kind):
    corpus = successor_corpus(n_users=8, seed=2)
    cfg = quick(kind, epochs=2, dropout_hidden=0.2, dropout_user=0.2, batch_size=3)
    a, ra = train(corpus, 4, kind, cfg)
    b, rb = train(corpus, 4, kind, cfg)
    assert ra.epoch_loss == rb.epoch_loss
    for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
        assert x.tobytes() == y.tobytes()
    c, _ = train(corpus, 4, kind, quick(kind, epochs=2, seed=1, batch_size=3))
    assert c.output.tobytes() != a.output.tobytes()


def test_momentum_and_clipping_paths_run():
    corpus = successor_corpus(n_users=8)
    for cfg in (quick("ahnqs", momentum=0.5), quick("ahnqs", clip_norm=0.01)):
        _, report = train(corpus, 4, "ahnqs", cfg)
        assert all(np.isfinite(report.epoch_loss))


def test_divergence_reports_epoch_and_step():
    corpus = successor_corpus(n_users=4)
    p = init_params(ModelConfig(4, 8, "nqs"), 0)
    p.output[0, 1] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1, step 0"):
        train(corpus, 4, "nqs", quick("nqs"), params=p)


def test_validation_metrics_per_epoch():
    corpus = successor_corpus(n_users=10, sessions_per_user=4)
    train_h = [UserHistory(h.user_id, h.sessions[:3]) for h in corpus]
    valid_h = [UserHistory(h.user_id, h.sessions[3:]) for h in corpus]
    _, report = train(train_h, 4, "hnqs", quick("hnqs", epochs=3), valid=valid_h)
    assert len(report.valid_mrr) == len(report.valid_recall) == 3
    assert all(0 <= m <= r <= 1 for m, r in zip(report.valid_mrr, report.valid_recall))


def test_log_sink_gets_one_json_line_per_epoch():
    import json

    lines = []
    train(successor_corpus(n_users=4), 4, "nqs", quick("nqs", epochs=2), log=lines.append)
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


@pytest.mark.parametrize("kind", list(ModelKind))
def test_batch_gradient_is_mean_of_slot_gradients(kind):
    # two users with identically shaped histories; explicit negatives
    sessions = {"u": [[0, 1, 2], [3, 4]], "v": [[4, 2, 0], [1, 1]]}
    negs = {"u": [[3, 4], [0], [2, 0]], "v": [[1], [3, 4], [0, 2]]}
    hs = [UserHistory(u, [Session(i, u, s, [0] * len(s)) for i, s in enumerate(ss)])
          for u, ss in sessions.items()]
    cfg = TrainConfig(batch_size=2, dropout_hidden=0.0, dropout_user=0.0, hidden_dim=3)
    params = init_params(ModelConfig(5, 3, kind), 1)

    def grads(histories, batch):
        tr = BatchTrainer(params, TrainConfig(**{**cfg.__dict__, "batch_size": batch}))
        it = {h.user_id: iter(negs[h.user_id]) for h in histories}
        for st_ in schedule(histories, batch, seed=None):
            tr.accumulate(st_, [next(it[s.user_id]) for s in st_.slots if s is not None])
        return tr.grads

    both = grads(hs, 2)
    gu, gv = grads(hs[:1], 1), grads(hs[1:], 1)
    for k in both:
        np.testing.assert_allclose(both[k], (gu[k] + gv[k]) / 2, rtol=1e-12, atol=1e-15)


def test_in_batch_negatives_exclude_own_target():
    cfg = TrainConfig(batch_size=4, min_negatives=3, hidden_dim=2)
    tr = BatchTrainer(init_params(ModelConfig(6, 2, "nqs"), 0), cfg, np.random.default_rng(0))
    targets = np.array([2, 2, 5])
    ids, mask = tr.in_batch_negatives(targets)
    for a, t in enumerate(targets):
        chosen = ids[a][mask[a]]
        assert t not in chosen and len(chosen) >= 3
    assert list(ids[2][mask[2]][:2]) == [2, 2]


# -- gradient checks ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(ModelKind))
@pytest.mark.parametrize("seed", range(3))
def test_model_gradients(kind, seed):
    assert check_model_gradients(kind, vocab_size=8, hidden_dim=5, seed=seed) < 1e-4


def test_model_gradients_single_session_and_short_sessions():
    for kind in ModelKind:
        assert check_model_gradients(kind, n_sessions=1, session_len=3) < 1e-4
        assert check_model_gradients(kind, n_sessions=2, session_len=2, seed=4) < 1e-4


def test_hierarchy_parameters_receive_gradient():
    sessions = [[0, 1, 2, 3], [2, 0, 1]]
    h = UserHistory("u", [Session(i, "u", s, [0] * len(s)) for i, s in enumerate(sessions)])
    cfg = TrainConfig(batch_size=1, dropout_hidden=0.0, dropout_user=0.0, hidden_dim=4)
    tr = BatchTrainer(init_params(ModelConfig(5, 4, "ahnqs"), 0), cfg,
                      initial_user_state=np.full(4, 0.3))
    for st_ in schedule([h], 1, seed=None):
        tr.accumulate(st_, [[4]])
    for name in ("attention", "user_gru.input_cand", "user_gru.hidden_update", "init_weight",
                 "init_bias", "session_gru.hidden_cand", "output"):
        assert np.abs(tr.grads[name]).max() > 0, name
