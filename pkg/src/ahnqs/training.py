"""TOP1 loss, AdaGrad with momentum, and session-parallel training.

Gradient graph per step: the loss at the current query backpropagates through
the whole current session, through the initial-state projection into the
user state, through the user GRU (and attention) into the hidden states of
the previous session, and through that session's recurrence. The user state
carried into the previous session is treated as a constant.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .batcher import BatchStep, schedule
from .core import finite_diff_check, gru_cell, gru_cell_backward, sigmoid, softmax
from .models import (
    MAX_TAPE,
    ModelConfig,
    ModelKind,
    ModelParams,
    ModelRunner,
    init_params,
)
from .querylog import Session, UserHistory

logger = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-6

# batch, dropout, learning rate, momentum per model
TABLE2 = {
    ModelKind.NQS: (50, 0.5, 0.01, 0.0),
    ModelKind.HNQS: (50, 0.1, 0.1, 0.0),
    ModelKind.AHNQS: (50, 0.1, 0.1, 0.0),
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 0.1
    momentum: float = 0.0
    dropout_hidden: float = 0.1
    dropout_user: float = 0.1
    epochs: int = 20
    seed: int = 0
    min_negatives: int = 1
    clip_norm: float | None = None
    hidden_dim: int = 100
    max_tape: int = MAX_TAPE

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for p in (self.dropout_hidden, self.dropout_user):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def for_model(cls, kind, **overrides) -> "TrainConfig":
        batch, dropout, lr, momentum = TABLE2[ModelKind.parse(kind)]
        base = dict(batch_size=batch, dropout_hidden=dropout, dropout_user=dropout,
                    learning_rate=lr, momentum=momentum)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    valid_mrr: list[float] = field(default_factory=list)
    valid_recall: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def epoch_json(self, epoch: int) -> str:
        row = {"epoch": epoch + 1, "loss": self.epoch_loss[epoch],
               "wall_time": self.wall_time[epoch]}
        if self.valid_mrr:
            row["valid_mrr@10"] = self.valid_mrr[epoch]
            row["valid_recall@10"] = self.valid_recall[epoch]
        return json.dumps(row)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# TOP1 ----------------------------------------------------------------------

def top1_loss(s_pos: float, s_neg: Sequence[float]) -> float:
    s_neg = np.asarray(s_neg, dtype=float)
    if s_neg.size == 0:
        raise ValueError("TOP1 needs at least one negative score")
    return float(np.mean(sigmoid(s_neg - s_pos) + sigmoid(s_neg**2)))


def top1_grad(s_pos: float, s_neg: Sequence[float]) -> tuple[float, np.ndarray]:
    """Derivatives of :func:`top1_loss` w.r.t. the positive and each negative score."""
    s_neg = np.asarray(s_neg, dtype=float)
    if s_neg.size == 0:
        raise ValueError("TOP1 needs at least one negative score")
    n = s_neg.size
    a = sigmoid(s_neg - s_pos)
    b = sigmoid(s_neg**2)
    da = a * (1.0 - a)
    return float(-da.sum() / n), (da + 2.0 * s_neg * b * (1.0 - b)) / n


def top1_batch(s_pos, s_neg, mask):
    """Row-wise TOP1 with padded negatives. Returns (losses, d_pos, d_neg)."""
    n = mask.sum(axis=1)
    a = sigmoid(s_neg - s_pos[:, None])
    b = sigmoid(s_neg * s_neg)
    loss = ((a + b) * mask).sum(axis=1) / n
    da = a * (1.0 - a) * mask
    d_pos = -da.sum(axis=1) / n
    d_neg = (da + 2.0 * s_neg * b * (1.0 - b) * mask) / n[:, None]
    return loss, d_pos, d_neg


# Optimizer -----------------------------------------------------------------

@dataclass
class OptState:
    accum: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    eps: float = ADAGRAD_EPS

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adagrad_momentum_step(
    opt: OptState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    columns: dict[str, np.ndarray] | None = None,
) -> None:
    """In-place update: ``G += g*g; v = momentum*v + g/(sqrt(G)+eps); p -= lr*v``.

    ``columns`` optionally lists, per parameter, the only columns with nonzero
    gradient. It is used as a shortcut when ``momentum == 0``, where untouched
    columns provably do not move.
    """
    for name, p in params.items():
        g = grads[name]
        cols = None if columns is None or momentum != 0.0 else columns.get(name)
        if cols is not None:
            g = g[:, cols]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if cols is None:
            G, v = opt.accum[name], opt.velocity[name]
            G += g * g
            v *= momentum
            v += g / (np.sqrt(G) + opt.eps)
            p -= lr * v
        else:
            G = opt.accum[name][:, cols] + g * g
            opt.accum[name][:, cols] = G
            v = g / (np.sqrt(G) + opt.eps)
            opt.velocity[name][:, cols] = v
            p[:, cols] -= lr * v


# Session-parallel trainer --------------------------------------------------

WIDE = ("session_gru.input_update", "session_gru.input_reset",
        "session_gru.input_cand", "output")


def _mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    if p <= 0.0:
        return np.ones(shape)
    keep = 1.0 - p
    return (rng.random(shape) < keep) / keep


class BatchTrainer:
    """Holds per-slot recurrent state and accumulates gradients step by step.

    Each slot keeps two tape buffers (current and previous session); ``cur``
    says which one is current and is flipped at a session boundary.
    """

    def __init__(
        self,
        params: ModelParams,
        config: TrainConfig,
        rng: np.random.Generator | None = None,
        initial_user_state: np.ndarray | None = None,
        attention_hook: Callable[[np.ndarray], None] | None = None,
    ):
        self.params = params
        self.kind = params.kind
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.attention_hook = attention_hook
        B, T, D = config.batch_size, config.max_tape, params.hidden_dim
        self.B, self.T, self.D = B, T, D
        self.user0 = np.zeros(D) if initial_user_state is None else np.asarray(initial_user_state)
        self.tok = np.zeros((2, B, T), dtype=np.int64)
        self.h = np.zeros((2, B, T + 1, D))
        self.gate_u = np.zeros((2, B, T, D))
        self.gate_r = np.zeros((2, B, T, D))
        self.cand = np.zeros((2, B, T, D))
        self.length = np.zeros((2, B), dtype=np.int64)
        self.from_init = np.zeros((2, B), dtype=bool)
        self.init_in = np.zeros((2, B, D))
        self.cur = np.zeros(B, dtype=np.int64)
        self.has_prev = np.zeros(B, dtype=bool)
        self.user_h = np.zeros((B, D))
        self.last_target = np.zeros(B, dtype=np.int64)
        # user-GRU step that produced the state feeding the current session
        self.uc_x = np.zeros((B, D))
        self.uc_hprev = np.zeros((B, D))
        self.uc_u = np.zeros((B, D))
        self.uc_r = np.zeros((B, D))
        self.uc_c = np.zeros((B, D))
        self.user_mask = np.ones((B, D))
        self.alpha = np.zeros((B, T))
        self.named = params.as_dict()
        self.grads = {k: np.zeros_like(v) for k, v in self.named.items()}
        self.touched: dict[str, list[np.ndarray]] = {k: [] for k in WIDE}
        self.opt = OptState.for_params(self.named)

    # -- state management -------------------------------------------------

    def _start_session(self, slots: np.ndarray, user_start: np.ndarray) -> None:
        p, cfg = self.params, self.config
        if not self.kind.hierarchical:
            c = self.cur[slots]
            self.length[c, slots] = 0
            self.h[c, slots, 0] = 0.0
            self.from_init[c, slots] = False
            self.has_prev[slots] = False
            return
        closing = slots[~user_start]
        if closing.size:
            self._close_sessions(closing)
        fresh = slots[user_start]
        self.user_h[fresh] = self.user0
        self.has_prev[fresh] = False
        self.cur[closing] = 1 - self.cur[closing]
        self.has_prev[closing] = True
        c = self.cur[slots]
        mask = _mask(self.rng, (slots.size, self.D), cfg.dropout_user)
        mask[user_start] = 1.0
        u_in = self.user_h[slots] * mask
        self.user_mask[slots] = mask
        self.init_in[c, slots] = u_in
        self.h[c, slots, 0] = np.tanh(u_in @ p.init_weight.T + p.init_bias)
        self.length[c, slots] = 0
        self.from_init[c, slots] = True

    def _close_sessions(self, slots: np.ndarray) -> None:
        """Feed each session's final query, then run the user-level update."""
        self._forward(slots, self.last_target[slots])
        p = self.params
        c = self.cur[slots]
        q = self.user_h[slots]
        x = np.empty((slots.size, self.D))
        for i, (b, cb) in enumerate(zip(slots, c)):
            L = self.length[cb, b]
            tape = self.h[cb, b, 1:L + 1]
            if self.kind is ModelKind.AHNQS:
                a = softmax(tape @ (p.attention.T @ q[i]))
                self.alpha[b, :L] = a
                self.alpha[b, L:] = 0.0
                x[i] = a @ tape
                if self.attention_hook is not None:
                    self.attention_hook(a)
            else:
                x[i] = tape[-1]
        ug = p.user_gru
        new_h, u, r, cc = gru_cell(ug, x @ ug.input_update.T, x @ ug.input_reset.T,
                                   x @ ug.input_cand.T, q)
        self.uc_x[slots], self.uc_hprev[slots] = x, q
        self.uc_u[slots], self.uc_r[slots], self.uc_c[slots] = u, r, cc
        self.user_h[slots] = new_h

    def _forward(self, slots: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        c = self.cur[slots]
        full = self.length[c, slots] >= self.T
        for b, cb in zip(slots[full], c[full]):
            # tape is capped: drop the oldest step, cutting the path to h_0
            for arr in (self.tok, self.gate_u, self.gate_r, self.cand):
                arr[cb, b, :-1] = arr[cb, b, 1:].copy()
            self.h[cb, b, :-1] = self.h[cb, b, 1:].copy()
            self.length[cb, b] -= 1
            self.from_init[cb, b] = False
        L = self.length[c, slots]
        sg = self.params.session_gru
        h_prev = self.h[c, slots, L]
        h, u, r, cand = gru_cell(sg, sg.input_update[:, tokens].T, sg.input_reset[:, tokens].T,
                                 sg.input_cand[:, tokens].T, h_prev)
        self.tok[c, slots, L] = tokens
        self.gate_u[c, slots, L] = u
        self.gate_r[c, slots, L] = r
        self.cand[c, slots, L] = cand
        self.h[c, slots, L + 1] = h
        self.length[c, slots] = L + 1
        return h

    # -- backward ---------------------------------------------------------

    def _bptt(self, buf, slots, dh_top, inject=None):
        """Backprop through stored session steps; returns d h_0 per row.

        ``dh_top`` is the gradient of each row's newest state; ``inject``
        (rows x T+1 x D) adds gradients at intermediate positions.
        """
        sg = self.params.session_gru
        g = self.grads
        L = self.length[buf, slots]
        dh = dh_top.copy()
        for k in range(int(L.max(initial=0)) - 1, -1, -1):
            if inject is not None:
                dh += inject[:, k + 1]
            sel = np.nonzero(L > k)[0]
            rows, bs = slots[sel], buf[sel]
            dzu, dzr, dzc, dhp, dHu, dHr, dHc = gru_cell_backward(
                sg, self.h[bs, rows, k], self.gate_u[bs, rows, k],
                self.gate_r[bs, rows, k], self.cand[bs, rows, k], dh[sel])
            g["session_gru.hidden_update"] += dHu
            g["session_gru.hidden_reset"] += dHr
            g["session_gru.hidden_cand"] += dHc
            toks = self.tok[bs, rows, k]
            for name, dz in (("input_update", dzu), ("input_reset", dzr), ("input_cand", dzc)):
                key = f"session_gru.{name}"
                np.add.at(g[key].T, toks, dz)
                self.touched[key].append(toks)
            dh[sel] = dhp
        return dh

    def _init_backward(self, buf, slots, dh0):
        """Gradient through h_0 = tanh(W u + b); returns d(u_in) per row."""
        h0 = self.h[buf, slots, 0]
        da = dh0 * (1.0 - h0 * h0)
        self.grads["init_weight"] += da.T @ self.init_in[buf, slots]
        self.grads["init_bias"] += da.sum(axis=0)
        return da @ self.params.init_weight

    def _backward(self, slots: np.ndarray, dh: np.ndarray) -> None:
        p, g = self.params, self.grads
        c = self.cur[slots]
        dh0 = self._bptt(c, slots, dh)
        if not self.kind.hierarchical:
            return
        sel = self.from_init[c, slots]
        if not sel.any():
            return
        slots, c, dh0 = slots[sel], c[sel], dh0[sel]
        du_in = self._init_backward(c, slots, dh0)
        sel = self.has_prev[slots]
        if not sel.any():
            return
        slots, du = slots[sel], du_in[sel] * self.user_mask[slots[sel]]
        ug = p.user_gru
        x = self.uc_x[slots]
        dzu, dzr, dzc, _, dHu, dHr, dHc = gru_cell_backward(
            ug, self.uc_hprev[slots], self.uc_u[slots], self.uc_r[slots], self.uc_c[slots], du)
        g["user_gru.input_update"] += dzu.T @ x
        g["user_gru.input_reset"] += dzr.T @ x
        g["user_gru.input_cand"] += dzc.T @ x
        g["user_gru.hidden_update"] += dHu
        g["user_gru.hidden_reset"] += dHr
        g["user_gru.hidden_cand"] += dHc
        dx = dzu @ ug.input_update + dzr @ ug.input_reset + dzc @ ug.input_cand
        pb = 1 - self.cur[slots]
        L = self.length[pb, slots]
        Tm = int(L.max())
        inject = np.zeros((slots.size, Tm + 1, self.D))
        if self.kind is ModelKind.AHNQS:
            tape = self.h[pb, slots, 1:Tm + 1]
            alpha = self.alpha[slots, :Tm]
            q = self.uc_hprev[slots]
            d_alpha = np.einsum("atd,ad->at", tape, dx)
            de = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
            g["attention"] += q.T @ np.einsum("at,atd->ad", de, tape)
            inject[:, 1:] = alpha[..., None] * dx[:, None, :] + de[..., None] * (q @ p.attention)[:, None, :]
        else:
            inject[np.arange(slots.size), L] = dx
        dh0_prev = self._bptt(pb, slots, np.zeros((slots.size, self.D)), inject)
        sel = self.from_init[pb, slots]
        if sel.any():
            self._init_backward(pb[sel], slots[sel], dh0_prev[sel])

    # -- public API --------------------------------------------------------

    def in_batch_negatives(self, targets: np.ndarray):
        """Padded negative ids and mask: other slots' targets, own target excluded."""
        A = targets.size
        ids = np.broadcast_to(targets, (A, A))
        mask = targets[None, :] != targets[:, None]
        need = self.config.min_negatives - mask.sum(axis=1)
        extra = int(need.max(initial=0))
        if extra > 0:
            V = self.params.vocab_size
            draw = self.rng.integers(V - 1, size=(A, extra))
            draw = draw + (draw >= targets[:, None])
            ids = np.concatenate([ids, draw], axis=1)
            mask = np.concatenate([mask, np.arange(extra)[None, :] < need[:, None]], axis=1)
        return ids, mask

    def accumulate(self, step: BatchStep, negatives: Sequence[Sequence[int]] | None = None) -> float:
        """Forward + backward for one batch step; gradients add into ``self.grads``.

        Returns the mean TOP1 loss over active slots.
        """
        active = np.array(step.active_indices(), dtype=np.int64)
        if active.size == 0:
            return 0.0
        slot_objs = [step.slots[i] for i in active]
        starts = np.array([s.session_start or s.user_start for s in slot_objs])
        if starts.any():
            ustart = np.array([s.user_start for s in slot_objs])[starts]
            self._start_session(active[starts], ustart)
        tokens = np.array([s.input_token for s in slot_objs], dtype=np.int64)
        targets = np.array([s.target_token for s in slot_objs], dtype=np.int64)
        if not np.all((tokens >= 0) & (tokens < self.params.vocab_size)):
            raise IndexError("input token out of range")
        h = self._forward(active, tokens)
        self.last_target[active] = targets
        if negatives is None:
            neg_ids, neg_mask = self.in_batch_negatives(targets)
        else:
            width = max(len(n) for n in negatives)
            neg_ids = np.zeros((active.size, width), dtype=np.int64)
            neg_mask = np.zeros((active.size, width), dtype=bool)
            for i, n in enumerate(negatives):
                neg_ids[i, :len(n)] = n
                neg_mask[i, :len(n)] = True
        if not neg_mask.any(axis=1).all():
            raise ValueError("a slot has no negatives; set min_negatives >= 1")
        drop = _mask(self.rng, h.shape, self.config.dropout_hidden)
        hd = h * drop
        ids = np.concatenate([targets[:, None], neg_ids], axis=1)
        W = self.params.output[:, ids]  # D x A x (1+N)
        s = np.tanh(np.einsum("ad,dan->an", hd, W))
        loss, d_pos, d_neg = top1_batch(s[:, 0], s[:, 1:], neg_mask)
        A = active.size
        ds = np.concatenate([d_pos[:, None], d_neg], axis=1) / A
        dz = ds * (1.0 - s * s)
        np.add.at(self.grads["output"].T, ids.ravel(),
                  (dz[:, :, None] * hd[:, None, :]).reshape(-1, self.D))
        self.touched["output"].append(ids.ravel())
        dh = np.einsum("an,dan->ad", dz, W) * drop
        self._backward(active, dh)
        return float(loss.mean())

    def apply(self) -> None:
        cfg = self.config
        columns = {k: np.unique(np.concatenate(v)) if v else np.zeros(0, dtype=np.int64)
                   for k, v in self.touched.items()}
        if cfg.clip_norm:
            sq = sum(float((g[:, columns[k]] ** 2).sum()) if k in columns else float((g ** 2).sum())
                     for k, g in self.grads.items())
            norm = np.sqrt(sq)
            if norm > cfg.clip_norm:
                for g in self.grads.values():
                    g *= cfg.clip_norm / norm
        adagrad_momentum_step(self.opt, self.named, self.grads, cfg.learning_rate,
                              cfg.momentum, columns)
        self.zero_grad(columns)

    def zero_grad(self, columns=None) -> None:
        for k, g in self.grads.items():
            if columns is not None and k in columns:
                g[:, columns[k]] = 0.0
            else:
                g[...] = 0.0
        for v in self.touched.values():
            v.clear()


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    train_histories: Sequence[UserHistory],
    vocab_size: int,
    kind,
    config: TrainConfig,
    valid: Sequence[UserHistory] | None = None,
    params: ModelParams | None = None,
    log: Callable[[str], None] | None = None,
    attention_hook: Callable[[np.ndarray], None] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train one model. Deterministic for a fixed ``config.seed``."""
    kind = ModelKind.parse(kind)
    init_rng, run_rng = (np.random.default_rng(s)
                         for s in np.random.SeedSequence(config.seed).spawn(2))
    model_cfg = ModelConfig(vocab_size, config.hidden_dim, kind,
                            config.dropout_hidden, config.dropout_user)
    if params is None:
        params = init_params(model_cfg, init_rng)
    trainer = BatchTrainer(params, config, run_rng, attention_hook=attention_hook)
    report = TrainReport()
    history_by_user = {h.user_id: h for h in train_histories}
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total, n = 0.0, 0
        for i, st in enumerate(schedule(train_histories, config.batch_size,
                                        epoch_seed(config.seed, epoch))):
            loss = trainer.accumulate(st)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {i}")
            trainer.apply()
            total += loss
            n += 1
        report.epoch_loss.append(total / max(n, 1))
        if valid:
            from .evaluation import evaluate

            rep = evaluate(ModelRunner(params), valid, k=10, history=history_by_user)
            report.valid_mrr.append(rep.mrr)
            report.valid_recall.append(rep.recall)
        report.wall_time.append(time.perf_counter() - t0)
        logger.info("epoch %d: %s", epoch + 1, report.epoch_json(epoch))
        if log is not None:
            log(report.epoch_json(epoch))
    return params, report


# Gradient check ------------------------------------------------------------

def window_loss(
    params: ModelParams,
    sessions: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    carried_user: Sequence[np.ndarray],
) -> float:
    """Total TOP1 loss of a single-user run, with the user state carried into
    session ``s-1`` frozen at ``carried_user[s-1]`` when scoring session ``s``.

    ``negatives`` lists one negative set per prediction, in order.
    """
    total = 0.0
    neg_iter = iter(negatives)
    for s, session in enumerate(sessions):
        first = max(0, s - 1)
        runner = ModelRunner(params)
        if params.kind.hierarchical:
            runner.state.user = np.array(carried_user[first])
        for t in range(first, s):
            runner.replay([sessions[t]])
        runner.begin_session()
        for k in range(len(session) - 1):
            scores = runner.step(session[k])
            negs = next(neg_iter)
            total += top1_loss(scores[session[k + 1]], scores[list(negs)])
    return total


def check_model_gradients(
    kind,
    vocab_size: int = 6,
    hidden_dim: int = 4,
    n_sessions: int = 2,
    session_len: int = 4,
    n_negatives: int = 3,
    seed: int = 0,
    eps: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Max relative error between trainer gradients and central differences
    on a toy single-user run. Hierarchical models start from a random user
    state, as if the window sat in the middle of a longer history.

    ``floor`` bounds the error denominator from below; central differences
    of an O(10) loss at ``eps=1e-5`` carry about 1e-10 of round-off.
    """
    kind = ModelKind.parse(kind)
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(vocab_size, hidden_dim, kind), rng)
    if kind.hierarchical:
        params.init_bias[:] = rng.uniform(-0.5, 0.5, hidden_dim)
    user0 = rng.uniform(-0.9, 0.9, hidden_dim) if kind.hierarchical else np.zeros(hidden_dim)
    sessions = [list(rng.integers(vocab_size, size=session_len)) for _ in range(n_sessions)]
    negatives = []
    for s in sessions:
        for k in range(len(s) - 1):
            pool = [t for t in range(vocab_size) if t != s[k + 1]]
            negatives.append(list(rng.choice(pool, size=n_negatives, replace=False)))

    history = UserHistory("toy", [Session(i, "toy", s, list(range(len(s))))
                                  for i, s in enumerate(sessions)])
    cfg = TrainConfig(batch_size=1, dropout_hidden=0.0, dropout_user=0.0,
                      hidden_dim=hidden_dim, epochs=1)
    trainer = BatchTrainer(params, cfg, np.random.default_rng(seed), initial_user_state=user0)
    neg_iter = iter(negatives)
    for st in schedule([history], 1, seed=None):
        trainer.accumulate(st, [next(neg_iter)])
    analytic = {k: g.copy() for k, g in trainer.grads.items()}

    carried = [user0]
    if kind.hierarchical:
        runner = ModelRunner(params)
        runner.state.user = user0.copy()
        for s in sessions[:-1]:
            runner.replay([s])
            carried.append(runner.state.user.copy())
    return finite_diff_check(
        lambda: window_loss(params, sessions, negatives, carried), params.as_dict(), analytic, eps, floor
    )
