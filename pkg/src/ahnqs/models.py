"""NQS, HNQS and AHNQS forward computations, ranking and checkpoints."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import DTYPE, GruParams, glorot_uniform, gru_forward, gru_forward_token, softmax

MAX_TAPE = 256


class ModelKind(enum.IntEnum):
    NQS = 0
    HNQS = 1
    AHNQS = 2

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, ModelKind):
            return value
        return cls[str(value).upper()]

    @property
    def hierarchical(self) -> bool:
        return self is not ModelKind.NQS


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 100
    kind: ModelKind = ModelKind.AHNQS
    dropout_hidden: float = 0.0
    dropout_user: float = 0.0
    output_activation: str = "tanh"

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        for p in (self.dropout_hidden, self.dropout_user):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout must lie in [0, 1)")
        if self.output_activation != "tanh":
            raise ValueError("only the tanh output activation is supported")


@dataclass
class ModelParams:
    session_gru: GruParams
    output: np.ndarray  # d_h x V
    user_gru: GruParams | None = None
    init_weight: np.ndarray | None = None
    init_bias: np.ndarray | None = None
    attention: np.ndarray | None = None

    @property
    def kind(self) -> ModelKind:
        if self.attention is not None:
            return ModelKind.AHNQS
        if self.user_gru is not None:
            return ModelKind.HNQS
        return ModelKind.NQS

    @property
    def hidden_dim(self) -> int:
        return self.session_gru.hidden_dim

    @property
    def vocab_size(self) -> int:
        return self.output.shape[1]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All trainable arrays in declaration order (the checkpoint order)."""
        for name, arr in self.session_gru.items():
            yield f"session_gru.{name}", arr
        if self.user_gru is not None:
            for name, arr in self.user_gru.items():
                yield f"user_gru.{name}", arr
            yield "init_weight", self.init_weight
            yield "init_bias", self.init_bias
        if self.attention is not None:
            yield "attention", self.attention
        yield "output", self.output

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(
            GruParams(*(a.copy() for _, a in self.session_gru.items())),
            self.output.copy(),
            None if self.user_gru is None
            else GruParams(*(a.copy() for _, a in self.user_gru.items())),
            None if self.init_weight is None else self.init_weight.copy(),
            None if self.init_bias is None else self.init_bias.copy(),
            None if self.attention is None else self.attention.copy(),
        )


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, v = config.hidden_dim, config.vocab_size
    params = ModelParams(GruParams.init(rng, v, d), glorot_uniform(rng, d, v))
    if config.kind.hierarchical:
        params.user_gru = GruParams.init(rng, d, d)
        params.init_weight = glorot_uniform(rng, d, d)
        params.init_bias = np.zeros(d)
    if config.kind is ModelKind.AHNQS:
        params.attention = glorot_uniform(rng, d, d)
    return params


def zero_params(config: ModelConfig) -> ModelParams:
    params = init_params(config, 0)
    for _, arr in params.named_arrays():
        arr[...] = 0.0
    return params


def output_scores(params: ModelParams, h) -> np.ndarray:
    return np.tanh(h @ params.output)


def init_next_session(params: ModelParams, user_state) -> np.ndarray:
    """Initial session hidden state from the user state (hierarchical models)."""
    return np.tanh(user_state @ params.init_weight.T + params.init_bias)


def end_session_hnqs(params: ModelParams, tape, user_hidden):
    """Feed the last session state into the user GRU. Returns (new user state, cache)."""
    if len(tape) == 0:
        raise ValueError("session produced no states")
    return gru_forward(params.user_gru, np.asarray(tape[-1]), user_hidden)


def attention_weights(params: ModelParams, tape, user_hidden) -> np.ndarray:
    tape = np.asarray(tape, dtype=DTYPE)
    return softmax(tape @ (params.attention.T @ user_hidden))


def end_session_ahnqs(params: ModelParams, tape, user_hidden):
    """Attentive session summary into the user GRU.

    Returns (new user state, attention weights, cache).
    """
    if len(tape) == 0:
        raise ValueError("session produced no states")
    tape = np.asarray(tape, dtype=DTYPE)
    alpha = attention_weights(params, tape, user_hidden)
    summary = alpha @ tape
    new_user, cache = gru_forward(params.user_gru, summary, user_hidden)
    return new_user, alpha, cache


@dataclass
class SlotState:
    """Recurrent state of one slot: session hidden state, tape and user state."""

    hidden: np.ndarray
    user: np.ndarray
    tape: list[np.ndarray] = field(default_factory=list)
    started: bool = False


class ModelRunner:
    """Stateful single-stream inference with dropout disabled.

    Also implements the ranker protocol used by :mod:`ahnqs.evaluation`:
    ``begin_user``, ``begin_session``, ``feed``, ``rank``, ``end_session``.
    """

    def __init__(self, params: ModelParams, max_tape: int = MAX_TAPE):
        self.params = params
        self.kind = params.kind
        self.max_tape = max_tape
        d = params.hidden_dim
        self.state = SlotState(np.zeros(d), np.zeros(d))
        self.last_alpha: np.ndarray | None = None
        self.scores: np.ndarray | None = None

    def begin_user(self) -> None:
        d = self.params.hidden_dim
        self.state = SlotState(np.zeros(d), np.zeros(d))

    def begin_session(self) -> None:
        st = self.state
        st.tape = []
        st.started = True
        if self.kind.hierarchical:
            st.hidden = init_next_session(self.params, st.user)
        else:
            st.hidden = np.zeros(self.params.hidden_dim)
        self.scores = None

    def step(self, token: int) -> np.ndarray:
        if not self.state.started:
            self.begin_session()
        st = self.state
        st.hidden, _ = gru_forward_token(self.params.session_gru, int(token), st.hidden)
        st.tape.append(st.hidden)
        if len(st.tape) > self.max_tape:
            del st.tape[0]
        self.scores = output_scores(self.params, st.hidden)
        return self.scores

    feed = step

    def rank(self, target: int) -> float:
        return float(rank_of(self.scores, target))

    def end_session(self) -> np.ndarray | None:
        """Close the session, updating the user state. Returns attention weights."""
        st = self.state
        st.started = False
        self.last_alpha = None
        if not self.kind.hierarchical or not st.tape:
            return None
        if self.kind is ModelKind.AHNQS:
            st.user, self.last_alpha, _ = end_session_ahnqs(self.params, st.tape, st.user)
        else:
            st.user, _ = end_session_hnqs(self.params, st.tape, st.user)
        return self.last_alpha

    def replay(self, sessions: Sequence[Sequence[int]]) -> None:
        for s in sessions:
            self.begin_session()
            for t in s:
                self.step(t)
            self.end_session()


def step(params: ModelParams, config: ModelConfig, state: SlotState, token: int):
    """Advance one query. Returns ``(scores, state)``; ``state`` is updated in place."""
    if not 0 <= token < config.vocab_size:
        raise IndexError(f"token {token} out of range [0, {config.vocab_size})")
    state.hidden, _ = gru_forward_token(params.session_gru, token, state.hidden)
    if config.kind.hierarchical:
        state.tape.append(state.hidden)
        if len(state.tape) > MAX_TAPE:
            del state.tape[0]
    return output_scores(params, state.hidden), state


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the k best scores; ties go to the lower token id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:k]


def rank_of(scores, target: int) -> int:
    """1-based rank of ``target`` under the :func:`top_k` ordering."""
    scores = np.asarray(scores)
    s = scores[target]
    return 1 + int(np.count_nonzero(scores > s)) + int(np.count_nonzero(scores[:target] == s))


@dataclass
class RankedSuggestions:
    scores: np.ndarray
    top: np.ndarray

    def __iter__(self):
        return iter(self.top.tolist())


def suggest(
    params: ModelParams,
    config: ModelConfig,
    prefix: Sequence[int],
    history: Sequence[Sequence[int]] | None = None,
    k: int = 10,
) -> RankedSuggestions:
    if not prefix:
        raise ValueError("empty session prefix")
    unknown = [t for t in list(prefix) + [t for s in history or () for t in s]
               if not 0 <= t < config.vocab_size]
    if unknown:
        raise KeyError(f"unknown tokens: {unknown}")
    runner = ModelRunner(params)
    if history:
        runner.replay(history)
    runner.begin_session()
    for t in prefix:
        runner.step(t)
    return RankedSuggestions(runner.scores, top_k(runner.scores, k))


# Checkpoint format ---------------------------------------------------------

MAGIC = b"AHNQS"
VERSION_F64 = 1
VERSION_F32 = 2


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    params: ModelParams,
    path: str | Path,
    vocab_path: str = "",
    precision: str = "f64",
) -> None:
    if precision not in ("f64", "f32"):
        raise ValueError("precision must be 'f64' or 'f32'")
    version, dtype = (VERSION_F64, "<f8") if precision == "f64" else (VERSION_F32, "<f4")
    out = bytearray(MAGIC)
    out += struct.pack("<BB", version, int(params.kind))
    out += struct.pack("<QQ", params.vocab_size, params.hidden_dim)
    for _, arr in params.named_arrays():
        mat = arr.reshape(arr.shape[0], -1)
        out += struct.pack("<QQ", *mat.shape)
        out += np.ascontiguousarray(mat, dtype=dtype).tobytes()
    raw = vocab_path.encode("utf-8")
    out += struct.pack("<Q", len(raw)) + raw
    Path(path).write_bytes(bytes(out))


def _expected_shapes(kind: ModelKind, v: int, d: int) -> list[tuple[int, int]]:
    shapes = [(d, v)] * 3 + [(d, d)] * 3
    if kind.hierarchical:
        shapes += [(d, d)] * 6 + [(d, d), (d, 1)]
    if kind is ModelKind.AHNQS:
        shapes += [(d, d)]
    return shapes + [(d, v)]


def load_checkpoint(path: str | Path, expect_kind=None) -> tuple[ModelParams, ModelConfig, str]:
    """Read a checkpoint. Returns ``(params, config, vocab_path)``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, kind_b = struct.unpack("<BB", take(2))
    if version not in (VERSION_F64, VERSION_F32):
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        kind = ModelKind(kind_b)
    except ValueError:
        raise CheckpointError(f"{path}: unknown model kind byte {kind_b}") from None
    if expect_kind is not None and kind is not ModelKind.parse(expect_kind):
        raise CheckpointError(
            f"{path}: checkpoint holds a {kind.name} model, expected {ModelKind.parse(expect_kind).name}"
        )
    v, d = struct.unpack("<QQ", take(16))
    width = 8 if version == VERSION_F64 else 4
    arrays = []
    for want in _expected_shapes(kind, v, d):
        shape = struct.unpack("<QQ", take(16))
        if shape != want:
            raise CheckpointError(f"{path}: matrix shape {shape}, expected {want}")
        buf = take(shape[0] * shape[1] * width)
        arrays.append(np.frombuffer(buf, dtype="<f8" if width == 8 else "<f4")
                      .astype(DTYPE).reshape(shape))
    (n,) = struct.unpack("<Q", take(8))
    vocab_path = take(n).decode("utf-8")
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    params = ModelParams(GruParams(*arrays[:6]), arrays[-1])
    if kind.hierarchical:
        params.user_gru = GruParams(*arrays[6:12])
        params.init_weight = arrays[12]
        params.init_bias = arrays[13].reshape(d)
    if kind is ModelKind.AHNQS:
        params.attention = arrays[14]
    return params, ModelConfig(vocab_size=v, hidden_dim=d, kind=kind), vocab_path
