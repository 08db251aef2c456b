"""Dense numerics and the GRU cell.

Vectors and matrices are plain float64 numpy arrays. Every function here
broadcasts over a leading batch axis, so the same code serves a single
session (shape ``(d,)``) and a batch of slots (shape ``(B, d)``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


def _check(cond: bool, what: str, a, b) -> None:
    if not cond:
        raise DimensionError(f"{what}: shape {tuple(np.shape(a))} vs {tuple(np.shape(b))}")


def sigmoid(x):
    """Logistic function, stable over the whole float64 range."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(v):
    v = np.asarray(v, dtype=DTYPE)
    if v.shape[-1] == 0:
        raise ValueError("empty softmax input")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def matvec(m, v):
    m = np.asarray(m, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    _check(m.ndim == 2 and m.shape[1] == v.shape[-1], "matvec", m, v)
    return v @ m.T


def add(a, b):
    _check(np.shape(a) == np.shape(b), "add", a, b)
    return np.add(a, b)


def mul(a, b):
    _check(np.shape(a) == np.shape(b), "mul", a, b)
    return np.multiply(a, b)


def tanh(x):
    return np.tanh(x)


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


@dataclass
class GruParams:
    """Bias-free GRU weights. Input matrices are ``d_h x in_dim``."""

    input_update: np.ndarray
    input_reset: np.ndarray
    input_cand: np.ndarray
    hidden_update: np.ndarray
    hidden_reset: np.ndarray
    hidden_cand: np.ndarray

    def __post_init__(self):
        d_h, in_dim = self.input_update.shape
        if d_h <= 0:
            raise DimensionError("GRU hidden size must be positive")
        for f in fields(self):
            arr = getattr(self, f.name)
            want = (d_h, in_dim) if f.name.startswith("input") else (d_h, d_h)
            if arr.shape != want:
                raise DimensionError(f"{f.name}: shape {arr.shape}, expected {want}")

    @property
    def hidden_dim(self) -> int:
        return self.input_update.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_update.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden_dim: int) -> "GruParams":
        return cls(
            *(glorot_uniform(rng, hidden_dim, in_dim) for _ in range(3)),
            *(glorot_uniform(rng, hidden_dim, hidden_dim) for _ in range(3)),
        )

    @classmethod
    def zeros(cls, in_dim: int, hidden_dim: int) -> "GruParams":
        return cls(
            *(np.zeros((hidden_dim, in_dim)) for _ in range(3)),
            *(np.zeros((hidden_dim, hidden_dim)) for _ in range(3)),
        )

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class GruStepCache:
    x: np.ndarray | None  # dense input; None for token lookups
    h_prev: np.ndarray
    update: np.ndarray
    reset: np.ndarray
    cand: np.ndarray


@dataclass
class GruGrads:
    input_update: np.ndarray
    input_reset: np.ndarray
    input_cand: np.ndarray
    hidden_update: np.ndarray
    hidden_reset: np.ndarray
    hidden_cand: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


def gru_cell(p: GruParams, in_u, in_r, in_c, h_prev, force_update=None):
    """One GRU step given the input projections ``I_u x``, ``I_r x``, ``I x``.

    ``force_update`` pins the update gate to a constant (test hook).
    """
    u = sigmoid(in_u + h_prev @ p.hidden_update.T)
    if force_update is not None:
        u = np.full_like(u, force_update)
    r = sigmoid(in_r + h_prev @ p.hidden_reset.T)
    c = np.tanh(in_c + (r * h_prev) @ p.hidden_cand.T)
    h = (1.0 - u) * h_prev + u * c
    return h, u, r, c


def gru_forward(p: GruParams, x, h_prev, force_update=None):
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    _check(x.shape[-1] == p.input_dim, "gru input", x, p.input_update)
    _check(h_prev.shape[-1] == p.hidden_dim, "gru hidden", h_prev, p.hidden_update)
    h, u, r, c = gru_cell(
        p, x @ p.input_update.T, x @ p.input_reset.T, x @ p.input_cand.T, h_prev, force_update
    )
    return h, GruStepCache(x, h_prev, u, r, c)


def gru_forward_token(p: GruParams, token, h_prev, force_update=None):
    """GRU step on a one-hot input, done as a column lookup of the input matrices."""
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    tok = np.asarray(token)
    if np.any(tok < 0) or np.any(tok >= p.input_dim):
        raise IndexError(f"token {token} out of range [0, {p.input_dim})")
    h, u, r, c = gru_cell(
        p, p.input_update[:, tok].T, p.input_reset[:, tok].T, p.input_cand[:, tok].T,
        h_prev, force_update,
    )
    return h, GruStepCache(None, h_prev, u, r, c)


def gru_cell_backward(p: GruParams, h_prev, u, r, c, dh):
    """Backprop one step.

    Returns ``(dz_u, dz_r, dz_c, dh_prev, dH_u, dH_r, dH_c)`` where the ``dz_*``
    are gradients of the gate pre-activations (from which input-matrix
    gradients follow). Hidden-matrix gradients are summed over any batch axis.
    """
    dc = dh * u
    du = dh * (c - h_prev)
    dh_prev = dh * (1.0 - u)
    dz_c = dc * (1.0 - c * c)
    rh = r * h_prev
    d_rh = dz_c @ p.hidden_cand
    dr = d_rh * h_prev
    dh_prev = dh_prev + d_rh * r
    dz_u = du * u * (1.0 - u)
    dz_r = dr * r * (1.0 - r)
    dh_prev = dh_prev + dz_u @ p.hidden_update + dz_r @ p.hidden_reset
    if dh.ndim == 1:
        dHu, dHr, dHc = np.outer(dz_u, h_prev), np.outer(dz_r, h_prev), np.outer(dz_c, rh)
    else:
        dHu, dHr, dHc = dz_u.T @ h_prev, dz_r.T @ h_prev, dz_c.T @ rh
    return dz_u, dz_r, dz_c, dh_prev, dHu, dHr, dHc


def gru_backward(p: GruParams, cache: GruStepCache, dh_next) -> GruGrads:
    """Exact gradients of one step for a single (unbatched) dense-input cache."""
    dh_next = np.asarray(dh_next, dtype=DTYPE)
    _check(dh_next.shape == cache.h_prev.shape, "gru upstream grad", dh_next, cache.h_prev)
    if cache.x is None:
        raise ValueError("gru_backward needs a dense-input cache")
    dzu, dzr, dzc, dh_prev, dHu, dHr, dHc = gru_cell_backward(
        p, cache.h_prev, cache.update, cache.reset, cache.cand, dh_next
    )
    x = cache.x
    dx = dzu @ p.input_update + dzr @ p.input_reset + dzc @ p.input_cand
    return GruGrads(
        np.outer(dzu, x), np.outer(dzr, x), np.outer(dzc, x), dHu, dHr, dHc, dx, dh_prev
    )


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between ``analytic`` and central differences.

    ``loss_fn`` reads the arrays in ``params``, which are perturbed in place
    and restored afterwards.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for name, arr in params.items():
        g = analytic[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn()
            arr[idx] = orig - eps
            down = loss_fn()
            arr[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}{list(idx)}")
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(g[idx]), numeric, floor))
    return worst
