"""Block-streaming softmax with optional threshold-gated rescaling.

Scores are in the log2 domain: the caller folds ``alpha * log2(e)`` into
them, so every exponential is a 2^x. A state holds any number of rows;
single-row use is just ``rows=1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

DEFAULT_TAU = 8.0  # log2(256)
WARP_SIZE = 32

Exp2Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SoftmaxState:
    m: np.ndarray  # (rows,) last applied max, -inf before any data
    ell: np.ndarray  # (rows,)
    acc: np.ndarray  # (rows, d)
    tau: float = DEFAULT_TAU
    n_rescales: int = 0  # (row, block) pairs that took the rescale branch
    n_blocks: int = 0  # (row, block) pairs with at least one live score
    max_exp_arg: float = -math.inf
    max_stored_p: float = 0.0

    @classmethod
    def fresh(cls, d: int, rows: int = 1, tau: float = DEFAULT_TAU, dtype=np.float64) -> "SoftmaxState":
        return cls(
            m=np.full(rows, -np.inf, dtype=dtype),
            ell=np.zeros(rows, dtype=dtype),
            acc=np.zeros((rows, d), dtype=dtype),
            tau=tau,
        )

    @property
    def dtype(self):
        return self.acc.dtype

    @property
    def rows(self) -> int:
        return self.acc.shape[0]


@dataclass(frozen=True)
class RowStats:
    m_final: np.ndarray
    ell_final: np.ndarray
    lse: np.ndarray


def warp_uniform_predicate(row_group) -> bool:
    """True iff any row in the warp wants to rescale; then all of them do."""
    flags = np.asarray(row_group, dtype=bool)
    if not 1 <= flags.size <= WARP_SIZE:
        raise ValueError(f"a warp covers 1..{WARP_SIZE} rows, got {flags.size}")
    return bool(flags.any())


def _warp_broadcast(flags: np.ndarray, warp_size: int) -> np.ndarray:
    out = flags.copy()
    for lo in range(0, flags.size, warp_size):
        if warp_uniform_predicate(flags[lo : lo + warp_size]):
            out[lo : lo + warp_size] = True
    return out


def _update(
    state: SoftmaxState,
    scores,
    v_block,
    conditional: bool,
    exp2: Exp2Fn | None,
    quantize_p: Callable[[np.ndarray], np.ndarray] | None,
    warp_size: int | None,
) -> SoftmaxState:
    dt = state.dtype
    S = np.atleast_2d(np.asarray(scores, dtype=dt))
    V = np.asarray(v_block, dtype=dt)
    if S.shape[0] != state.rows:
        raise ValueError(f"scores have {S.shape[0]} rows, state has {state.rows}")
    if V.shape != (S.shape[1], state.acc.shape[1]):
        raise ValueError(f"v_block shape {V.shape} does not match ({S.shape[1]}, {state.acc.shape[1]})")
    exp2 = exp2 or np.exp2

    rowmax = S.max(axis=1)
    live = rowmax > -np.inf
    fresh = live & (state.m == -np.inf)
    m_cand = np.maximum(state.m, rowmax)
    with np.errstate(invalid="ignore"):
        growth = m_cand - state.m  # nan only for rows that are fresh or dead
    if conditional:
        want = live & ~fresh & (growth > state.tau)
    else:
        want = live & ~fresh & (m_cand > state.m)
    if warp_size:
        want = _warp_broadcast(want, warp_size) & live & ~fresh
    m_new = np.where(want | fresh, m_cand, state.m)
    m_safe = np.where(np.isfinite(m_new), m_new, 0.0).astype(dt)

    scale = np.ones_like(state.ell)
    if want.any():
        scale[want] = exp2((state.m[want] - m_new[want]).astype(dt))
    arg = S - m_safe[:, None]
    P = exp2(arg).astype(dt)

    max_arg = state.max_exp_arg
    finite = np.isfinite(arg) & live[:, None]
    if finite.any():
        max_arg = max(max_arg, float(arg[finite].max()))
    if want.any():
        max_arg = max(max_arg, float((state.m[want] - m_new[want]).max()))

    Pv = quantize_p(P) if quantize_p else P
    ell = state.ell * scale + P.sum(axis=1, dtype=dt)
    acc = state.acc * scale[:, None] + Pv @ V
    return replace(
        state,
        m=m_new,
        ell=ell.astype(dt),
        acc=acc.astype(dt),
        n_rescales=state.n_rescales + int(want.sum()),
        n_blocks=state.n_blocks + int(live.sum()),
        max_exp_arg=max_arg,
        max_stored_p=max(state.max_stored_p, float(P.max()) if P.size else 0.0),
    )


def update_always_rescale(state, scores, v_block, exp2=None, quantize_p=None) -> SoftmaxState:
    """Classical update: rescale whenever the running max grows.

    Rows seeing their first live block only initialise ``m``; that is not
    counted as a rescale since the accumulator is still empty.
    """
    return _update(state, scores, v_block, False, exp2, quantize_p, None)


def update_conditional(state, scores, v_block, exp2=None, quantize_p=None, warp_size=None) -> SoftmaxState:
    """Rescale only when the max grows by more than ``state.tau``.

    On the skip branch the old max is kept: the block is accumulated as
    ``2^(S - m_old) V`` and ``ell`` gains ``rowsum(2^(S - m_old))``. With
    ``warp_size`` set, a whole warp of rows rescales if any of them needs to.
    """
    if not state.tau > 0:
        raise ValueError("tau must be positive")
    return _update(state, scores, v_block, True, exp2, quantize_p, warp_size)


def finalize(state: SoftmaxState) -> tuple[np.ndarray, RowStats]:
    """Normalise the accumulator. Fully-masked rows give zeros and lse = -inf."""
    empty = state.ell == 0
    denom = np.where(empty, 1.0, state.ell).astype(state.dtype)
    out = np.where(empty[:, None], 0.0, state.acc / denom[:, None]).astype(state.dtype)
    with np.errstate(divide="ignore"):
        lse = np.where(empty, -np.inf, state.m + np.log2(denom))
    return out, RowStats(m_final=state.m.copy(), ell_final=state.ell.copy(), lse=lse)


def dense_softmax_v(scores, v) -> tuple[np.ndarray, np.ndarray]:
    """Reference base-2 softmax(scores) @ v and lse in float64, for tests and checks."""
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    V = np.asarray(v, dtype=np.float64)
    mx = S.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    E = np.exp2(S - mx)
    tot = E.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(tot > 0, E @ V / np.where(tot > 0, tot, 1.0), 0.0)
        lse = np.where(tot[:, 0] > 0, mx[:, 0] + np.log2(tot[:, 0]), -np.inf)
    return out, lse
