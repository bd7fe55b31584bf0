"""Tiled attention forward/backward at the algorithm level.

Two precisions: ``FP64_ORACLE`` runs everything in float64 so tiled and
dense results agree to rounding, ``KERNEL_FAITHFUL`` rounds Q/K/V and the
P/dS tiles through bf16 and keeps float32 accumulators.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fastmath
from .roofline import CtaMode
from .online_softmax import DEFAULT_TAU, WARP_SIZE, SoftmaxState, finalize, update_conditional

LOG2E = math.log2(math.e)
ATOMIC_ROW_SPLIT = 2  # one dQ reduction per query-tile row half
ATOMIC_D_CHUNK = 128


class Precision(enum.Enum):
    FP64_ORACLE = "fp64"
    KERNEL_FAITHFUL = "kernel-faithful"


@dataclass(frozen=True)
class ExpMode:
    """Which exponential path each score entry takes.

    ``reference`` is the hardware-like path, ``emulated`` sends every entry
    through the polynomial, ``mixed`` sends a fraction of each row.
    """

    kind: str = "reference"
    degree: int = 3
    fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("reference", "emulated", "mixed"):
            raise ValueError(f"unknown exp mode {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("mixed fraction must be in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "ExpMode":
        kind, _, arg = text.partition(":")
        if kind == "reference":
            return cls()
        if kind == "emulated":
            return cls("emulated", degree=int(arg or 3))
        if kind == "mixed":
            frac, _, deg = arg.partition(":")
            return cls("mixed", degree=int(deg or 3), fraction=float(frac))
        raise ValueError(f"unknown exp mode {text!r}")

    def emulated_columns(self, cols: np.ndarray) -> np.ndarray:
        """Deterministic stride pattern: column j is emulated when floor((j+1)f) > floor(jf)."""
        if self.kind == "reference":
            return np.zeros(cols.shape, dtype=bool)
        if self.kind == "emulated":
            return np.ones(cols.shape, dtype=bool)
        f = self.fraction
        return np.floor((cols + 1) * f) > np.floor(cols * f)


@dataclass(frozen=True)
class AttentionParams:
    n_q: int
    n_kv: int
    d: int
    alpha: float | None = None
    causal: bool = False
    tile_m: int = 128
    tile_n: int = 128
    tau: float = DEFAULT_TAU
    exp_mode: ExpMode = field(default_factory=ExpMode)
    precision: Precision = Precision.FP64_ORACLE

    def __post_init__(self):
        if self.tile_m < 1 or self.tile_n < 1:
            raise ValueError("tile sizes must be >= 1")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d) if self.alpha is None else self.alpha

    @property
    def kv_offset(self) -> int:
        return self.n_kv - self.n_q

    @property
    def n_q_tiles(self) -> int:
        return -(-self.n_q // self.tile_m)

    @property
    def n_kv_tiles(self) -> int:
        return -(-self.n_kv // self.tile_n)


@dataclass
class ForwardOutput:
    O: np.ndarray
    lse: np.ndarray  # base-2, in units of alpha * log2(e) * q.k
    kv_tiles_visited: list[int] = field(default_factory=list)
    n_rescales: int = 0
    n_row_blocks: int = 0


@dataclass
class BackwardOutput:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    D: np.ndarray
    atomic_adds: int = 0


def causal_mask(i_query: int, j_key: int, n_q: int, n_kv: int) -> bool:
    """True when (i, j) is masked. Bottom-right aligned: j <= i + (n_kv - n_q) is visible."""
    if not (0 <= i_query < n_q and 0 <= j_key < n_kv):
        raise IndexError("index out of range")
    return j_key > i_query + (n_kv - n_q)


def _mask_block(rows: np.ndarray, cols: np.ndarray, offset: int) -> np.ndarray:
    return cols[None, :] > rows[:, None] + offset


def _check_shapes(Q, K, V, params: AttentionParams):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape != (params.n_q, params.d):
        raise ValueError(f"Q shape {Q.shape} != ({params.n_q}, {params.d})")
    if K.shape != (params.n_kv, params.d) or V.shape[0] != params.n_kv:
        raise ValueError(f"K/V shapes {K.shape}/{V.shape} do not match n_kv={params.n_kv}, d={params.d}")


def attention_reference(Q, K, V, params: AttentionParams) -> ForwardOutput:
    """Dense float64 softmax(alpha Q K^T) V with the row max subtracted."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check_shapes(Q, K, V, params)
    S = params.scale * (Q @ K.T)
    if params.causal:
        S[_mask_block(np.arange(params.n_q), np.arange(params.n_kv), params.kv_offset)] = -np.inf
    mx = S.max(axis=1, keepdims=True)
    live = np.isfinite(mx[:, 0])
    mx = np.where(np.isfinite(mx), mx, 0.0)
    E = np.exp(S - mx)
    tot = E.sum(axis=1, keepdims=True)
    safe = np.where(tot > 0, tot, 1.0)
    O = np.where(live[:, None], (E / safe) @ V, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.where(live, (mx[:, 0] + np.log(safe[:, 0])) * LOG2E, -np.inf)
    return ForwardOutput(O=O, lse=lse)


def _prepare(arrays, precision: Precision):
    if precision is Precision.FP64_ORACLE:
        return [np.asarray(a, dtype=np.float64) for a in arrays], np.float64
    return [fastmath.bf16_round_trip(np.asarray(a, dtype=np.float32)) for a in arrays], np.float32


def _tile_exp2(mode: ExpMode, cols: np.ndarray, dtype):
    if mode.kind == "reference":
        if dtype == np.float32:
            return fastmath.exp2_reference
        return np.exp2
    poly = fastmath.fit_minimax(mode.degree)
    emu = mode.emulated_columns(cols)

    def exp2(a):
        a = np.asarray(a)
        out = np.exp2(a.astype(np.float64)) if dtype == np.float64 else fastmath.exp2_reference(a)
        if a.ndim == 2 and a.shape[1] == cols.size and emu.any():
            sub = a[:, emu]
            # the emulated path is float32-only; masked -inf entries stay exact zeros
            vals = fastmath.exp2_emulated(np.where(np.isfinite(sub), sub, -127.0), poly)
            out[:, emu] = np.where(np.isfinite(sub), vals, 0.0)
        return out.astype(dtype)

    return exp2


def kv_tiles_for_query_tile(q0: int, q1: int, params: AttentionParams) -> int:
    """Number of leading KV tiles a query tile [q0, q1) has to visit."""
    if not params.causal:
        return params.n_kv_tiles
    last_visible = (q1 - 1) + params.kv_offset
    if last_visible < 0:
        return 0
    return min(params.n_kv_tiles, last_visible // params.tile_n + 1)


def attention_forward_tiled(Q, K, V, params: AttentionParams) -> ForwardOutput:
    (Q, K, V), dt = _prepare((Q, K, V), params.precision)
    _check_shapes(Q, K, V, params)
    faithful = params.precision is Precision.KERNEL_FAITHFUL
    quant = fastmath.bf16_round_trip if faithful else None
    s_scale = dt(params.scale * LOG2E)

    O = np.zeros((params.n_q, V.shape[1]), dtype=dt)
    lse = np.full(params.n_q, -np.inf)
    visited, n_rescales, n_blocks = [], 0, 0
    for q0 in range(0, params.n_q, params.tile_m):
        q1 = min(q0 + params.tile_m, params.n_q)
        rows = np.arange(q0, q1)
        state = SoftmaxState.fresh(V.shape[1], rows=q1 - q0, tau=params.tau, dtype=dt)
        n_visit = kv_tiles_for_query_tile(q0, q1, params)
        for t in range(n_visit):
            k0 = t * params.tile_n
            k1 = min(k0 + params.tile_n, params.n_kv)
            cols = np.arange(k0, k1)
            S = (Q[q0:q1] @ K[k0:k1].T).astype(dt) * s_scale
            if params.causal:
                S[_mask_block(rows, cols, params.kv_offset)] = -np.inf
            state = update_conditional(
                state,
                S,
                V[k0:k1],
                exp2=_tile_exp2(params.exp_mode, cols, dt),
                quantize_p=quant,
                warp_size=WARP_SIZE,
            )
        out, stats = finalize(state)
        O[q0:q1] = out
        lse[q0:q1] = stats.lse
        visited.append(n_visit)
        n_rescales += state.n_rescales
        n_blocks += state.n_blocks
    if faithful:
        O = fastmath.bf16_round_trip(O)
    return ForwardOutput(O=O, lse=lse, kv_tiles_visited=visited, n_rescales=n_rescales, n_row_blocks=n_blocks)


def attention_backward_preprocess(dO, O) -> np.ndarray:
    """D_i = sum_k dO_ik * O_ik."""
    dO = np.asarray(dO)
    O = np.asarray(O)
    if dO.shape != O.shape:
        raise ValueError(f"dO shape {dO.shape} != O shape {O.shape}")
    return np.einsum("ik,ik->i", dO, O)


class DqAccumulator:
    """Shared dQ buffer. Every add is one modeled global atomic per row-half and d-chunk."""

    def __init__(self, n_q: int, d: int, dtype):
        self.value = np.zeros((n_q, d), dtype=dtype)
        self.atomic_adds = 0
        self.d_chunks = -(-d // ATOMIC_D_CHUNK)
        self.log: list[tuple[int, int]] = []

    def add(self, q0: int, q1: int, contrib: np.ndarray, row_parts: int = ATOMIC_ROW_SPLIT):
        self.value[q0:q1] += contrib
        self.atomic_adds += row_parts * self.d_chunks
        self.log.append((q0, q1))


def _first_q_tile(k0: int, params: AttentionParams) -> int:
    if not params.causal:
        return 0
    first_row = max(0, k0 - params.kv_offset)
    return first_row // params.tile_m


def attention_backward_tiled(
    Q,
    K,
    V,
    dO,
    fwd: ForwardOutput | None,
    params: AttentionParams,
    cta_mode: CtaMode = CtaMode.ONE_CTA,
    kv_order: Sequence[int] | None = None,
) -> BackwardOutput:
    """Gradients by recomputing P tile-wise from the stored lse.

    The outer loop runs over KV tiles (one CTA each), the inner loop over
    query tiles. In TWO_CTA mode consecutive KV tiles are paired and their
    dQ contributions summed before the single accumulate, which is where
    the halved atomic count comes from. ``kv_order`` fixes the serial order
    of outer iterations (KV tiles, or KV-tile pairs in TWO_CTA mode).
    """
    if fwd is None or fwd.lse is None:
        raise ValueError("backward needs the forward lse")
    (Q, K, V, dO), dt = _prepare((Q, K, V, dO), params.precision)
    _check_shapes(Q, K, V, params)
    if dO.shape != (params.n_q, V.shape[1]) or fwd.O.shape != dO.shape or fwd.lse.shape != (params.n_q,):
        raise ValueError("dO / forward output shapes do not match")
    faithful = params.precision is Precision.KERNEL_FAITHFUL
    quant = fastmath.bf16_round_trip if faithful else (lambda a: a)
    alpha = dt(params.scale)
    s_scale = dt(params.scale * LOG2E)
    lse = np.asarray(fwd.lse, dtype=dt)

    D = attention_backward_preprocess(dO, np.asarray(fwd.O, dtype=dt)).astype(dt)
    dK = np.zeros_like(K)
    dV = np.zeros((params.n_kv, V.shape[1]), dtype=dt)
    dq = DqAccumulator(params.n_q, params.d, dt)

    tiles = [(k0, min(k0 + params.tile_n, params.n_kv)) for k0 in range(0, params.n_kv, params.tile_n)]
    if cta_mode is CtaMode.TWO_CTA:
        groups = [tiles[i : i + 2] for i in range(0, len(tiles), 2)]
    else:
        groups = [[t] for t in tiles]
    order = range(len(groups)) if kv_order is None else kv_order
    if sorted(order) != list(range(len(groups))):
        raise ValueError("kv_order must be a permutation of the outer iterations")

    for g in order:
        group = groups[g]
        for q0 in range(_first_q_tile(group[0][0], params) * params.tile_m, params.n_q, params.tile_m):
            q1 = min(q0 + params.tile_m, params.n_q)
            rows = np.arange(q0, q1)
            lse_t = lse[q0:q1]
            live = np.isfinite(lse_t)
            contrib = np.zeros((q1 - q0, params.d), dtype=dt)
            for k0, k1 in group:
                S = (Q[q0:q1] @ K[k0:k1].T).astype(dt) * s_scale
                if params.causal:
                    S[_mask_block(rows, np.arange(k0, k1), params.kv_offset)] = -np.inf
                P = np.where(live[:, None], np.exp2(S - np.where(live, lse_t, 0.0)[:, None]), 0.0).astype(dt)
                Pq = quant(P)
                dV[k0:k1] += Pq.T @ dO[q0:q1]
                dP = dO[q0:q1] @ V[k0:k1].T
                dS = quant((P * (dP - D[q0:q1, None])).astype(dt))
                dK[k0:k1] += alpha * (dS.T @ Q[q0:q1])
                contrib += alpha * (dS @ K[k0:k1])
            dq.add(q0, q1, contrib)
    return BackwardOutput(dQ=dq.value, dK=dK, dV=dV, D=D, atomic_adds=dq.atomic_adds)


def expected_atomic_adds(params: AttentionParams, cta_mode: CtaMode) -> int:
    """Closed-form atomic count for a non-causal problem (used as a cross-check)."""
    if params.causal:
        raise ValueError("closed form only covers the non-causal grid")
    outer = params.n_kv_tiles if cta_mode is CtaMode.ONE_CTA else -(-params.n_kv_tiles // 2)
    return outer * params.n_q_tiles * ATOMIC_ROW_SPLIT * -(-params.d // ATOMIC_D_CHUNK)


def adjoint_loss(Q, K, V, dO, params: AttentionParams) -> float:
    """L = <dO, O> on the dense float64 reference."""
    return float(np.sum(np.asarray(dO, dtype=np.float64) * attention_reference(Q, K, V, params).O))


def finite_difference_grads(Q, K, V, dO, params: AttentionParams, h: float = 1e-5):
    """Central differences of ``adjoint_loss`` for every entry of Q, K and V."""
    arrays = [np.array(a, dtype=np.float64) for a in (Q, K, V)]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = adjoint_loss(*arrays, dO, params)
            a[idx] = old - h
            down = adjoint_loss(*arrays, dO, params)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return tuple(grads)


def attention_grads(Q, K, V, dO, params: AttentionParams, cta_mode: CtaMode = CtaMode.ONE_CTA) -> BackwardOutput:
    return attention_backward_tiled(Q, K, V, dO, attention_forward_tiled(Q, K, V, params), params, cta_mode)
