"""Worktile orderings and simulators for persistent attention kernels.

A worktile is ``(mblock, head, batch)``. Policies only pick a traversal
order; ``simulate_makespan`` then hands tiles to whichever processor frees
up first, the way a persistent tile scheduler does.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

Coord = tuple[int, int, int]  # (mblock, head, batch)


class Policy(enum.Enum):
    NAIVE = "naive"
    LPT_CAUSAL = "lpt-causal"
    LPT_VARLEN = "lpt-varlen"
    SPT = "spt"


@dataclass(frozen=True)
class WorktileGrid:
    n_mblocks: int
    n_heads: int
    n_batches: int = 1
    heads_per_kv_head: int = 1
    causal: bool = True
    seqlen_q: tuple[int, ...] | None = None
    seqlen_kv: tuple[int, ...] | None = None
    tile_m: int = 128
    tile_n: int = 128

    def __post_init__(self):
        if min(self.n_mblocks, self.n_heads, self.n_batches, self.heads_per_kv_head, self.tile_m, self.tile_n) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.n_heads % self.heads_per_kv_head:
            raise ValueError("n_heads must be a multiple of heads_per_kv_head")
        for lens in (self.seqlen_q, self.seqlen_kv):
            if lens is not None and len(lens) != self.n_batches:
                raise ValueError("varlen lists need one entry per batch")
        if (self.seqlen_q is None) != (self.seqlen_kv is None):
            raise ValueError("give both seqlen_q and seqlen_kv or neither")

    @classmethod
    def varlen(cls, seqlen_q, seqlen_kv, n_heads: int = 1, **kw) -> "WorktileGrid":
        tile_m = kw.get("tile_m", 128)
        n_mb = max(1, max(-(-int(s) // tile_m) for s in seqlen_q))
        return cls(
            n_mblocks=n_mb,
            n_heads=n_heads,
            n_batches=len(seqlen_q),
            seqlen_q=tuple(int(s) for s in seqlen_q),
            seqlen_kv=tuple(int(s) for s in seqlen_kv),
            **kw,
        )

    @classmethod
    def from_cu_seqlens(cls, cu_seqlens_q, cu_seqlens_kv, n_heads: int = 1, **kw) -> "WorktileGrid":
        """Build from cumulative offsets (length n_batches + 1, int32)."""
        cq = np.asarray(cu_seqlens_q, dtype=np.int32)
        ck = np.asarray(cu_seqlens_kv, dtype=np.int32)
        if cq.ndim != 1 or cq.shape != ck.shape or cq.size < 2:
            raise ValueError("cu_seqlens arrays must be 1-D, equal length, >= 2")
        if np.any(np.diff(cq) < 0) or np.any(np.diff(ck) < 0):
            raise ValueError("cu_seqlens must be non-decreasing")
        return cls.varlen(np.diff(cq).tolist(), np.diff(ck).tolist(), n_heads=n_heads, **kw)

    @property
    def n_kv_heads(self) -> int:
        return self.n_heads // self.heads_per_kv_head

    def seqlens(self, batch: int) -> tuple[int, int]:
        if self.seqlen_q is None:
            n = self.n_mblocks * self.tile_m
            return n, n
        return self.seqlen_q[batch], self.seqlen_kv[batch]

    def mblocks(self, batch: int) -> int:
        if self.seqlen_q is None:
            return self.n_mblocks
        return -(-self.seqlen_q[batch] // self.tile_m)

    def kv_blocks(self, batch: int) -> int:
        return -(-self.seqlens(batch)[1] // self.tile_n)

    def coords(self) -> list[Coord]:
        return [(m, h, b) for b in range(self.n_batches) for h in range(self.n_heads) for m in range(self.mblocks(b))]


def kv_iterations(mblock: int, batch: int, grid: WorktileGrid) -> int:
    total = grid.kv_blocks(batch)
    if not grid.causal:
        return total
    sq, skv = grid.seqlens(batch)
    n = -(-((mblock + 1) * grid.tile_m + (skv - sq)) // grid.tile_n)
    return min(max(n, 1), total) if total else 0


def tile_cost(coord: Coord, grid: WorktileGrid, per_iter_cycles: float = 1.0) -> float:
    """Cycles for one worktile: unmasked KV iterations times per-iteration cycles."""
    m, h, b = coord
    if not (0 <= b < grid.n_batches and 0 <= h < grid.n_heads and 0 <= m < grid.mblocks(b)):
        raise IndexError(f"coordinate {coord} outside the grid")
    return kv_iterations(m, b, grid) * per_iter_cycles


@dataclass
class Schedule:
    order: list[Coord]
    costs: list[float]
    policy: Policy
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.metadata.items()}
        return json.dumps(
            {"policy": self.policy.value, "order": [list(c) for c in self.order], "costs": self.costs, "metadata": meta}
        )

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        doc = json.loads(text)
        return cls([tuple(c) for c in doc["order"]], doc["costs"], Policy(doc["policy"]), doc.get("metadata", {}))


def _schedule(order: list[Coord], grid: WorktileGrid, policy: Policy, per_iter_cycles: float, **meta) -> Schedule:
    return Schedule(order, [tile_cost(c, grid, per_iter_cycles) for c in order], policy, dict(meta))


def order_naive(grid: WorktileGrid, per_iter_cycles: float = 1.0) -> Schedule:
    """Grid order with mblocks fastest, then heads, then batches."""
    return _schedule(grid.coords(), grid, Policy.NAIVE, per_iter_cycles)


def section_size(l2_bytes: float, kv_bytes_per_head: float) -> int:
    """KV heads per L2 section (at least one, even if a single head overflows L2)."""
    if kv_bytes_per_head <= 0:
        raise ValueError("kv_bytes_per_head must be positive")
    if math.isinf(l2_bytes):
        return 2**31 - 1
    return max(1, int(l2_bytes // kv_bytes_per_head))


def _lpt_batch(grid: WorktileGrid, b: int, section: int) -> list[Coord]:
    g = grid.heads_per_kv_head
    out = []
    for s0 in range(0, grid.n_kv_heads, section):
        kv_heads = range(s0, min(s0 + section, grid.n_kv_heads))
        for m in reversed(range(grid.mblocks(b))):
            for kvh in kv_heads:
                out += [(m, kvh * g + q, b) for q in range(g)]
    return out


def order_lpt_causal(grid: WorktileGrid, l2_bytes: float, kv_bytes_per_head: float, per_iter_cycles: float = 1.0) -> Schedule:
    """Batches outermost, then L2-sized head sections, then mblocks in reverse, then heads.

    With GQA every query head sharing a KV head is visited before the
    mblock changes.
    """
    section = section_size(l2_bytes, kv_bytes_per_head)
    order = [c for b in range(grid.n_batches) for c in _lpt_batch(grid, b, section)]
    return _schedule(order, grid, Policy.LPT_CAUSAL, per_iter_cycles, section_kv_heads=section)


def order_lpt_varlen(grid: WorktileGrid, per_iter_cycles: float = 1.0) -> Schedule:
    """Batches sorted by their longest worktile, descending, stable on ties.

    ``metadata['virtual_to_actual']`` is the int32 batch map a kernel
    would read back to walk batches in sorted order.
    """
    longest = [max(kv_iterations(m, b, grid) for m in range(grid.mblocks(b))) if grid.mblocks(b) else 0 for b in range(grid.n_batches)]
    v2a = np.array(sorted(range(grid.n_batches), key=lambda b: -longest[b]), dtype=np.int32)
    order = [c for b in v2a for c in _lpt_batch(grid, int(b), grid.n_kv_heads)]
    return _schedule(order, grid, Policy.LPT_VARLEN, per_iter_cycles, virtual_to_actual=v2a)


def invert_batch_map(v2a: np.ndarray) -> np.ndarray:
    a2v = np.empty_like(v2a)
    a2v[v2a] = np.arange(len(v2a), dtype=v2a.dtype)
    return a2v


def is_permutation_of_grid(schedule: Schedule, grid: WorktileGrid) -> bool:
    return sorted(schedule.order) == sorted(grid.coords())


# -- makespan ---------------------------------------------------------------


@dataclass
class MakespanResult:
    makespan: float
    loads: list[float]
    assignment: list[int]


def list_schedule(costs, n_processors: int) -> MakespanResult:
    """Greedy list scheduling: the earliest-free processor (lowest index on ties) takes the next job."""
    if n_processors < 1:
        raise ValueError("need at least one processor")
    heap = [(0.0, p) for p in range(n_processors)]
    loads = [0.0] * n_processors
    assignment = []
    for c in costs:
        t, p = heapq.heappop(heap)
        loads[p] = t + c
        assignment.append(p)
        heapq.heappush(heap, (loads[p], p))
    return MakespanResult(max(loads), loads, assignment)


def simulate_makespan(schedule: Schedule, n_processors: int) -> MakespanResult:
    return list_schedule(schedule.costs, n_processors)


def lpt_makespan(costs, n_processors: int) -> float:
    return list_schedule(sorted(costs, reverse=True), n_processors).makespan


def graham_lpt_ratio(n_processors: int) -> float:
    return 4.0 / 3.0 - 1.0 / (3.0 * n_processors)


def brute_force_optimal_makespan(costs, n_processors: int) -> float:
    """Exact optimum by exhaustive assignment with symmetry pruning."""
    costs = sorted(costs, reverse=True)
    if len(costs) > 12 or n_processors > 4:
        raise ValueError("instance too large for exhaustive search (<= 12 jobs, <= 4 processors)")
    if n_processors < 1:
        raise ValueError("need at least one processor")
    if not costs:
        return 0.0
    best = lpt_makespan(costs, n_processors)
    lower = max(costs[0], sum(costs) / n_processors)
    loads = [0.0] * n_processors

    def dfs(i: int):
        nonlocal best
        if best <= lower:
            return
        if i == len(costs):
            best = min(best, max(loads))
            return
        tried = set()
        for p in range(n_processors):
            if loads[p] in tried or loads[p] + costs[i] >= best:
                continue
            tried.add(loads[p])
            loads[p] += costs[i]
            dfs(i + 1)
            loads[p] -= costs[i]

    dfs(0)
    return best


# -- deterministic dQ lock simulation --------------------------------------


@dataclass
class LockSimResult:
    makespan: float
    per_cta_stall: list[float]
    first_write_stalls: int
    reduction_order: list[tuple]
    ctas: list[tuple[int, int, int]] = field(default_factory=list)  # (kv block, head, batch)

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "first_write_stalls": self.first_write_stalls,
            "total_stall": sum(self.per_cta_stall),
            "per_cta_stall": self.per_cta_stall,
            "reduction_order": [list(r) for r in self.reduction_order],
        }


def _q_blocks(grid: WorktileGrid, n: int, b: int) -> list[int]:
    n_q = grid.mblocks(b)
    if not grid.causal:
        return list(range(n_q))
    sq, skv = grid.seqlens(b)
    first_row = max(0, n * grid.tile_n - (skv - sq))
    return list(range(first_row // grid.tile_m, n_q)) if first_row < sq else []


def simulate_dq_locks(
    grid: WorktileGrid,
    policy: Policy,
    n_processors: int,
    iter_cycles: float = 1.0,
    reduce_cycles: float = 0.25,
    fence_cycles: float = 0.0,
) -> LockSimResult:
    """Discrete-event run of a deterministic backward pass.

    One CTA per (KV block, head, batch) walks its query blocks in ascending
    order. After each block it must reduce into that block's dQ tile, which
    is guarded by a semaphore admitting contributors in a fixed order.

    NAIVE launches KV blocks ascending and admits them ascending. SPT
    launches KV blocks descending and admits them descending, so every
    CTA's diagonal block is its first and it holds rank 0 there.
    """
    if policy not in (Policy.NAIVE, Policy.SPT):
        raise ValueError(f"lock simulation supports naive and spt, not {policy.value}")
    if policy is Policy.SPT and not grid.causal:
        raise ValueError("SPT ordering is defined for causal grids")
    if n_processors < 1:
        raise ValueError("need at least one processor")
    descending = policy is Policy.SPT

    ctas = []
    for b in range(grid.n_batches):
        for h in range(grid.n_heads):
            kvs = range(grid.kv_blocks(b))
            ctas += [(n, h, b) for n in (reversed(kvs) if descending else kvs)]
    work = {c: _q_blocks(grid, c[0], c[2]) for c in ctas}

    # admission rank of each contributor per dQ tile
    rank: dict[tuple, int] = {}
    contributors: dict[tuple, list[int]] = {}
    for n, h, b in ctas:
        for q in work[(n, h, b)]:
            contributors.setdefault((q, h, b), []).append(n)
    for key, ns in contributors.items():
        for r, n in enumerate(sorted(ns, reverse=descending)):
            rank[(key, n)] = r

    sem = {k: 0 for k in contributors}
    waiting: dict[tuple, dict[int, tuple]] = {k: {} for k in contributors}
    stall = {c: 0.0 for c in ctas}
    first_stalled = set()
    progress = {c: 0 for c in ctas}
    order_log = []
    events: list[tuple] = []
    seq = itertools.count()
    queue = list(ctas)
    free = n_processors
    now = 0.0
    done = 0

    def launch(t):
        nonlocal free
        while free and queue:
            c = queue.pop(0)
            free -= 1
            if work[c]:
                heapq.heappush(events, (t + iter_cycles, next(seq), "computed", c))
            else:
                heapq.heappush(events, (t, next(seq), "finished", c))

    def try_reduce(c, t, since):
        q = work[c][progress[c]]
        key = (q, c[1], c[2])
        if sem[key] == rank[(key, c[0])]:
            if t > since:
                stall[c] += t - since
                if progress[c] == 0:
                    first_stalled.add(c)
            heapq.heappush(events, (t + fence_cycles + reduce_cycles, next(seq), "reduced", c))
        else:
            waiting[key][rank[(key, c[0])]] = (c, since)

    launch(0.0)
    while events:
        now, _, kind, c = heapq.heappop(events)
        if kind == "computed":
            try_reduce(c, now, now)
        elif kind == "reduced":
            q = work[c][progress[c]]
            key = (q, c[1], c[2])
            sem[key] += 1
            order_log.append((q, c[1], c[2], c[0]))
            progress[c] += 1
            if progress[c] < len(work[c]):
                heapq.heappush(events, (now + iter_cycles, next(seq), "computed", c))
            else:
                heapq.heappush(events, (now, next(seq), "finished", c))
            nxt = waiting[key].pop(sem[key], None)
            if nxt is not None:
                try_reduce(nxt[0], now, nxt[1])
        else:
            done += 1
            free += 1
            launch(now)
    if done != len(ctas):
        raise RuntimeError("lock order deadlocked: a CTA waits on a contributor that never launches")
    return LockSimResult(
        makespan=now,
        per_cta_stall=[stall[c] for c in ctas],
        first_write_stalls=len(first_stalled),
        reduction_order=order_log,
        ctas=ctas,
    )


def makespan_reduction(grid: WorktileGrid, n_processors: int, l2_bytes: float = math.inf, kv_bytes_per_head: float = 1.0):
    """(naive, lpt) makespans on the same grid."""
    naive = simulate_makespan(order_naive(grid), n_processors).makespan
    lpt = simulate_makespan(order_lpt_causal(grid, l2_bytes, kv_bytes_per_head), n_processors).makespan
    return naive, lpt
