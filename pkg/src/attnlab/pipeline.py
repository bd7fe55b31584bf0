"""Steady-state analysis of warp-specialized attention pipelines.

A pipeline is a per-iteration task graph. Each task occupies one hardware
unit for a fixed number of cycles; edges carry an iteration lag (0 = same
iteration, 1 = previous one). Throughput is bounded by the busiest unit
and by every dependency cycle's total duration divided by its total lag.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .roofline import CtaMode, HardwareProfile, TileConfig

DEFAULT_EMULATED_EXP_COST = 7  # 3 Horner FMAs + clamp/floor/splice
TMEM_COLUMNS = 512
TMEM_GRANULE = 32
TMEM_LANES = 128


class Unit(enum.Enum):
    TENSOR_CORE = "TensorCore"
    SMEM_PORT = "SmemPort"
    MUFU = "Mufu"
    FMA = "Fma"
    DSMEM = "Dsmem"
    TMA_LOAD = "TmaLoad"


# remote smem traffic is served by the same smem ports
SHARED_UNITS = {Unit.DSMEM: (Unit.SMEM_PORT,)}


@dataclass(frozen=True)
class Dep:
    task: str
    lag: int = 0
    why: str = ""


@dataclass(frozen=True)
class PipelineTask:
    id: str
    resource: Unit
    duration_cycles: float
    deps: tuple[Dep, ...] = ()


@dataclass
class Pipeline:
    """Task list plus how many (query tile, KV tile) steps one iteration covers."""

    tasks: list[PipelineTask]
    units_per_iter: int = 1
    name: str = ""

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def task(self, task_id: str) -> PipelineTask:
        return next(t for t in self.tasks if t.id == task_id)

    def busy(self, unit: Unit) -> float:
        return sum(t.duration_cycles for t in self.tasks if t.resource is unit)

    def to_json(self) -> str:
        nodes = [{"id": t.id, "resource": t.resource.value, "duration": t.duration_cycles} for t in self.tasks]
        edges = [{"src": d.task, "dst": t.id, "lag": d.lag, "why": d.why} for t in self.tasks for d in t.deps]
        return json.dumps({"name": self.name, "units_per_iter": self.units_per_iter, "nodes": nodes, "edges": edges}, indent=2)


class PipelineError(ValueError):
    pass


@dataclass
class SteadyState:
    cycles_per_iter: float
    per_resource_utilization: dict[str, float]
    critical_path: list[str]
    bottleneck: str
    resource_bound: float
    cycle_bound: float
    per_resource_busy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cycles_per_iter": self.cycles_per_iter,
            "bottleneck": self.bottleneck,
            "resource_bound": self.resource_bound,
            "cycle_bound": self.cycle_bound,
            "per_resource_busy": self.per_resource_busy,
            "per_resource_utilization": self.per_resource_utilization,
            "critical_path": self.critical_path,
        }


def _graph(tasks: list[PipelineTask]) -> nx.DiGraph:
    g = nx.DiGraph()
    for t in tasks:
        if t.id in g:
            raise PipelineError(f"duplicate task id {t.id}")
        if t.duration_cycles < 0:
            raise PipelineError(f"negative duration on {t.id}")
        g.add_node(t.id, duration=t.duration_cycles)
    for t in tasks:
        for d in t.deps:
            if d.task not in g:
                raise PipelineError(f"{t.id} depends on unknown task {d.task}")
            if d.lag < 0:
                raise PipelineError(f"negative lag on {d.task} -> {t.id}")
            if g.has_edge(d.task, t.id):
                g[d.task][t.id]["lag"] = min(g[d.task][t.id]["lag"], d.lag)
            else:
                g.add_edge(d.task, t.id, lag=d.lag)
    zero = nx.DiGraph([(u, v) for u, v, lag in g.edges(data="lag") if lag == 0])
    if zero.number_of_edges() and not nx.is_directed_acyclic_graph(zero):
        raise PipelineError(f"zero-lag dependency cycle: {nx.find_cycle(zero)}")
    return g


def _max_cycle_ratio(g: nx.DiGraph) -> tuple[float, list[str]]:
    best, path = 0.0, []
    for cyc in nx.simple_cycles(g):
        lag = sum(g[u][v]["lag"] for u, v in zip(cyc, cyc[1:] + cyc[:1]))
        work = sum(g.nodes[n]["duration"] for n in cyc)
        ratio = work / lag
        if ratio > best or (ratio == best and path and len(cyc) < len(path)):
            best, path = ratio, cyc
    return best, path


def steady_state(tasks) -> SteadyState:
    """Cycles per iteration of a periodic task graph.

    Accepts a Pipeline (normalised by ``units_per_iter``) or a bare task list.
    """
    pipe = tasks if isinstance(tasks, Pipeline) else Pipeline(list(tasks))
    g = _graph(pipe.tasks)
    busy = {u: 0.0 for u in Unit}
    for t in pipe.tasks:
        busy[t.resource] += t.duration_cycles
        for shared in SHARED_UNITS.get(t.resource, ()):
            busy[shared] += t.duration_cycles
    resource_bound = max(busy.values()) if pipe.tasks else 0.0
    cycle_bound, cyc = _max_cycle_ratio(g)
    total = max(resource_bound, cycle_bound)
    units = pipe.units_per_iter

    # ties go to the first unit in enum order, so the balanced forward case reports TensorCore
    top_unit = max(Unit, key=lambda u: (busy[u], -list(Unit).index(u)))
    if cycle_bound > resource_bound:
        bottleneck = "dependency-cycle"
    else:
        bottleneck = top_unit.value
    util = {u.value: (busy[u] / total if total else 0.0) for u in Unit}
    return SteadyState(
        cycles_per_iter=total / units,
        per_resource_utilization=util,
        critical_path=cyc,
        bottleneck=bottleneck,
        resource_bound=resource_bound / units,
        cycle_bound=cycle_bound / units,
        per_resource_busy={u.value: busy[u] / units for u in Unit},
    )


# -- builders ---------------------------------------------------------------


def build_fwd_pipeline(
    tile: TileConfig,
    hw: HardwareProfile = HardwareProfile(),
    exp_fraction: float = 0.0,
    cost_per_emulated_exp: float = DEFAULT_EMULATED_EXP_COST,
    correction_on_fma: bool = True,
    rescale_fraction: float = 1.0,
) -> Pipeline:
    """Two query tiles (H and L) in ping-pong against one KV tile per iteration."""
    if not 0.0 <= exp_fraction <= 1.0:
        raise ValueError("exp_fraction must be in [0, 1]")
    M, N, d, b, g = tile.M, tile.N, tile.d, tile.dtype_bytes, hw.mma_tile
    bw = hw.smem_bytes_per_clk
    cd = lambda a, c: -(-a // c)  # noqa: E731
    mma = 2 * M * N * d / hw.mma_flops_per_clk
    qk_smem = b * cd(M, g) * cd(N, g) * 2 * g * d / bw
    pv_smem = b * cd(M, g) * cd(d, g) * g * N / bw
    f = exp_fraction
    mufu = (1.0 - f) * M * N / hw.mufu_exp_per_clk
    fma_exp = f * M * N * cost_per_emulated_exp / hw.fma_per_clk
    corr = rescale_fraction * M * d / hw.fma_per_clk if correction_on_fma else 0.0

    tasks = []
    for t, other, lag in (("H", "L", 1), ("L", "H", 0)):
        excl = (
            Dep(f"{other}.exp_mufu", lag, "softmax warpgroups never overlap their exp critical sections"),
            Dep(f"{other}.exp_fma", lag, "softmax warpgroups never overlap their exp critical sections"),
        )
        tasks += [
            PipelineTask(f"{t}.qk_operands", Unit.SMEM_PORT, qk_smem),
            PipelineTask(
                f"{t}.qk_mma",
                Unit.TENSOR_CORE,
                mma,
                (Dep(f"{t}.qk_operands"), Dep(f"{t}.pv_b", 1, "S and P share TMEM; next S waits until PV read P")),
            ),
            PipelineTask(f"{t}.exp_mufu", Unit.MUFU, mufu, (Dep(f"{t}.qk_mma"),) + excl),
            PipelineTask(f"{t}.exp_fma", Unit.FMA, fma_exp, (Dep(f"{t}.qk_mma"),) + excl),
            PipelineTask(
                f"{t}.p_store_a",
                Unit.FMA,
                0.0,
                (Dep(f"{t}.exp_mufu", 0, "first three quarters of P stored"), Dep(f"{t}.exp_fma")),
            ),
            PipelineTask(f"{t}.p_store_b", Unit.FMA, 0.0, (Dep(f"{t}.p_store_a", 0, "last quarter stored separately"),)),
            PipelineTask(
                f"{t}.correction",
                Unit.FMA,
                corr,
                (
                    Dep(f"{t}.qk_mma", 0, "row max is taken before the exponentials, so correction runs beside them"),
                    Dep(f"{t}.pv_b", 1, "rescales the previous O"),
                ),
            ),
            PipelineTask(f"{t}.pv_operands", Unit.SMEM_PORT, pv_smem),
            PipelineTask(
                f"{t}.pv_a",
                Unit.TENSOR_CORE,
                0.75 * mma,
                (Dep(f"{t}.p_store_a", 0, "stored quarters trigger their MMA"), Dep(f"{t}.correction"), Dep(f"{t}.pv_operands")),
            ),
            PipelineTask(f"{t}.pv_b", Unit.TENSOR_CORE, 0.25 * mma, (Dep(f"{t}.p_store_b"), Dep(f"{t}.pv_a"))),
        ]
    return Pipeline(tasks, units_per_iter=2, name=f"fwd {tile.label()} f={f:g}")


def build_bwd_pipeline(
    tile: TileConfig,
    hw: HardwareProfile = HardwareProfile(),
    cta_mode: CtaMode | None = None,
) -> Pipeline:
    """Five MMAs (S, dP, dV, dK, dQ) plus softmax and dS elementwise, per CTA."""
    mode = cta_mode or tile.cta_mode
    b, bw = tile.dtype_bytes, hw.smem_bytes_per_clk
    N, d = tile.N, tile.d
    if mode is CtaMode.TWO_CTA:
        if tile.M % 2:
            raise ValueError("2-CTA mode needs an even M")
        m = tile.M // 2
        half_b = 0.5  # Q and dO (operand B) are split across the CTA pair
    else:
        m = tile.M
        half_b = 1.0
    mma = 2 * m * N * d / hw.mma_flops_per_clk
    el = lambda n: b * n / bw  # noqa: E731
    dq_smem = 2 * hw.dq_accum_bytes * m * d / bw * (0.5 if mode is CtaMode.TWO_CTA else 1.0)

    tasks = [
        PipelineTask("S_operands", Unit.SMEM_PORT, el(N * d + half_b * m * d)),
        PipelineTask(
            "S_mma",
            Unit.TENSOR_CORE,
            mma,
            (Dep("S_operands"), Dep("dV_mma", 1, "S and P share one TMEM block; S(i+1) waits for dV(i) to read P")),
        ),
        PipelineTask("softmax", Unit.MUFU, m * N / hw.mufu_exp_per_clk, (Dep("S_mma"),)),
        PipelineTask("dP_operands", Unit.SMEM_PORT, el(N * d + half_b * m * d)),
        PipelineTask("dV_operands", Unit.SMEM_PORT, el(half_b * m * d)),
        PipelineTask("dV_mma", Unit.TENSOR_CORE, mma, (Dep("softmax", 0, "P read from TMEM"), Dep("dV_operands"))),
        PipelineTask("dS_elem", Unit.FMA, 2 * m * N / hw.fma_per_clk, (Dep("softmax"), Dep("dP_mma"))),
        PipelineTask("dS_write", Unit.SMEM_PORT, el(m * N), (Dep("dS_elem"),)),
        PipelineTask("dK_operands", Unit.SMEM_PORT, el(half_b * m * d)),
        PipelineTask("dK_mma", Unit.TENSOR_CORE, mma, (Dep("dS_elem", 0, "dS read from TMEM"), Dep("dK_operands"))),
        PipelineTask("dQ_operands", Unit.SMEM_PORT, el(m * N + N * d)),
        PipelineTask("dQ_mma", Unit.TENSOR_CORE, mma, (Dep("dQ_operands"),)),
        PipelineTask("dQ_writeback", Unit.SMEM_PORT, dq_smem, (Dep("dQ_mma", 0, "fp32 dQ written then read back by TMA"),)),
    ]
    if mode is CtaMode.ONE_CTA:
        tasks += [
            PipelineTask(
                "dP_mma",
                Unit.TENSOR_CORE,
                mma,
                (Dep("dP_operands"), Dep("dQ_mma", 1, "dP, dS and dQ share one TMEM block")),
            ),
        ]
        tasks = [
            PipelineTask(t.id, t.resource, t.duration_cycles, t.deps + (Dep("dS_write"),))
            if t.id == "dQ_operands"
            else t
            for t in tasks
        ]
        name = "bwd 1-CTA"
    else:
        exch = hw.dsmem_exchange_factor * m * N * b / bw
        tasks += [
            PipelineTask(
                "dP_mma",
                Unit.TENSOR_CORE,
                mma,
                (Dep("dP_operands"), Dep("dS_elem", 1, "dP and dS share TMEM; dQ no longer does in 2-CTA")),
            ),
            PipelineTask("dS_dsmem", Unit.DSMEM, exch, (Dep("dS_write", 0, "half of dS swapped with the peer CTA"),)),
        ]
        # dQ in iteration i works on the tile of iteration i-1
        tasks = [
            PipelineTask(
                t.id,
                t.resource,
                t.duration_cycles,
                t.deps
                + (
                    Dep("dS_dsmem", 1, "needs the exchanged dS of the previous tile"),
                    Dep("dP_mma", 0, "dP of the current tile is issued before dQ of the previous one"),
                ),
            )
            if t.id == "dQ_operands"
            else t
            for t in tasks
        ]
        tasks = [
            PipelineTask(t.id, t.resource, t.duration_cycles, t.deps + (Dep("dQ_writeback", 1, "dQ reuses the S region"),))
            if t.id == "S_mma"
            else t
            for t in tasks
        ]
        name = "bwd 2-CTA"
    return Pipeline(tasks, units_per_iter=1, name=f"{name} {tile.label()}")


def exp_fraction_curve(tile, hw=HardwareProfile(), cost_per_emulated_exp=DEFAULT_EMULATED_EXP_COST, **kw):
    grid = np.round(np.arange(101) / 100.0, 2)
    return [(float(f), steady_state(build_fwd_pipeline(tile, hw, float(f), cost_per_emulated_exp, **kw)).cycles_per_iter) for f in grid]


def optimal_exp_fraction(tile, hw=HardwareProfile(), cost_per_emulated_exp=DEFAULT_EMULATED_EXP_COST, **kw) -> float:
    """Smallest emulated fraction on a 0.01 grid that minimises forward cycles."""
    if cost_per_emulated_exp < 1:
        raise ValueError("cost_per_emulated_exp must be >= 1")
    curve = exp_fraction_curve(tile, hw, cost_per_emulated_exp, **kw)
    best = min(c for _, c in curve)
    return next(f for f, c in curve if c <= best * (1 + 1e-12))


# -- TMEM and registers -----------------------------------------------------


def tmem_columns(cols: int, bytes_per_elem: int) -> int:
    """TMEM columns for a 128-lane tile with ``cols`` elements per lane."""
    return -(-cols * bytes_per_elem // 4)


@dataclass(frozen=True)
class TmemAlloc:
    name: str
    columns: int
    lifetime: tuple[int, int]
    aliases_with: str | None = None


@dataclass
class TmemPlan:
    allocations: list[TmemAlloc]
    capacity_columns: int = TMEM_COLUMNS


@dataclass(frozen=True)
class TmemConflict:
    kind: str
    allocations: tuple[str, ...]
    interval: tuple[int, int]
    columns: int = 0


@dataclass
class TmemCheck:
    conflicts: list[TmemConflict]

    @property
    def ok(self) -> bool:
        return not self.conflicts


def _runs(ts: list[int]) -> list[tuple[int, int]]:
    out = []
    for t in ts:
        if out and t == out[-1][1] + 1:
            out[-1] = (out[-1][0], t)
        else:
            out.append((t, t))
    return out


def validate_tmem_plan(plan: TmemPlan) -> TmemCheck:
    """Capacity, granularity and aliasing checks over allocation lifetimes.

    An aliased allocation lives inside its parent's columns: it may only be
    live while the parent is dead, and live children must fit the parent.
    """
    allocs = {a.name: a for a in plan.allocations}
    conflicts: list[TmemConflict] = []
    for a in plan.allocations:
        if a.columns % TMEM_GRANULE:
            conflicts.append(TmemConflict("granularity", (a.name,), a.lifetime, a.columns))
        if a.aliases_with is not None and a.aliases_with not in allocs:
            conflicts.append(TmemConflict("unknown-alias", (a.name, a.aliases_with), a.lifetime))
    if conflicts:
        return TmemCheck(conflicts)

    def root(name: str) -> str:
        seen = set()
        while allocs[name].aliases_with is not None:
            if name in seen:
                raise ValueError(f"alias cycle through {name}")
            seen.add(name)
            name = allocs[name].aliases_with
        return name

    children: dict[str, list[TmemAlloc]] = {a.name: [] for a in plan.allocations if a.aliases_with is None}
    for a in plan.allocations:
        if a.aliases_with is not None:
            children[root(a.name)].append(a)

    live = lambda a, t: a.lifetime[0] <= t <= a.lifetime[1]  # noqa: E731
    footprint = {}
    for r, kids in children.items():
        span = [allocs[r].lifetime] + [k.lifetime for k in kids]
        footprint[r] = (min(s[0] for s in span), max(s[1] for s in span))
    if not footprint:
        return TmemCheck([])
    t_lo = min(s[0] for s in footprint.values())
    t_hi = max(s[1] for s in footprint.values())

    over: dict[tuple[str, ...], list[int]] = {}
    for t in range(t_lo, t_hi + 1):
        roots = [r for r, (a, b) in footprint.items() if a <= t <= b]
        cols = sum(allocs[r].columns for r in roots)
        if cols > plan.capacity_columns:
            over.setdefault(tuple(roots), []).append(t)
    for names, ts in over.items():
        cols = sum(allocs[r].columns for r in names)
        for run in _runs(ts):
            conflicts.append(TmemConflict("capacity", names, run, cols))

    for r, kids in children.items():
        parent = allocs[r]
        for t in range(t_lo, t_hi + 1):
            live_kids = [k for k in kids if live(k, t)]
            if live_kids and live(parent, t):
                conflicts.append(TmemConflict("alias-overlap", (r,) + tuple(k.name for k in live_kids), (t, t)))
            used = sum(k.columns for k in live_kids)
            if used > parent.columns:
                conflicts.append(TmemConflict("alias-capacity", tuple(k.name for k in live_kids), (t, t), used))
    return TmemCheck(conflicts)


def fwd_tmem_plan(d: int = 128, n: int = 128) -> TmemPlan:
    """Two O tiles plus two S tiles; P and the rescale stats live inside S."""
    o = tmem_columns(d, 4)
    s = tmem_columns(n, 4)
    p = tmem_columns(n, 2)
    allocs = []
    for t in ("H", "L"):
        allocs += [
            TmemAlloc(f"O_{t}", o, (0, 9)),
            TmemAlloc(f"S_{t}", s, (1, 2)),
            TmemAlloc(f"P_{t}", p, (3, 4), aliases_with=f"S_{t}"),
            TmemAlloc(f"stats_{t}", TMEM_GRANULE, (3, 4), aliases_with=f"S_{t}"),
        ]
    return TmemPlan(allocs)


def bwd_tmem_plan(cta_mode: CtaMode = CtaMode.ONE_CTA, d: int = 128, n: int = 128) -> TmemPlan:
    acc = tmem_columns(d, 4)
    s = tmem_columns(n, 4)
    allocs = [
        TmemAlloc("dV", acc, (0, 9)),
        TmemAlloc("dK", acc, (0, 9)),
        TmemAlloc("S", s, (1, 2)),
        TmemAlloc("P", tmem_columns(n, 2), (3, 4), aliases_with="S"),
        TmemAlloc("dP", s, (3, 4)),
        TmemAlloc("dS", tmem_columns(n, 2), (5, 6), aliases_with="dP"),
    ]
    if cta_mode is CtaMode.ONE_CTA:
        allocs.append(TmemAlloc("dQ", acc, (7, 8), aliases_with="dP"))
    else:
        # per-CTA dQ tile is (M/2, d): half the columns, placed beside P in the S region
        allocs.append(TmemAlloc("dQ", tmem_columns(d // 2, 4), (3, 4), aliases_with="S"))
    return TmemPlan(allocs)


def concurrent_accumulators_plan(count: int = 5, cols: int = 128) -> TmemPlan:
    return TmemPlan([TmemAlloc(f"acc{i}", tmem_columns(cols, 4), (0, 1)) for i in range(count)])


class RegRole(enum.Enum):
    SOFTMAX = "Softmax"
    CORRECTION = "Correction"
    MMA_TMA = "MmaTma"


@dataclass(frozen=True)
class RegBudget:
    warpgroup_role: RegRole
    regs_input: int
    regs_output: int
    regs_misc: int

    @property
    def total(self) -> int:
        return self.regs_input + self.regs_output + self.regs_misc


@dataclass(frozen=True)
class RegCheck:
    total: int
    limit: int

    @property
    def ok(self) -> bool:
        return self.total <= self.limit

    @property
    def overflow(self) -> int:
        return max(0, self.total - self.limit)


def validate_reg_budget(budget: RegBudget, hw: HardwareProfile = HardwareProfile()) -> RegCheck:
    return RegCheck(budget.total, hw.regs_per_thread)
