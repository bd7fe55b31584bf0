"""Throughput-only cycle model for one attention tile iteration."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

PROFILE_DIR_ENV = "ATTNLAB_PROFILE_DIR"


@dataclass(frozen=True)
class HardwareProfile:
    """Per-SM, per-clock throughputs and capacities of a modeled GPU."""

    mma_flops_per_clk: float = 8192
    smem_bytes_per_clk: float = 128
    mufu_exp_per_clk: float = 16
    fma_per_clk: float = 128
    tmem_bytes: int = 262144
    regs_per_thread: int = 256
    clock_mhz: float = 1850
    n_sms: int = 148
    l2_bytes: int = 126 * 2**20
    mma_tile: int = 128
    dq_accum_bytes: int = 4
    # calibrated, not derived: bytes moved through smem per DSMEM dS exchange,
    # in units of (M/2) * N * dtype_bytes; 1.5 reproduces the 2-CTA table column
    dsmem_exchange_factor: float = 1.5
    name: str = "custom"

    def __post_init__(self):
        for f in ("mma_flops_per_clk", "smem_bytes_per_clk", "mufu_exp_per_clk", "fma_per_clk",
                  "regs_per_thread", "clock_mhz", "n_sms", "l2_bytes", "mma_tile"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.tmem_bytes < 0:
            raise ValueError("tmem_bytes must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _builtin_profiles() -> dict:
    text = resources.files("attnlab").joinpath("profiles.json").read_text()
    return json.loads(text)


def known_profiles() -> list[str]:
    names = list(_builtin_profiles()["profiles"])
    extra = os.environ.get(PROFILE_DIR_ENV)
    if extra and Path(extra).is_dir():
        names += sorted(p.stem for p in Path(extra).glob("*.json"))
    return names


def load_profile(name_or_path: str | None = None) -> HardwareProfile:
    """Look up a named preset, a JSON file in $ATTNLAB_PROFILE_DIR, or a JSON path."""
    doc = _builtin_profiles()
    name = name_or_path or doc["default"]
    allowed = {f.name for f in fields(HardwareProfile)}
    if name in doc["profiles"]:
        return HardwareProfile(name=name, **doc["profiles"][name])
    candidates = []
    extra = os.environ.get(PROFILE_DIR_ENV)
    if extra:
        candidates.append(Path(extra) / f"{name}.json")
    candidates.append(Path(name))
    for path in candidates:
        if path.is_file():
            raw = json.loads(path.read_text())
            unknown = set(raw) - allowed
            if unknown:
                raise ValueError(f"unknown profile fields in {path}: {sorted(unknown)}")
            raw.setdefault("name", path.stem)
            return HardwareProfile(**raw)
    raise KeyError(f"unknown hardware profile {name!r}; known profiles: {', '.join(known_profiles())}")


class CtaMode(enum.Enum):
    ONE_CTA = 1
    TWO_CTA = 2


class Resource(enum.Enum):
    MMA = "mma"
    SMEM = "smem"
    EXP = "exp"


@dataclass(frozen=True)
class TileConfig:
    M: int
    N: int
    d: int
    dtype_bytes: int = 2
    cta_mode: CtaMode = CtaMode.ONE_CTA

    def __post_init__(self):
        if min(self.M, self.N, self.d) < 1:
            raise ValueError("tile dimensions must be >= 1")

    @classmethod
    def parse(cls, text: str, cta_mode: CtaMode = CtaMode.ONE_CTA) -> "TileConfig":
        M, N, d = (int(v) for v in text.lower().split("x"))
        return cls(M, N, d, cta_mode=cta_mode)

    def label(self) -> str:
        return f"{self.M}x{self.N}x{self.d}"


@dataclass(frozen=True)
class CycleBreakdown:
    t_mma: float
    t_smem_mma_operands: float
    t_smem_ds_write: float
    t_smem_ds_dsmem: float
    t_smem_dq: float
    t_smem_total: float
    t_exp: float
    bottleneck: Resource

    @classmethod
    def build(cls, t_mma, operands, ds_write, ds_dsmem, dq, t_exp) -> "CycleBreakdown":
        total = operands + ds_write + ds_dsmem + dq
        # ties go to MMA, then smem
        ranked = [(t_mma, Resource.MMA), (total, Resource.SMEM), (t_exp, Resource.EXP)]
        best = max(v for v, _ in ranked)
        bottleneck = next(r for v, r in ranked if v == best)
        return cls(t_mma, operands, ds_write, ds_dsmem, dq, total, t_exp, bottleneck)

    def value(self, r: Resource) -> float:
        return {Resource.MMA: self.t_mma, Resource.SMEM: self.t_smem_total, Resource.EXP: self.t_exp}[r]

    def tied(self) -> list[Resource]:
        top = self.value(self.bottleneck)
        return [r for r in Resource if self.value(r) == top]

    def excess_over_mma(self) -> float:
        """Percent by which the bottleneck exceeds MMA time."""
        return 100.0 * (self.value(self.bottleneck) - self.t_mma) / self.t_mma


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


def fwd_roofline(tile: TileConfig, hw: HardwareProfile = HardwareProfile()) -> CycleBreakdown:
    """QK^T (SS) plus PV (TS) with operands re-read once per MMA instruction tile."""
    M, N, d, b, g = tile.M, tile.N, tile.d, tile.dtype_bytes, hw.mma_tile
    t_mma = 4 * M * N * d / hw.mma_flops_per_clk
    qk_elems = _cdiv(M, g) * _cdiv(N, g) * (g * d + g * d)
    pv_elems = _cdiv(M, g) * _cdiv(d, g) * g * N
    operands = b * (qk_elems + pv_elems) / hw.smem_bytes_per_clk
    t_exp = M * N / hw.mufu_exp_per_clk
    return CycleBreakdown.build(t_mma, operands, 0.0, 0.0, 0.0, t_exp)


def bwd_roofline(tile: TileConfig, hw: HardwareProfile = HardwareProfile()) -> CycleBreakdown:
    """Five-MMA backward iteration, per CTA.

    In TWO_CTA mode ``tile.M`` is the pair's extent: each CTA sees M/2 rows,
    stages half of the shared B operand (Q, dO) and writes half the dQ tile.
    """
    N, d, b, bw = tile.N, tile.d, tile.dtype_bytes, hw.smem_bytes_per_clk
    if tile.cta_mode is CtaMode.TWO_CTA:
        if tile.M % 2:
            raise ValueError("2-CTA mode needs an even M")
        m = tile.M // 2
        operands = b * (2 * m * d + 3 * N * d + m * N) / bw
        dsmem = hw.dsmem_exchange_factor * m * N * b / bw
        dq = 2 * hw.dq_accum_bytes * m * d / 2 / bw
    else:
        m = tile.M
        operands = b * (4 * m * d + 3 * N * d + m * N) / bw
        dsmem = 0.0
        dq = 2 * hw.dq_accum_bytes * m * d / bw
    t_mma = 10 * m * N * d / hw.mma_flops_per_clk
    ds_write = b * m * N / bw
    t_exp = m * N / hw.mufu_exp_per_clk
    return CycleBreakdown.build(t_mma, operands, ds_write, dsmem, dq, t_exp)


@dataclass(frozen=True)
class BottleneckRow:
    pass_name: str
    tile: TileConfig
    cycles: CycleBreakdown

    def to_dict(self) -> dict:
        c = self.cycles
        return {
            "pass": self.pass_name,
            "tile": self.tile.label(),
            "cta": self.tile.cta_mode.value,
            "t_mma": c.t_mma,
            "t_smem_mma_operands": c.t_smem_mma_operands,
            "t_smem_ds_write": c.t_smem_ds_write,
            "t_smem_ds_dsmem": c.t_smem_ds_dsmem,
            "t_smem_dq": c.t_smem_dq,
            "t_smem_total": c.t_smem_total,
            "t_exp": c.t_exp,
            "bottleneck": c.bottleneck.value,
            "tied": "+".join(r.value for r in c.tied()),
            "excess_pct": c.excess_over_mma(),
        }


def bottleneck_report(tiles: list[TileConfig], hw: HardwareProfile = HardwareProfile(), pass_name: str = "fwd"):
    if not tiles:
        raise ValueError("need at least one tile")
    fn = {"fwd": fwd_roofline, "bwd": bwd_roofline}[pass_name]
    return [BottleneckRow(pass_name, t, fn(t, hw)) for t in tiles]


def with_overrides(hw: HardwareProfile, **kw) -> HardwareProfile:
    return replace(hw, **kw)
