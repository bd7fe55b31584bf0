"""Command-line front end: ``attnlab <command> [flags]``.

Exit codes: 0 when every internal check holds, 1 on a check failure,
2 on bad usage (argparse errors, unknown profiles, invalid values).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fastmath, matio
from .attention import (
    AttentionParams,
    ExpMode,
    Precision,
    attention_backward_tiled,
    attention_forward_tiled,
    attention_reference,
    finite_difference_grads,
)
from .pipeline import build_bwd_pipeline, build_fwd_pipeline, exp_fraction_curve, optimal_exp_fraction, steady_state
from .roofline import CtaMode, TileConfig, bottleneck_report, load_profile, with_overrides
from .scheduler import (
    Policy,
    WorktileGrid,
    order_lpt_causal,
    order_lpt_varlen,
    order_naive,
    simulate_dq_locks,
    simulate_makespan,
)

FWD_DEFAULT_TILES = ["128x128x128", "256x128x128"]


class UsageError(Exception):
    pass


@dataclass
class Report:
    command: str
    rows: list[dict]
    ok: bool = True
    problems: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def fail(self, msg: str):
        self.ok = False
        self.problems.append(msg)

    def to_dict(self) -> dict:
        return {"command": self.command, "ok": self.ok, "problems": self.problems, "rows": self.rows, **self.extra}


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _cell(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return {"True": True, "False": False}.get(text, text)


def rows_from_csv(text: str) -> list[dict]:
    return [{k: _cell(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]


# -- helpers ----------------------------------------------------------------


def _profile(args):
    try:
        hw = load_profile(args.profile)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    overrides = {}
    for item in args.set or []:
        key, _, val = item.partition("=")
        if not val:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key] = float(val)
    if overrides:
        try:
            hw = with_overrides(hw, **overrides)
        except TypeError as e:
            raise UsageError(str(e)) from None
    return hw


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _degrees(text: str) -> list[int]:
    try:
        ds = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad degree list {text!r}") from None
    if not ds or any(d not in (3, 4, 5) for d in ds):
        raise argparse.ArgumentTypeError("degrees must be drawn from 3,4,5")
    return ds


def _tile(text: str) -> str:
    try:
        TileConfig.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like 128x128x128, got {text!r}") from None
    return text


# -- commands ---------------------------------------------------------------


def cmd_exp2_accuracy(args) -> Report:
    methods = [fastmath.Method.for_degree(d) for d in args.degrees]
    methods += [fastmath.Method.HARDWARE_LIKE, fastmath.Method.IDEAL_ROUND]
    reports = [fastmath.accuracy_sweep(m, args.samples, args.seed) for m in methods]
    rep = Report("exp2-accuracy", rows_from_csv(fastmath.reports_to_csv(reports)))
    rep.extra["csv"] = fastmath.reports_to_csv(reports)
    for r in reports:
        for p in r.check():
            rep.fail(p)
        if r.method.degree is not None:
            bound = fastmath.fit_minimax(r.method.degree).kernel_error_bound()
            if r.fp32_max_rel > bound:
                rep.fail(f"degree {r.method.degree}: fp32 error {r.fp32_max_rel:.3g} above kernel bound {bound:.3g}")
    return rep


def cmd_roofline(args) -> Report:
    hw = _profile(args)
    cta = CtaMode(args.cta)
    passes = ["fwd", "bwd"] if args.pass_name == "both" else [args.pass_name]
    rows = []
    for p in passes:
        if args.tile:
            texts = args.tile
        elif p == "fwd":
            texts = FWD_DEFAULT_TILES
        else:
            texts = ["256x128x128" if cta is CtaMode.TWO_CTA else "128x128x128"]
        tiles = [TileConfig.parse(t, cta_mode=cta if p == "bwd" else CtaMode.ONE_CTA) for t in texts]
        try:
            rows += [r.to_dict() for r in bottleneck_report(tiles, hw, p)]
        except ValueError as e:
            raise UsageError(str(e)) from None
    rep = Report("roofline", rows, extra={"profile": hw.name})
    for r in rows:
        if not all(math.isfinite(r[k]) and r[k] >= 0 for k in r if k.startswith("t_")):
            rep.fail(f"{r['pass']} {r['tile']}: negative or non-finite cycle count")
    return rep


def _load_or_draw(path, shape, rng):
    if path:
        a = matio.load_any(path)
        if a.shape != shape:
            raise UsageError(f"{path}: shape {a.shape}, expected {shape}")
        return a
    return rng.standard_normal(shape)


def cmd_attention_check(args) -> Report:
    try:
        mode = ExpMode.parse(args.exp)
    except ValueError as e:
        raise UsageError(str(e)) from None
    precision = Precision(args.precision)
    params = AttentionParams(
        args.nq, args.nkv, args.d, causal=args.causal, tile_m=args.tile_m, tile_n=args.tile_n,
        exp_mode=mode, precision=precision,
    )
    rng = np.random.default_rng(args.seed)
    Q = _load_or_draw(args.q, (args.nq, args.d), rng)
    K = _load_or_draw(args.k, (args.nkv, args.d), rng)
    V = _load_or_draw(args.v, (args.nkv, args.d), rng)
    dO = rng.standard_normal((args.nq, args.d))

    ref = attention_reference(Q, K, V, params)
    fwd = attention_forward_tiled(Q, K, V, params)
    fwd_err = float(np.max(np.abs(fwd.O.astype(np.float64) - ref.O), initial=0.0))
    live = np.isfinite(ref.lse)
    lse_err = float(np.max(np.abs(fwd.lse[live] - ref.lse[live]), initial=0.0))
    rows = [{"check": "forward_max_abs_err", "value": fwd_err}, {"check": "lse_max_abs_err", "value": lse_err}]
    rep = Report("attention-check", rows, extra={"precision": precision.value, "exp": args.exp})
    if args.out_matrix:
        matio.save_matrix(args.out_matrix, fwd.O)

    if precision is Precision.FP64_ORACLE:
        fwd_tol = 1e-12 if mode.kind == "reference" else 5e-3
        if fwd_err > fwd_tol:
            rep.fail(f"forward error {fwd_err:.3g} > {fwd_tol:g}")
        one = attention_backward_tiled(Q, K, V, dO, fwd, params, CtaMode.ONE_CTA)
        two = attention_backward_tiled(Q, K, V, dO, fwd, params, CtaMode.TWO_CTA)
        pair_err = max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip((one.dQ, one.dK, one.dV), (two.dQ, two.dK, two.dV)))
        rows += [
            {"check": "one_vs_two_cta_max_abs_diff", "value": pair_err},
            {"check": "atomic_adds_one_cta", "value": one.atomic_adds},
            {"check": "atomic_adds_two_cta", "value": two.atomic_adds},
        ]
        if pair_err > 1e-12:
            rep.fail(f"1-CTA and 2-CTA gradients differ by {pair_err:.3g}")
        if mode.kind == "reference" and args.nq * args.nkv * args.d <= args.fd_limit:
            fd = finite_difference_grads(Q, K, V, dO, params)
            rel = max(
                float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
                for a, b in zip((one.dQ, one.dK, one.dV), fd)
            )
            rows.append({"check": "grad_vs_fd_rel_err", "value": rel})
            if rel > 1e-6:
                rep.fail(f"gradient vs finite differences {rel:.3g} > 1e-6")
    else:
        # bf16 inputs and P: the error envelope is a few bf16 ulps of the output scale
        scale = max(1.0, float(np.max(np.abs(ref.O), initial=0.0)))
        tol = 16 * fastmath.BF16_EPS * scale
        rows.append({"check": "forward_tolerance", "value": tol})
        if not np.all(np.isfinite(fwd.O)) or fwd_err > tol:
            rep.fail(f"kernel-faithful forward error {fwd_err:.3g} exceeds envelope {tol:.3g}")
    rows.append({"check": "rescales_per_row_block", "value": fwd.n_rescales / max(fwd.n_row_blocks, 1)})
    return rep


def _grid(args) -> WorktileGrid:
    kw = dict(heads_per_kv_head=args.group, causal=not args.non_causal, tile_m=args.tile_m, tile_n=args.tile_n)
    try:
        if args.seqlens:
            lens = [int(s) for s in args.seqlens.split(",")]
            return WorktileGrid.varlen(lens, lens, n_heads=args.heads, **kw)
        return WorktileGrid(args.mblocks, args.heads, args.batches, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_schedule_sim(args) -> Report:
    grid = _grid(args)
    policy = Policy(args.policy)
    if args.lock_sim or policy is Policy.SPT:
        if policy not in (Policy.NAIVE, Policy.SPT):
            raise UsageError("--lock-sim supports --policy naive or spt")
        if policy is Policy.SPT and not grid.causal:
            raise UsageError("spt needs a causal grid")
        n = args.sms or max(grid.kv_blocks(b) for b in range(grid.n_batches))
        res = simulate_dq_locks(grid, policy, n, args.iter_cycles, args.reduce_cycles, args.fence_cycles)
        d = res.to_dict()
        row = {"policy": policy.value, "processors": n, "makespan": d["makespan"],
               "first_write_stalls": d["first_write_stalls"], "total_stall": d["total_stall"]}
        rep = Report("schedule-sim", [row], extra={"reduction_order": d["reduction_order"]})
        if policy is Policy.SPT and n >= max(grid.kv_blocks(b) for b in range(grid.n_batches)) and res.first_write_stalls:
            rep.fail(f"spt with resident CTAs stalled {res.first_write_stalls} first writes")
        return rep

    sms = args.sms or 148
    kv_bytes = args.kv_bytes or 2 * grid.seqlens(0)[1] * args.d * 2
    if policy is Policy.NAIVE:
        sched = order_naive(grid)
    elif policy is Policy.LPT_CAUSAL:
        sched = order_lpt_causal(grid, args.l2_bytes or load_profile(args.profile).l2_bytes, kv_bytes)
    else:
        sched = order_lpt_varlen(grid)
    res = simulate_makespan(sched, sms)
    naive = simulate_makespan(order_naive(grid), sms).makespan
    row = {"policy": policy.value, "processors": sms, "tiles": len(sched.order), "makespan": res.makespan,
           "naive_makespan": naive, "reduction_pct": 100.0 * (naive - res.makespan) / naive if naive else 0.0}
    meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in sched.metadata.items()}
    rep = Report("schedule-sim", [row], extra={"metadata": meta})
    if sorted(sched.order) != sorted(grid.coords()):
        rep.fail("schedule is not a permutation of the grid")
    if policy is not Policy.NAIVE and res.makespan > naive:
        rep.fail(f"{policy.value} makespan {res.makespan} exceeds naive {naive}")
    return rep


def cmd_pipeline_sim(args) -> Report:
    hw = _profile(args)
    cta = CtaMode(args.cta)
    text = args.tile or ("256x128x128" if args.pass_name == "bwd" and cta is CtaMode.TWO_CTA else "128x128x128")
    tile = TileConfig.parse(text, cta_mode=cta)
    extra = {}
    try:
        if args.pass_name == "bwd":
            pipe = build_bwd_pipeline(tile, hw, cta)
        else:
            if args.exp_fraction == "auto":
                f = optimal_exp_fraction(tile, hw, args.emulated_cost)
                extra["optimal_exp_fraction"] = f
                extra["curve"] = [{"f": a, "cycles": c} for a, c in exp_fraction_curve(tile, hw, args.emulated_cost)]
            else:
                f = float(args.exp_fraction)
                if not 0.0 <= f <= 1.0:
                    raise UsageError("--exp-fraction must be in [0, 1] or 'auto'")
            pipe = build_fwd_pipeline(tile, hw, f, args.emulated_cost)
            extra["exp_fraction"] = f
    except ValueError as e:
        raise UsageError(str(e)) from None
    ss = steady_state(pipe)
    row = {"pipeline": pipe.name, "cycles_per_iter": ss.cycles_per_iter, "bottleneck": ss.bottleneck,
           "resource_bound": ss.resource_bound, "cycle_bound": ss.cycle_bound}
    row.update({f"util_{k}": v for k, v in ss.per_resource_utilization.items()})
    rep = Report("pipeline-sim", [row], extra={**extra, "critical_path": ss.critical_path})
    if any(v > 1 + 1e-9 for v in ss.per_resource_utilization.values()):
        rep.fail("a unit is more than fully utilized")
    return rep


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=["json", "csv"], default="json")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--profile", default=None, help="profile name or JSON path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a profile field")

    ap = argparse.ArgumentParser(prog="attnlab", description="Attention kernel cost models and numerics checks.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exp2-accuracy", parents=[common], help="polynomial exp2 accuracy table")
    p.add_argument("--degrees", type=_degrees, default=[3, 4, 5])
    p.add_argument("--samples", type=_positive_int, default=4_000_000)
    p.set_defaults(fn=cmd_exp2_accuracy)

    p = sub.add_parser("roofline", parents=[common], help="per-resource cycle tables")
    p.add_argument("--pass", dest="pass_name", choices=["fwd", "bwd", "both"], default="fwd")
    p.add_argument("--tile", action="append", type=_tile)
    p.add_argument("--cta", type=int, choices=[1, 2], default=1)
    p.set_defaults(fn=cmd_roofline)

    p = sub.add_parser("attention-check", parents=[common], help="tiled attention vs dense oracle")
    p.add_argument("--precision", choices=[m.value for m in Precision], default="fp64")
    p.add_argument("--exp", default="reference", help="reference | emulated[:deg] | mixed:f[:deg]")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--nq", type=_positive_int, default=48)
    p.add_argument("--nkv", type=_positive_int, default=40)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--tile-m", type=_positive_int, default=16)
    p.add_argument("--tile-n", type=_positive_int, default=16)
    p.add_argument("--fd-limit", type=int, default=20_000, help="skip finite differences above nq*nkv*d")
    p.add_argument("--q")
    p.add_argument("--k")
    p.add_argument("--v")
    p.add_argument("--out-matrix", help="write O in the binary matrix layout")
    p.set_defaults(fn=cmd_attention_check)

    p = sub.add_parser("schedule-sim", parents=[common], help="worktile makespan and dQ lock simulation")
    p.add_argument("--policy", choices=[m.value for m in Policy], default="lpt-causal")
    p.add_argument("--lock-sim", action="store_true")
    p.add_argument("--sms", type=_positive_int)
    p.add_argument("--mblocks", type=_positive_int, default=16)
    p.add_argument("--heads", type=_positive_int, default=16)
    p.add_argument("--batches", type=_positive_int, default=4)
    p.add_argument("--group", type=_positive_int, default=1, help="query heads per KV head")
    p.add_argument("--seqlens", help="comma-separated per-batch lengths (varlen)")
    p.add_argument("--non-causal", action="store_true")
    p.add_argument("--d", type=_positive_int, default=128)
    p.add_argument("--tile-m", type=_positive_int, default=128)
    p.add_argument("--tile-n", type=_positive_int, default=128)
    p.add_argument("--l2-bytes", type=float)
    p.add_argument("--kv-bytes", type=float, help="K+V bytes per KV head")
    p.add_argument("--iter-cycles", type=float, default=1.0)
    p.add_argument("--reduce-cycles", type=float, default=0.25)
    p.add_argument("--fence-cycles", type=float, default=0.0)
    p.set_defaults(fn=cmd_schedule_sim)

    p = sub.add_parser("pipeline-sim", parents=[common], help="steady-state pipeline cycles")
    p.add_argument("--pass", dest="pass_name", choices=["fwd", "bwd"], default="fwd")
    p.add_argument("--tile", type=_tile)
    p.add_argument("--cta", type=int, choices=[1, 2], default=1)
    p.add_argument("--exp-fraction", default="0")
    p.add_argument("--emulated-cost", type=float, default=7.0, help="FMA-pipe cycles per emulated exp2")
    p.set_defaults(fn=cmd_pipeline_sim)
    return ap


def render(rep: Report, fmt: str) -> str:
    if fmt == "csv":
        return rep.extra.get("csv") or rows_to_csv(rep.rows)
    return json.dumps(rep.to_dict(), indent=2) + "\n"


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with 2 on bad flags
    try:
        rep = args.fn(args)
    except UsageError as e:
        print(f"attnlab {args.command}: error: {e}", file=sys.stderr)
        return 2
    text = render(rep, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for p in rep.problems:
        print(f"check failed: {p}", file=sys.stderr)
    return 0 if rep.ok else 1


if __name__ == "__main__":
    sys.exit(main())
