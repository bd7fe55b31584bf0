"""Naive vs LPT tile orderings, and dQ lock stalls under naive vs SPT."""

import argparse

import numpy as np

from attnlab.scheduler import Policy, WorktileGrid, makespan_reduction, simulate_dq_locks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grids", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    print("causal makespan, naive ascending vs LPT")
    print(f"{'mblocks':>8} {'heads':>6} {'batch':>6} {'procs':>6} {'naive':>7} {'lpt':>7} {'gain':>7}")
    for mb, heads, batch, procs in [(8, 1, 1, 4), (16, 16, 4, 148), (32, 8, 2, 132), (64, 4, 1, 148)]:
        naive, lpt = makespan_reduction(WorktileGrid(mb, heads, n_batches=batch), procs)
        print(f"{mb:>8} {heads:>6} {batch:>6} {procs:>6} {naive:>7g} {lpt:>7g} {1 - lpt / naive:>7.1%}")

    rng = np.random.default_rng(args.seed)
    gains = []
    for _ in range(args.grids):
        g = WorktileGrid(int(rng.integers(4, 33)), int(rng.integers(1, 17)), n_batches=int(rng.integers(1, 5)))
        naive, lpt = makespan_reduction(g, int(rng.integers(2, 17)))
        gains.append(1 - lpt / naive)
    gains = np.array(gains)
    print(
        f"\n{args.grids} random causal grids: mean gain {gains.mean():.1%}, "
        f"strictly better on {(gains > 0).mean():.0%}, worse on {(gains < 0).mean():.0%}"
    )

    print("\ndQ lock simulation, resident CTAs = KV blocks")
    print(f"{'kv blocks':>10} {'policy':>7} {'makespan':>9} {'stall':>7} {'first-write stalls':>19}")
    for n in (4, 8, 16, 32):
        for policy in (Policy.NAIVE, Policy.SPT):
            r = simulate_dq_locks(WorktileGrid(n, 1), policy, n_processors=n)
            print(f"{n:>10} {policy.value:>7} {r.makespan:>9g} {sum(r.per_cta_stall):>7g} {r.first_write_stalls:>19}")


if __name__ == "__main__":
    main()
