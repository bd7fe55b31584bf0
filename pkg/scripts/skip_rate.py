"""How often conditional rescaling actually rescales, as a function of tau."""

import argparse

import numpy as np

from attnlab.online_softmax import SoftmaxState, update_always_rescale, update_conditional


def stream(scores, block, update, tau, warp_size=None):
    st = SoftmaxState.fresh(1, rows=scores.shape[0], tau=tau)
    v = np.zeros((scores.shape[1], 1))
    for a in range(0, scores.shape[1], block):
        kw = {"warp_size": warp_size} if update is update_conditional else {}
        st = update(st, scores[:, a : a + block], v[a : a + block], **kw)
    return st


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=128)
    ap.add_argument("--kv", type=int, default=8192)
    ap.add_argument("--block", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    workloads = {
        "gaussian": rng.standard_normal((args.rows, args.kv)),
        "gaussian x4": 4 * rng.standard_normal((args.rows, args.kv)),
        "drifting": rng.standard_normal((args.rows, args.kv)) + np.linspace(0, 40, args.kv),
    }
    taus = (1.0, 2.0, 4.0, 8.0, 16.0)
    print(f"{'workload':>12} {'always':>8} " + " ".join(f"{'tau=' + format(t, 'g'):>8}" for t in taus) + f" {'warp32':>8}")
    for name, s in workloads.items():
        base = stream(s, args.block, update_always_rescale, 8.0)
        rates = [stream(s, args.block, update_conditional, t) for t in taus]
        warp = stream(s, args.block, update_conditional, 8.0, warp_size=32)
        cells = [f"{r.n_rescales / r.n_blocks:>8.3%}" for r in (base, *rates, warp)]
        print(f"{name:>12} " + " ".join(cells))


if __name__ == "__main__":
    main()
