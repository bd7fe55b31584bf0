"""Print the roofline cycle tables and the exp2 accuracy table."""

import argparse

from attnlab.fastmath import Method, accuracy_sweep
from attnlab.roofline import CtaMode, TileConfig, bwd_roofline, fwd_roofline, load_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="b200-class")
    ap.add_argument("--samples", type=int, default=4_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    hw = load_profile(args.profile)

    print(f"forward roofline ({hw.name})")
    print(f"{'tile':>12} {'MMA':>6} {'SMEM':>6} {'exp':>6}")
    for tile in (TileConfig(128, 128, 128), TileConfig(256, 128, 128)):
        c = fwd_roofline(tile, hw)
        print(f"{tile.label():>12} {c.t_mma:>6g} {c.t_smem_total:>6g} {c.t_exp:>6g}")

    print(f"\nbackward roofline ({hw.name})")
    print(f"{'mode':>6} {'MMA':>6} {'ops':>6} {'dS':>5} {'dsmem':>6} {'dQ':>6} {'SMEM':>6} {'exp':>6} {'excess':>7}")
    for tile in (TileConfig(128, 128, 128), TileConfig(256, 128, 128, cta_mode=CtaMode.TWO_CTA)):
        c = bwd_roofline(tile, hw)
        print(
            f"{tile.cta_mode.value:>6} {c.t_mma:>6g} {c.t_smem_mma_operands:>6g} {c.t_smem_ds_write:>5g} "
            f"{c.t_smem_ds_dsmem:>6g} {c.t_smem_dq:>6g} {c.t_smem_total:>6g} {c.t_exp:>6g} {c.excess_over_mma():>6.1f}%"
        )

    print(f"\nexp2 accuracy over {args.samples} samples (seed {args.seed})")
    print(f"{'method':>20} {'fp32 max':>10} {'fp32 mean':>10} {'bf16 max':>10} {'bf16 mean':>10} {'ulp<=1':>7}")
    for m in Method:
        r = accuracy_sweep(m, args.samples, args.seed)
        fp32 = "---" if r.fp32_max_rel != r.fp32_max_rel else f"{r.fp32_max_rel:.2e}"
        fp32m = "---" if r.fp32_mean_rel != r.fp32_mean_rel else f"{r.fp32_mean_rel:.2e}"
        print(
            f"{m.value:>20} {fp32:>10} {fp32m:>10} {r.bf16_max_rel:>10.3e} {r.bf16_mean_rel:>10.3e} "
            f"{r.ulp_match_fraction:>7.4f}"
        )


if __name__ == "__main__":
    main()
