"""Forward cycles per iteration as a function of the emulated exp fraction."""

import argparse

from attnlab.pipeline import exp_fraction_curve, optimal_exp_fraction
from attnlab.roofline import TileConfig, load_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="b200-class")
    ap.add_argument("--tiles", default="128x128x128,128x128x64,128x128x32")
    ap.add_argument("--cost", type=float, default=7.0, help="FMA-pipe cycles per emulated exp per lane")
    ap.add_argument("--step", type=int, default=10, help="print every n-th grid point")
    args = ap.parse_args()
    hw = load_profile(args.profile)

    for label in args.tiles.split(","):
        tile = TileConfig.parse(label)
        curve = exp_fraction_curve(tile, hw, args.cost)
        best = optimal_exp_fraction(tile, hw, args.cost)
        print(f"{label} on {hw.name}: best f = {best:.2f}")
        for f, cycles in curve[:: args.step]:
            print(f"  f={f:.2f} {cycles:9.1f} cycles/iter")


if __name__ == "__main__":
    main()
