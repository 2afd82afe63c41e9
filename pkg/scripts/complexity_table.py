"""Print parameter and MAC counts for every shipped preset."""

import argparse

from fdcodec.configs import PRESETS
from fdcodec.model import count_complexity


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--flops-per-mac", type=int, choices=(1, 2), default=1,
                        help="FLOP convention used for the FLOPs column")
    parser.add_argument("--layers", action="store_true",
                        help="also print the per-layer breakdown")
    args = parser.parse_args()

    print(f"{'preset':<8} {'params':>12} {'macs/s':>16} {'flops/s':>16}")
    for name in sorted(PRESETS):
        report = count_complexity(PRESETS[name])
        macs = sum(layer.macs_per_second for layer in report.layers)
        print(f"{name:<8} {report.total_params:>12,} {macs:>16,.0f} "
              f"{macs * args.flops_per_mac:>16,.0f}")
        if args.layers:
            for layer in report.layers:
                print(f"    {layer.name:<24} {layer.params:>12,} {layer.macs_per_second:>16,.0f}")


if __name__ == "__main__":
    main()
