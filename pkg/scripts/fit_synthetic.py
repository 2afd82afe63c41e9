"""Codebook recovery on a planted-cluster corpus.

Draws batches from a square grid of Gaussian clusters, fits a one-stage
codebook with the EMA learner, and reports utilization plus the distance
from every true center to its nearest learned code.
"""

import argparse

import numpy as np

from fdcodec.quantizer import QuantizerStack, fit_stack, squared_distances


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--grid", type=int, default=8, help="clusters per side")
    parser.add_argument("--sigma", type=float, default=0.05,
                        help="cluster spread (separation is 1.0)")
    parser.add_argument("--batches", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=1024)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    k = args.grid ** 2
    rng = np.random.default_rng(args.seed)
    centers = np.stack(
        np.meshgrid(np.arange(float(args.grid)), np.arange(float(args.grid))),
        axis=-1,
    ).reshape(k, 2)

    def batch(m):
        which = rng.integers(0, k, size=m)
        return centers[which] + rng.normal(0.0, args.sigma, size=(m, 2))

    stack = QuantizerStack.empty(num_quantizers=1, num_codes=k, dim=2)
    report = fit_stack(stack, (batch(args.batch_size) for _ in range(args.batches)), rng)
    codebook = stack.codebooks[0]

    errors = np.sqrt(np.min(squared_distances(centers, codebook.vectors), axis=1))
    used = np.unique(codebook.assign(batch(64 * k))).size
    print(f"clusters            {k}")
    print(f"batches             {report.batches_processed}")
    print(f"final utilization   {report.utilization[0]:.3f}")
    print(f"codes used (fresh)  {used}/{k}")
    print(f"center error max    {errors.max():.4f}")
    print(f"center error mean   {errors.mean():.4f}")
    print(f"reassignments       {report.reassigned[0]}")


if __name__ == "__main__":
    main()
