"""Spread of the reversed domain gradient as the number of MC samples grows.

For a fixed random network and batch, draws the K-sample mean gradient
under many mask seeds and reports its across-seed variance per K, next to
the per-sample variance and the discriminator output variance.

    python scripts/gradient_variance.py --dropout 0.5
"""
import argparse

import numpy as np

from dropda.adapt import gradient_distribution
from dropda.data import DomainBatch
from dropda.diffcore import make_rng
from dropda.network import NetworkParams, discriminate_mc, extract_features, mc_output_variance


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--k", type=int, nargs="+", default=[2, 4, 8, 16, 32])
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if min(args.k) < 2:
        p.error("every K must be >= 2")

    rng = make_rng(args.seed)
    net = NetworkParams.build(2, 2, rng, extractor_hidden=(16, 16), discriminator_hidden=(32,),
                              dropout=args.dropout)
    x = rng.normal(size=(40, 2))
    batch = DomainBatch(x[:20], rng.integers(0, 2, size=20), x[20:] + 1.0)
    h = extract_features(batch.inputs, net.extractor)

    print("k,output_var,per_sample_grad_var,mean_grad_norm,var_of_mean_grad")
    for k in args.k:
        stats = [gradient_distribution(batch, net, k, 1.0, make_rng(1000 + s)) for s in range(args.draws)]
        means = np.stack([s.mean_gradient for s in stats])
        out_var = mc_output_variance(discriminate_mc(h, net.discriminator, k, make_rng(7))).mean()
        print(f"{k},{out_var:.4e},{np.mean([s.variance for s in stats]):.4e},"
              f"{np.mean([s.mean_norm for s in stats]):.4e},{means.var(axis=0, ddof=1).mean():.4e}")


if __name__ == "__main__":
    main()
