"""Misclassification at the true parameters as the covariate dimension grows.

Prints, per dimension p, the probability of at least one error among N
observations and the mean per-observation error rate, for the Euclidean and
Mahalanobis rules.
"""

import argparse

import numpy as np

from mixcem.classify import GaussianGroupsDGP, Rule, uniform_error_estimate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, nargs="+", default=[1, 2, 3, 5, 10, 20])
    ap.add_argument("--N", type=int, default=50)
    ap.add_argument("--G", type=int, default=2)
    ap.add_argument("--replications", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    dgp = GaussianGroupsDGP(n_groups=args.G)
    print("rule,p,P(any error),rate,p*rate")
    for rule in (Rule.EUCLIDEAN, Rule.MAHALANOBIS):
        rng = np.random.default_rng(args.seed)
        for p in args.p:
            any_err, rate = uniform_error_estimate(rule, dgp, p, args.N, args.replications, rng, return_rate=True)
            print(f"{rule.value},{p},{any_err:.4f},{rate:.5f},{p * rate:.4f}")


if __name__ == "__main__":
    main()
