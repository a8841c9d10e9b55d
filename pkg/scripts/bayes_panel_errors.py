"""Panel misclassification of the joint-density classifier evaluated at the true parameters.

This is the floor any estimator faces: cells that the true classifier gets
wrong are wrong for a fitted one too, up to sampling noise.
"""

import argparse

import numpy as np

from mixcem.panel import _logf_y, _logp_x, generate_exercise2, mundlak_expand
from mixcem.simulate import replication_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=500)
    ap.add_argument("--T", type=int, default=5)
    ap.add_argument("--G", type=int, default=2)
    ap.add_argument("--p", type=int, nargs="+", default=[5, 10, 20])
    ap.add_argument("--replications", type=int, default=100)
    ap.add_argument("--seed", type=int, default=404)
    args = ap.parse_args()
    print("p,zero_error_fraction,mean_wrong_cells")
    for p in args.p:
        wrong = []
        for i in range(args.replications):
            ds, truth = generate_exercise2(args.N, args.T, args.G, p, replication_rng(args.seed, i))
            h = _logf_y(truth.model.components, mundlak_expand(ds).X, ds.outcome) + _logp_x(
                truth.covariate_params, ds.covariates
            )
            wrong.append(int((h.argmax(axis=0) != truth.labels).sum()))
        wrong = np.array(wrong)
        print(f"{p},{np.mean(wrong == 0):.2f},{wrong.mean():.2f}")


if __name__ == "__main__":
    main()
