"""Univariate mixture Monte Carlo study: bias and MSE of EM (and optionally C-EM) across sample sizes."""

import argparse

import numpy as np

from mixcem.densities import MixtureModel, NormalParams
from mixcem.simulate import Exercise, Scenario, SimConfig, run_exercise1


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mu", type=float, nargs=2, default=[0.75, -0.75])
    ap.add_argument("--sigma", type=float, nargs=2, default=[1.0, 1.0])
    ap.add_argument("--pi1", type=float, default=0.5)
    ap.add_argument("--N", type=int, nargs="+", default=[100, 1000, 10000])
    ap.add_argument("--replications", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cem", action="store_true", help="also run C-EM from the same starts")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    truth = MixtureModel(
        (NormalParams(args.mu[0], args.sigma[0] ** 2), NormalParams(args.mu[1], args.sigma[1] ** 2)),
        np.array([args.pi1, 1 - args.pi1]),
    )
    algorithms = ("EM", "CEM") if args.cem else ("EM",)
    print("algorithm,N,parameter,truth,bias,mse,p2.5,p97.5")
    for N in args.N:
        sc = Scenario(Exercise.ONE, true_model=truth, N=N, replications=args.replications, seed=args.seed,
                      algorithms=algorithms)
        rep = run_exercise1(sc, SimConfig(workers=args.workers))
        for alg in algorithms:
            for name, s in rep.summaries[alg].items():
                print(f"{alg},{N},{name},{s.truth:.4f},{s.bias:+.5f},{s.mse:.5f},{s.p2_5:.4f},{s.p97_5:.4f}")


if __name__ == "__main__":
    main()
