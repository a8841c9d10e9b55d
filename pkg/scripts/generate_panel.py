"""Write a simulated latent-group panel as a long-format CSV (with a truth ``group`` column)."""

import argparse

import numpy as np

from mixcem.panel import generate_exercise2, write_panel_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="CSV path")
    ap.add_argument("--N", type=int, default=500)
    ap.add_argument("--T", type=int, default=5)
    ap.add_argument("--G", type=int, default=2)
    ap.add_argument("--p", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-truth", action="store_true", help="omit the group column")
    args = ap.parse_args()
    dataset, truth = generate_exercise2(args.N, args.T, args.G, args.p, np.random.default_rng(args.seed))
    write_panel_csv(args.out, dataset, include_truth=not args.no_truth)
    for g, c in enumerate(truth.model.components, start=1):
        print(f"group {g}: beta={c.beta:.4f} gamma={c.gamma:.4f} sigma2_alpha={c.sigma2_alpha:g}")


if __name__ == "__main__":
    main()
