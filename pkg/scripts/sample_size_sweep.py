"""Error of the naive and oracle-instrument estimators as the panel grows.

    python3 scripts/sample_size_sweep.py --reps 5 --sizes 500 2000 8000

No training involved: the oracle uses the simulated latents, so this isolates
the estimator from representation learning.
"""
import argparse

import numpy as np

from tdciv.estimator import ace_naive, ace_oracle, evaluate
from tdciv.synthdata import GenConfig, generate_dataset, replicate_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000, 4000, 8000])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--dim-u", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'n':>6} {'naive MAE':>10} {'oracle MAE':>11} {'oracle sd':>10}")
    for n in args.sizes:
        naive, oracle = [], []
        for k in range(args.reps):
            ds = generate_dataset(GenConfig(n_samples=n, dim_u=args.dim_u, seed=replicate_seed(args.seed, k)))
            naive.append(evaluate(ace_naive(ds), 0.5).mean_abs_error())
            oracle.append(evaluate(ace_oracle(ds), 0.5).mean_abs_error())
        print(f"{n:>6} {np.mean(naive):10.3f} {np.mean(oracle):11.3f} {np.std(oracle):10.3f}")


if __name__ == "__main__":
    main()
