"""Leave-one-echo-out grid search for the benchmark regularisation.

Fits a separate tuning phantom (seed 99, never used by the benchmark tests)
with every (intercept, decay) pair and prints the summed parenchyma Rice
log-likelihood of six held-out echoes. The winners are frozen in
``estatics.harness.BENCHMARK_LAMBDA``.

    python scripts/tune_lambda.py tkh --intercepts 10,30,100 --decays 0.003,0.01,0.03
"""

import argparse
import itertools
import json
import logging
import sys

from estatics.harness import benchmark_datasets, select_lambda

ECHOES = [(0, 0), (0, 4), (1, 1), (1, 6), (2, 2), (2, 5)]


def _floats(text):
    return [float(v) for v in text.split(",")]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("method", choices=["tkh", "jtv"])
    p.add_argument("--intercepts", type=_floats, required=True)
    p.add_argument("--decays", type=_floats, required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=99)
    p.add_argument("--out", help="optional JSON dump of all scores")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stdout, format="%(asctime)s %(message)s")
    logging.getLogger("estatics.mapfit").setLevel(logging.ERROR)

    datasets, _ = benchmark_datasets(args.size, 1, seed=args.seed)
    grid = list(itertools.product(args.intercepts, args.decays))
    best, scores = select_lambda(datasets[0], args.method, grid, ECHOES)
    print("best", best, scores[best])
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({f"{a},{b}": v for (a, b), v in scores.items()}, fh, indent=1)


if __name__ == "__main__":
    main()
