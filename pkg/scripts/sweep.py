"""Sweep one routing or loss setting and report the overall and singleton test RMSE per value.

    python scripts/sweep.py --param lambda_spec --values 0 0.05 0.1 0.3
    python scripts/sweep.py --param top_k --values 1 2 4 --strategy shared
"""

import argparse
import dataclasses
import json
import logging

from modmoe.config import RunConfig
from modmoe.experiments import compare_strategies

ROUTING = {"top_k", "experts", "expert_hidden"}
TRAIN = {"lambda_spec", "lambda_bal", "learning_rate"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--param", required=True, choices=sorted(ROUTING | TRAIN))
    ap.add_argument("--values", nargs="+", type=float, required=True)
    ap.add_argument("--strategy", default="per-modality", choices=["shared", "per-modality"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = RunConfig()
    for value in args.values:
        if args.param in ROUTING:
            cfg = dataclasses.replace(base, routing=dataclasses.replace(base.routing, **{args.param: int(value)}))
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seeds=tuple(args.seeds)))
        else:
            cfg = dataclasses.replace(
                base, train=dataclasses.replace(base.train, seeds=tuple(args.seeds), **{args.param: value})
            )
        (res,) = compare_strategies(cfg, strategies=(args.strategy,)).values()
        print(json.dumps({args.param: value, "test_rmse": res.seeds.mean,
                          "singleton_rmse": [round(x, 4) for x in res.singleton_rmse()],
                          "entropy": res.activation.aggregate_entropy}))


if __name__ == "__main__":
    main()
