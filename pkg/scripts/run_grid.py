"""Sweep the 12-point (m, alpha, beta) grid on the default task for one seed.

    python scripts/run_grid.py --seed 0 --out runs/grid.jsonl
"""

import argparse
import json
import logging
from dataclasses import asdict

from tdt.cli import GRID
from tdt.experiments import default_corpus, diagnose, model_config_for
from tdt.objective import TDTConfig
from tdt.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gamma", type=float, default=0.1)
    ap.add_argument("--total-steps", type=int, default=3000)
    ap.add_argument("--out", default="runs/grid.jsonl")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    corpus = default_corpus()
    with open(args.out, "w") as fh:
        for m, alpha, beta in GRID:
            cfg = TDTConfig(m=m, alpha=alpha, beta=beta, gamma=args.gamma)
            tc = TrainConfig(seed=args.seed, total_steps=args.total_steps)
            params, rec = train(corpus["train"], model_config_for(corpus.spec, cfg), cfg, tc, dev_split=corpus["dev"])
            res = diagnose(params, rec, corpus, "tdt", full=False)
            row = {"m": m, "alpha": alpha, "beta": beta, **asdict(res)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            print(f"m={m} alpha={alpha} beta={beta}: iid {res.iid_acc:.4f} anti {res.anti_acc:.4f}")


if __name__ == "__main__":
    main()
