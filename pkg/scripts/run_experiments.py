"""Train vanilla and TDT arms over several seeds and log every diagnostic.

    python scripts/run_experiments.py --out runs/suite --seeds 0 1 2 3 4
"""

import argparse
import logging

from tdt.experiments import run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/suite")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--low-resource-seeds", type=int, nargs="*", default=[0, 1, 2, 3])
    ap.add_argument("--hard-seeds", type=int, nargs="*", default=[0])
    ap.add_argument("--arms", nargs="+", default=["vanilla", "tdt"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run_suite(args.out, args.seeds, args.arms, args.low_resource_seeds, args.hard_seeds)


if __name__ == "__main__":
    main()
