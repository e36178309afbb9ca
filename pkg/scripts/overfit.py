"""Memorize 32 synthetic samples at d=64 and report steps, accuracy and exact greedy matches."""
import argparse
import logging
from dataclasses import asdict

from fpdg.experiments import overfit

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--n", type=int, default=32)
ap.add_argument("--max-steps", type=int, default=2000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
print(asdict(overfit(args.n, max_steps=args.max_steps, seed=args.seed)))
