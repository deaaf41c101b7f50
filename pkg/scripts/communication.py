"""Batch size versus rounds: larger client batches mean fewer server updates per epoch."""

import argparse
import logging
from dataclasses import replace

import numpy as np

from fedanon.experiment import PlantedConfig, build_population, evaluate, train_anonymizer, train_classifiers


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--batches", type=int, nargs="+", default=[16, 64, 128, 256])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    acc = {b: [] for b in args.batches}
    rounds = {}
    for seed in args.seeds:
        cfg = PlantedConfig(seed=seed)
        pop = build_population(cfg)
        clf = train_classifiers(pop, cfg)
        for b in args.batches:
            result = train_anonymizer(pop, replace(cfg, fed=cfg.fed.with_batch(b)))
            rounds[b] = len(result.records)
            acc[b].append(evaluate(result.model, pop.test, clf, seed)["desired"])
            print(f"seed {seed} b={b:<4d} rounds {rounds[b]:<5d} desired {acc[b][-1]:.4f}", flush=True)
    print("\nbatch  rounds  mean desired")
    for b in args.batches:
        print(f"{b:<6d} {rounds[b]:<7d} {np.mean(acc[b]):.4f}")


if __name__ == "__main__":
    main()
