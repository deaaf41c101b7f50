"""One anonymizer hiding two private attributes at once, one discriminator each."""

import argparse
import logging

import numpy as np

from fedanon.experiment import (PlantedConfig, build_population, evaluate, planted_schema, train_anonymizer,
                                train_classifiers)
from fedanon.config import parse_attributes


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--attributes", default="gender,weight")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    attrs = parse_attributes(args.attributes)
    rows = []
    for seed in args.seeds:
        cfg = PlantedConfig(seed=seed, schema=planted_schema([(a.name, a.n_classes) for a in attrs]))
        pop = build_population(cfg)
        clf = train_classifiers(pop, cfg)
        ev = evaluate(train_anonymizer(pop, cfg).model, pop.test, clf, seed)
        rows.append([clf.raw["desired"], ev["desired"], *ev["intrusive"]])
        print(f"seed {seed}: desired {ev['desired']:.4f} "
              + " ".join(f"{a.name} {v:.4f}" for a, v in zip(attrs, ev["intrusive"])), flush=True)
    mean = np.mean(rows, axis=0)
    print(f"mean: desired {mean[1]:.4f} of raw {mean[0]:.4f}; "
          + ", ".join(f"{a.name} intrusive {v:.4f}" for a, v in zip(attrs, mean[2:])))


if __name__ == "__main__":
    main()
