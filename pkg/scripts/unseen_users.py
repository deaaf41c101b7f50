"""Generalization to clients that never trained, then local personalization of the worst ones."""

import argparse
import logging

import numpy as np

from fedanon.experiment import (PlantedConfig, adapt_clients, build_population, evaluate, train_anonymizer,
                                train_classifiers)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--participation", type=float, default=0.5)
    ap.add_argument("--worst-share", type=float, default=10 / 18, help="share of unseen clients to adapt")
    ap.add_argument("--fraction", type=float, default=0.04)
    ap.add_argument("--iterations", type=int, default=80)
    ap.add_argument("--rehearsal", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = PlantedConfig(seed=args.seed, participation=args.participation)
    pop = build_population(cfg)
    clf = train_classifiers(pop, cfg)
    model = train_anonymizer(pop, cfg).model

    def desired(clients):
        return evaluate(model, pop.test[np.isin(pop.test.client, clients)], clf, args.seed)["desired"]

    print(f"participants {desired(pop.participants):.4f}  unseen {desired(pop.unseen):.4f}")
    before = {c: desired([c]) for c in pop.unseen}
    worst = sorted(pop.unseen, key=lambda c: (before[c], c))[:max(1, round(len(pop.unseen) * args.worst_share))]
    res = adapt_clients(model, pop, clf, worst, cfg, fraction=args.fraction, iterations=args.iterations,
                        rehearsal=args.rehearsal)
    for c, r in res.items():
        print(f"{c}: desired {r['before']['desired']:.4f} -> {r['after']['desired']:.4f}  "
              f"intrusive {r['before']['intrusive'][0]:.4f} -> {r['after']['intrusive'][0]:.4f}")


if __name__ == "__main__":
    main()
