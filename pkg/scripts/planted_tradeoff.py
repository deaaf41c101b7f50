"""Privacy/utility on the planted-signal population, with the per-epoch curve.

    python scripts/planted_tradeoff.py --seeds 0 1 2 --out results/tradeoff.json
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from fedanon.evaluation import privacy_utility_curve
from fedanon.experiment import PlantedConfig, build_population, evaluate, raw_mi, train_anonymizer, train_classifiers


def run(seed: int, curve: bool) -> dict:
    cfg = PlantedConfig(seed=seed)
    pop = build_population(cfg)
    clf = train_classifiers(pop, cfg)
    result = train_anonymizer(pop, cfg, keep_snapshots=curve)
    row = {"seed": seed, "raw": {**clf.raw, **raw_mi(pop, seed)},
           "anonymized": evaluate(result.model, pop.test, clf, seed, mi=True), "train_seconds": result.seconds}
    if curve:
        rows = privacy_utility_curve(result.snapshots, pop.test, clf.desired, clf.intrusive[0], seed=seed)
        row["curve"] = [vars(r) for r in rows]
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--curve", action="store_true", help="also score every epoch snapshot")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    rows = [run(s, args.curve) for s in args.seeds]
    for r in rows:
        a = r["anonymized"]
        print(f"seed {r['seed']}: desired {a['desired']:.4f} (raw {r['raw']['desired']:.4f})  "
              f"intrusive {a['intrusive'][0]:.4f}  MI private {a['mi_private'][0]:.4f} "
              f"(raw {r['raw']['mi_private'][0]:.4f})")
    print(f"mean desired {np.mean([r['anonymized']['desired'] for r in rows]):.4f}, "
          f"mean intrusive {np.mean([r['anonymized']['intrusive'][0] for r in rows]):.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2, default=float))


if __name__ == "__main__":
    main()
