"""Convert the MotionSense device-motion dump to the CSV format, then optionally train and evaluate.

Expects the public layout: ``A_DeviceMotion_data/<act>_<trial>/sub_<n>.csv`` plus
``data_subjects_info.csv``. Only the four locomotion activities are kept.

    python scripts/motionsense.py convert ~/motionsense data/motionsense
    FEDANON_MOTIONSENSE=data/motionsense pytest tests/test_acceptance.py -k criterion_10 -s
"""

import argparse
import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from fedanon.data import DatasetSchema, PrivateAttribute, RawRecording, load_population, write_recording
from fedanon.experiment import PlantedConfig, evaluate, population_from_recordings, train_anonymizer, train_classifiers

ACTIVITIES = ("dws", "ups", "wlk", "jog")
AXES = ["userAcceleration.x", "userAcceleration.y", "userAcceleration.z",
        "rotationRate.x", "rotationRate.y", "rotationRate.z"]
SCHEMA = DatasetSchema(6, 128, 10, len(ACTIVITIES), (PrivateAttribute("gender", 2),), magnitude_mode=True)


def read_subjects(path: Path) -> dict[int, int]:
    with path.open() as f:
        return {int(float(r["code"])): int(float(r["gender"])) for r in csv.DictReader(f)}


def read_trial(path: Path) -> np.ndarray:
    with path.open() as f:
        rows = list(csv.DictReader(f))
    return np.array([[float(r[a]) for a in AXES] for r in rows]).T


def convert(src: Path, dst: Path) -> None:
    gender = read_subjects(src / "data_subjects_info.csv")
    parts = defaultdict(list)
    for trial in sorted((src / "A_DeviceMotion_data").iterdir()):
        act = trial.name.split("_")[0]
        if act not in ACTIVITIES:
            continue
        for f in sorted(trial.glob("sub_*.csv")):
            sub = int(f.stem.split("_")[1])
            parts[sub].append((read_trial(f), ACTIVITIES.index(act)))
    dst.mkdir(parents=True, exist_ok=True)
    SCHEMA.save(dst / "schema.json")
    for sub, trials in sorted(parts.items()):
        data = np.concatenate([d for d, _ in trials], axis=1)
        public = np.concatenate([np.full(d.shape[1], a) for d, a in trials])
        private = np.full((data.shape[1], 1), gender[sub])
        write_recording(RawRecording(f"sub{sub:02d}", data, public, private), dst / f"sub{sub:02d}.csv")
    print(f"wrote {len(parts)} subjects to {dst}")


def reproduce(data: Path, seed: int) -> None:
    schema = DatasetSchema.load(data / "schema.json")
    pop = population_from_recordings(load_population(data, schema), schema, seed)
    cfg = PlantedConfig(seed=seed, schema=schema, n_clients=len(set(pop.train.client.tolist())))
    clf = train_classifiers(pop, cfg)
    ev = evaluate(train_anonymizer(pop, cfg).model, pop.test, clf, seed)
    print(f"raw: activity {clf.raw['desired']:.4f}, gender {clf.raw['intrusive'][0]:.4f}")
    print(f"anonymized: activity {ev['desired']:.4f}, gender {ev['intrusive'][0]:.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("convert")
    c.add_argument("src", type=Path)
    c.add_argument("dst", type=Path)
    r = sub.add_parser("run")
    r.add_argument("data", type=Path)
    r.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    if args.cmd == "convert":
        convert(args.src, args.dst)
    else:
        reproduce(args.data, args.seed)


if __name__ == "__main__":
    main()
