"""Command-line driver.

    fedanon synth     --config exp.ini            write a planted CSV population
    fedanon prepare   --config exp.ini            segment, split and cache arrays
    fedanon train     --config exp.ini            federated training -> model bundle + round log
    fedanon anonymize --config exp.ini --client client000
    fedanon eval      --config exp.ini            JSON report for raw and anonymized test data
    fedanon adapt     --config exp.ini --client client000
    fedanon curve     --config exp.ini            privacy/utility per epoch snapshot

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .anonymizer import Anonymizer, anonymize, load_bundle, read_bundle_descriptor, save_bundle
from .config import ExperimentConfig, parse_attributes
from .data import (ChannelStats, DatasetSchema, destandardize, generate_synthetic_population, load_population,
                   read_recording, segment, standardize, write_recording)
from .errors import ClientNotFound, ConfigError, FedAnonError, MissingBundle, NonFiniteActivation, NonFiniteLoss
from .evaluation import (load_inference_model, mean_mi, privacy_utility_curve, save_inference_model, score,
                         train_inference_cnn, write_curve)
from .experiment import (Classifiers, Population, adaptation_set, evaluate, federated_clients,
                         population_from_recordings)
from .federated import Channel, personalize, run_training, write_round_log
from .rng import stream

log = logging.getLogger("fedanon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
AGGREGATION_FLAGS = {"meta": "meta_fedsgd", "fedavg": "fedavg"}


# -- config assembly ----------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (if any) with command-line flags applied on top."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.override(
        experiment__seed=args.seed, experiment__out=args.out, experiment__data_dir=args.data_dir,
        federated__aggregation=AGGREGATION_FLAGS.get(args.aggregation) if args.aggregation else None,
        federated__epochs=args.epochs, heterogeneity__imbalance_ratio=args.rd, heterogeneity__participation=args.ru,
        adapt__iterations=getattr(args, "iterations", None), adapt__fraction=getattr(args, "fraction", None),
        adapt__rehearsal=getattr(args, "rehearsal", None),
        synth__n_clients=getattr(args, "clients", None), synth__segments_per_client=getattr(args, "segments", None),
    )
    if args.multi_attr:
        parse_attributes(args.multi_attr)
        cfg = cfg.override(experiment__attributes=args.multi_attr, synth__private_attributes=args.multi_attr)
    if args.batch is not None:
        fed = cfg.fed_config()
        try:
            fed = fed.with_batch(args.batch)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cfg.override(federated__support_size=fed.support_size, federated__query_size=fed.query_size)
    cfg.validate()
    return cfg


# -- shared helpers -------------------------------------------------------------

def load_schema(cfg: ExperimentConfig) -> DatasetSchema:
    if not cfg.schema_path.exists():
        raise FileNotFoundError(f"schema not found: {cfg.schema_path} (run `fedanon synth` or set experiment.schema)")
    return DatasetSchema.load(cfg.schema_path)


def restrict_attributes(schema: DatasetSchema, recordings, names: Sequence[str]):
    if not names:
        return schema, recordings
    idx = [schema.attribute_index(n) for n in names]
    return schema.select_attributes(names), [replace(r, private=r.private[:, idx]) for r in recordings]


def load_experiment_population(cfg: ExperimentConfig) -> Population:
    schema = load_schema(cfg)
    recs = load_population(cfg.data_dir, schema)
    if not recs:
        raise FileNotFoundError(f"no client CSV files in {cfg.data_dir}")
    schema, recs = restrict_attributes(schema, recs, cfg.attribute_names())
    return population_from_recordings(recs, schema, cfg.seed, cfg.heterogeneity.participation)


def classifiers(cfg: ExperimentConfig, pop: Population) -> Classifiers:
    """Raw-data inference CNNs, trained once and cached under ``<out>/classifiers``."""
    cache = cfg.out / "classifiers"
    cache.mkdir(parents=True, exist_ok=True)
    ch = pop.schema.model_channels

    def get(name: str, target, n_classes: int):
        path = cache / f"{name}.cnn"
        if path.exists():
            return load_inference_model(path)
        log.info("training %s classifier", name)
        m = train_inference_cnn(pop.train, target, n_classes, ch, seed=cfg.seed, config=cfg.cnn_config())
        save_inference_model(m, path)
        return m

    desired = get("desired", "public", pop.schema.public_classes)
    intrusive = [get(f"intrusive_{a.name}", j, a.n_classes) for j, a in enumerate(pop.schema.private_attributes)]
    raw = {"desired": score(desired, pop.test).accuracy, "intrusive": [score(m, pop.test).accuracy for m in intrusive]}
    return Classifiers(desired, intrusive, raw)


def bundle_path(cfg: ExperimentConfig, args) -> Path:
    return Path(args.bundle) if getattr(args, "bundle", None) else cfg.out / "model.bundle"


def open_bundle(path: Path) -> tuple[Anonymizer, dict]:
    if not path.exists():
        raise MissingBundle(f"model bundle not found: {path} (run `fedanon train` first)")
    data = path.read_bytes()
    return load_bundle(data), read_bundle_descriptor(data).get("extra", {})


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args) -> int:
    schema = cfg.synth_schema()
    spec = cfg.signal_spec()
    recs = generate_synthetic_population(cfg.synth.n_clients, schema, spec, stream(cfg.seed, "data"))
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    schema.save(cfg.data_dir / "schema.json")
    for rec in recs:
        write_recording(rec, cfg.data_dir / f"{rec.client_id}.csv")
    print(f"wrote {len(recs)} client recordings and schema.json to {cfg.data_dir}")
    return EXIT_OK


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    pop = load_experiment_population(cfg)
    out = cfg.out / "prepared"
    out.mkdir(parents=True, exist_ok=True)
    for split, seg in (("train", pop.train), ("test", pop.test)):
        np.save(out / f"{split}_x.npy", seg.x)
        np.save(out / f"{split}_public.npy", seg.public)
        np.save(out / f"{split}_private.npy", seg.private)
        np.save(out / f"{split}_client.npy", seg.client.astype(str))
    summary = {
        "schema": pop.schema.to_dict(), "stats": pop.stats.to_dict(), "participants": pop.participants,
        "unseen": pop.unseen, "train_segments": len(pop.train), "test_segments": len(pop.test),
        "per_client": {cid: len(seg) for cid, seg in sorted(pop.train.by_client().items())},
    }
    write_json(out / "summary.json", summary)
    print(f"{len(pop.train)} train / {len(pop.test)} test segments from {len(summary['per_client'])} clients -> {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    pop = load_experiment_population(cfg)
    rc = cfg.run_config(pop.schema)
    model = Anonymizer(rc.model_config(), rc.weights, seed=int(stream(cfg.seed, "init").integers(2 ** 31)))
    extra = {"schema": pop.schema.to_dict(), "stats": pop.stats.to_dict(), "config": cfg.to_dict(),
             "participants": pop.participants}
    snaps = cfg.out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    for old in snaps.glob("epoch_*.bundle"):
        old.unlink()

    def on_epoch(epoch, m, records):
        save_bundle(m, snaps / f"epoch_{epoch:03d}.bundle", extra={**extra, "epoch": epoch})

    channel = Channel()
    model, records = run_training(cfg.fed_config(), federated_clients(pop, rc), model, channel, on_epoch)
    save_bundle(model, cfg.out / "model.bundle", extra=extra)
    write_round_log(records, cfg.out / "round_log.csv")
    (cfg.out / "config.ini").write_text(cfg.to_ini())
    last = records[-1] if records else None
    summary = f"; last round vae={last.mean('vae'):.4f} disc={last.mean('disc'):.4f}" if last else ""
    print(f"trained {len(records)} rounds, {channel.sent} client messages{summary}")
    print(f"bundle: {cfg.out / 'model.bundle'}")
    return EXIT_OK


def cmd_anonymize(cfg: ExperimentConfig, args) -> int:
    model, extra = open_bundle(bundle_path(cfg, args))
    pop = load_experiment_population(cfg)
    schema = pop.schema
    stats = ChannelStats.from_dict(extra["stats"]) if "stats" in extra else pop.stats
    if args.input:
        full = load_schema(cfg)
        rec = read_recording(args.input, full)
        schema, (rec,) = restrict_attributes(full, [rec], cfg.attribute_names())
        name = Path(args.input).stem
    else:
        path = cfg.data_dir / f"{args.client}.csv"
        if not path.exists():
            raise ClientNotFound(args.client)
        full = load_schema(cfg)
        schema, (rec,) = restrict_attributes(full, [read_recording(path, full)], cfg.attribute_names())
        name = args.client
    seg = standardize(segment(rec, schema), stats)
    clf = classifiers(cfg, pop)
    anon, drawn = anonymize(model, seg.x, clf.desired, stream(cfg.seed, "anonymize", name), return_labels=True)
    public = clf.desired(seg.x)
    values = destandardize(anon, stats)
    cfg.out.mkdir(parents=True, exist_ok=True)
    out = cfg.out / f"anonymized_{name}.csv"
    c, w = schema.model_channels, schema.window
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["segment", "public"] + [f"{a.name}_drawn" for a in schema.private_attributes]
                    + [f"ch{i}_t{t}" for i in range(c) for t in range(w)])
        for i in range(len(values)):
            wr.writerow([int(seg.ids[i]), int(public[i])] + [int(v) for v in drawn[i]]
                        + [f"{v:.6g}" for v in values[i]])
    print(f"anonymized {len(values)} segments -> {out}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    model, extra = open_bundle(bundle_path(cfg, args))
    pop = load_experiment_population(cfg)
    clf = classifiers(cfg, pop)
    anon = pop.test.with_x(anonymize(model, pop.test.x, clf.desired, stream(cfg.seed, "anonymize")))
    echo = cfg.to_dict()
    names = [a.name for a in pop.schema.private_attributes]
    k = cfg.evaluation.mi_components
    report = {
        "config": echo,
        "raw": {"desired": score(clf.desired, pop.test, config=echo).to_dict(),
                "intrusive": {n: score(m, pop.test, config=echo).to_dict() for n, m in zip(names, clf.intrusive)}},
        "anonymized": {"desired": score(clf.desired, anon, config=echo).to_dict(),
                       "intrusive": {n: score(m, anon, config=echo).to_dict() for n, m in zip(names, clf.intrusive)}},
        "mi": {
            "raw": {"public": mean_mi(pop.test.x, pop.test.public, k, cfg.seed),
                    "private": {n: mean_mi(pop.test.x, pop.test.private[:, j], k, cfg.seed)
                                for j, n in enumerate(names)}},
            "anonymized": {"public": mean_mi(anon.x, anon.public, k, cfg.seed),
                           "private": {n: mean_mi(anon.x, anon.private[:, j], k, cfg.seed)
                                       for j, n in enumerate(names)}},
        },
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "report.json", report)
    with (cfg.out / "per_client.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["client", "participant", "desired_acc"] + [f"intrusive_{n}_acc" for n in names])
        for cid, part in sorted(anon.by_client().items()):
            wr.writerow([cid, int(cid in pop.participants), f"{score(clf.desired, part).accuracy:.6f}"]
                        + [f"{score(m, part).accuracy:.6f}" for m in clf.intrusive])
    a = report["anonymized"]
    print(f"desired accuracy  raw {report['raw']['desired']['accuracy']:.4f}  "
          f"anonymized {a['desired']['accuracy']:.4f}")
    for n in names:
        print(f"intrusive[{n}]  raw {report['raw']['intrusive'][n]['accuracy']:.4f}  "
              f"anonymized {a['intrusive'][n]['accuracy']:.4f}")
    print(f"report: {cfg.out / 'report.json'}")
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig, args) -> int:
    path = bundle_path(cfg, args)
    model, extra = open_bundle(path)
    pop = load_experiment_population(cfg)
    if args.client not in set(pop.train.client.tolist()):
        raise ClientNotFound(args.client)
    clf = classifiers(cfg, pop)
    test = pop.test[pop.test.client == args.client]
    adapt_set = adaptation_set(pop, args.client, cfg.adapt.fraction, cfg.seed)
    before = evaluate(model, test, clf, cfg.seed)
    local = personalize(model, adapt_set, cfg.adapt.iterations, cfg.federated.local_lr, seed=cfg.seed,
                        batch=cfg.fed_config().batch, shadow=cfg.federated.shadow, rehearsal=cfg.adapt.rehearsal)
    after = evaluate(local, test, clf, cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    out = cfg.out / f"adapted_{args.client}.bundle"
    save_bundle(local, out, extra={**extra, "adapted_client": args.client, "adaptation_segments": len(adapt_set)})
    print(f"{args.client}: {len(adapt_set)} adaptation segments, {cfg.adapt.iterations} iterations")
    print(f"  desired   before {before['desired']:.4f}  after {after['desired']:.4f}")
    for a, b0, b1 in zip(pop.schema.private_attributes, before["intrusive"], after["intrusive"]):
        print(f"  intrusive[{a.name}]  before {b0:.4f}  after {b1:.4f}")
    print(f"bundle: {out}")
    return EXIT_OK


def cmd_curve(cfg: ExperimentConfig, args) -> int:
    snap_dir = Path(args.snapshots) if args.snapshots else cfg.out / "snapshots"
    files = sorted(snap_dir.glob("epoch_*.bundle"))
    if not files:
        raise MissingBundle(f"no epoch snapshots in {snap_dir}")
    snaps = [(int(f.stem.split("_")[1]), load_bundle(f)) for f in files]
    pop = load_experiment_population(cfg)
    clf = classifiers(cfg, pop)
    for a, m in zip(pop.schema.private_attributes, clf.intrusive):
        rows = privacy_utility_curve(snaps, pop.test, clf.desired, m, cfg.seed, cfg.evaluation.mi_components)
        out = cfg.out / f"curve_{a.name}.csv"
        write_curve(rows, out)
        print(f"{len(rows)} epochs -> {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "anonymize": cmd_anonymize,
            "eval": cmd_eval, "adapt": cmd_adapt, "curve": cmd_curve}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="root seed (required here or in the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", help="directory of client CSV files and schema.json")
    common.add_argument("--aggregation", choices=sorted(AGGREGATION_FLAGS))
    common.add_argument("--rd", type=float, help="majority/minority public-class ratio per client")
    common.add_argument("--ru", type=float, help="fraction of clients that take part in training")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int, help="support + query batch size")
    common.add_argument("--multi-attr", help="private attributes, e.g. gender,weight")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedanon", description="Federated conditional-VAE sensor-data anonymizer.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a planted-signal CSV population")
    s.add_argument("--clients", type=int)
    s.add_argument("--segments", type=int, help="segments per client")
    sub.add_parser("prepare", parents=[common], help="segment, split and cache arrays")
    sub.add_parser("train", parents=[common], help="federated training")
    s = sub.add_parser("anonymize", parents=[common], help="anonymize one client's recording")
    s.add_argument("--bundle")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--client")
    g.add_argument("--input", help="CSV recording in the schema's format")
    s = sub.add_parser("eval", parents=[common], help="score raw and anonymized test data")
    s.add_argument("--bundle")
    s = sub.add_parser("adapt", parents=[common], help="personalize the model for one client")
    s.add_argument("--bundle")
    s.add_argument("--client", required=True)
    s.add_argument("--iterations", type=int, default=None, help="local iterations (default 80)")
    s.add_argument("--fraction", type=float, default=None, help="share of the client's data used, < 0.05")
    s.add_argument("--rehearsal", type=int, default=None, help="counterfactual copies per batch (0 disables)")
    s = sub.add_parser("curve", parents=[common], help="privacy/utility per epoch snapshot")
    s.add_argument("--snapshots", help="directory of epoch_*.bundle files")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "fraction", None) is not None and not 0 < args.fraction < 0.05:
        parser.error("--fraction must be in (0, 0.05)")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteActivation, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClientNotFound as exc:
        print(f"data error: client {exc.args[0]!r} not found", file=sys.stderr)
        return EXIT_DATA
    except (FedAnonError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
