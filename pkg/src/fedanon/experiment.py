"""End-to-end planted-signal experiments: data, classifiers, federated training, scoring."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .anonymizer import Anonymizer, LossWeights, ModelConfig
from .data import (ChannelStats, DatasetSchema, PrivateAttribute, RawRecording, SegmentSet, SignalSpec, apply_skew,
                   generate_synthetic_population, rebalance_public, segment_population, split_population,
                   standardize, train_test_split)
from .evaluation import CNNConfig, InferenceModel, evaluate_anonymizer, mean_mi, score, train_inference_cnn
from .federated import FedConfig, RoundRecord, personalize, run_training
from .rng import stream

log = logging.getLogger(__name__)


def planted_schema(private_attributes: Sequence[tuple[str, int]] = (("gender", 2),)) -> DatasetSchema:
    """Two channels, 32-sample windows, stride 16, four public classes."""
    return DatasetSchema(2, 32, 16, 4, tuple(PrivateAttribute(n, k) for n, k in private_attributes))


@dataclass
class PlantedConfig:
    n_clients: int = 12
    schema: DatasetSchema = field(default_factory=planted_schema)
    signal: SignalSpec = field(default_factory=SignalSpec)
    fed: FedConfig = field(default_factory=lambda: FedConfig(meta_lr=0.2, local_lr=0.2))
    weights: LossWeights = field(default_factory=LossWeights)
    latent_dim: int = 25
    imbalance_ratio: float = 1.0
    participation: float = 1.0
    rebalance: bool | None = None  # None: rebalance for meta training only
    cnn: CNNConfig = field(default_factory=CNNConfig)
    seed: int = 0

    def model_config(self) -> ModelConfig:
        s = self.schema
        return ModelConfig(s.model_channels, s.window, s.public_classes, s.private_classes, self.latent_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        return d


@dataclass
class Population:
    schema: DatasetSchema
    train: SegmentSet  # standardized, unskewed
    test: SegmentSet
    stats: ChannelStats
    participants: list[str]
    unseen: list[str]


def population_from_recordings(recordings: Sequence[RawRecording], schema: DatasetSchema, seed: int,
                               participation: float = 1.0) -> Population:
    """Segment, split per client, standardize with train-split statistics, pick participants."""
    segs = segment_population(recordings, schema)
    train, test = train_test_split(segs, stream(seed, "split"))
    stats = ChannelStats.fit(train, schema.model_channels)
    clients = sorted(set(segs.client.tolist()))
    participants, unseen = split_population(clients, participation, stream(seed, "participation"))
    return Population(schema, standardize(train, stats), standardize(test, stats), stats, participants, unseen)


def build_population(cfg: PlantedConfig) -> Population:
    recs = generate_synthetic_population(cfg.n_clients, cfg.schema, cfg.signal, stream(cfg.seed, "data"))
    return population_from_recordings(recs, cfg.schema, cfg.seed, cfg.participation)


@dataclass
class Classifiers:
    desired: InferenceModel
    intrusive: list[InferenceModel]
    raw: dict


def train_classifiers(pop: Population, cfg: PlantedConfig) -> Classifiers:
    """Desired and intrusive CNNs on the raw training split of every client."""
    ch = pop.schema.model_channels
    desired = train_inference_cnn(pop.train, "public", pop.schema.public_classes, ch, seed=cfg.seed, config=cfg.cnn)
    intrusive = [train_inference_cnn(pop.train, j, n, ch, seed=cfg.seed, config=cfg.cnn)
                 for j, n in enumerate(pop.schema.private_classes)]
    raw = {"desired": score(desired, pop.test).accuracy, "intrusive": [score(m, pop.test).accuracy for m in intrusive]}
    return Classifiers(desired, intrusive, raw)


def federated_clients(pop: Population, cfg: PlantedConfig) -> dict[str, SegmentSet]:
    """Participants' training data after optional skew and rebalancing."""
    rebalance = cfg.rebalance if cfg.rebalance is not None else cfg.fed.aggregation == "meta_fedsgd"
    out = {}
    for cid, seg in pop.train.by_client().items():
        if cid not in pop.participants:
            continue
        if cfg.imbalance_ratio > 1:
            seg = apply_skew(seg, cfg.imbalance_ratio, stream(cfg.seed, "skew", cid))
        if rebalance:
            seg = rebalance_public(seg, stream(cfg.seed, "rebalance", cid))
        out[cid] = seg
    return out


@dataclass
class TrainResult:
    model: Anonymizer
    records: list[RoundRecord]
    snapshots: list[tuple[int, Anonymizer]]
    seconds: float


def train_anonymizer(pop: Population, cfg: PlantedConfig, keep_snapshots: bool = False) -> TrainResult:
    model = Anonymizer(cfg.model_config(), cfg.weights, seed=int(stream(cfg.seed, "init").integers(2 ** 31)))
    snaps: list[tuple[int, Anonymizer]] = []

    def on_epoch(epoch, m, records):
        if keep_snapshots:
            snaps.append((epoch, m.clone()))

    t0 = time.perf_counter()
    fed = replace(cfg.fed, seed=cfg.seed)
    model, records = run_training(fed, federated_clients(pop, cfg), model, on_epoch=on_epoch)
    return TrainResult(model, records, snaps, time.perf_counter() - t0)


def evaluate(model: Anonymizer, test: SegmentSet, clf: Classifiers, seed: int, mi: bool = False) -> dict:
    return evaluate_anonymizer(model, test, clf.desired, clf.intrusive, seed=seed, mi=mi)


def raw_mi(pop: Population, seed: int = 0) -> dict:
    return {"mi_public": mean_mi(pop.test.x, pop.test.public, seed=seed),
            "mi_private": [mean_mi(pop.test.x, pop.test.private[:, j], seed=seed)
                           for j in range(pop.test.private.shape[1])]}


def per_client_scores(model: Anonymizer, test: SegmentSet, clf: Classifiers, clients: Sequence[str],
                      seed: int) -> dict[str, dict]:
    out = {}
    for cid in clients:
        part = test[test.client == cid]
        out[cid] = evaluate(model, part, clf, seed)
    return out


def adaptation_set(pop: Population, client: str, fraction: float, seed: int) -> SegmentSet:
    """A random ``fraction`` of the client's training split."""
    if not 0 < fraction < 0.05:
        raise ValueError("adaptation fraction must be in (0, 0.05)")
    seg = pop.train[pop.train.client == client]
    n = max(1, int(fraction * len(seg)))
    idx = np.sort(stream(seed, "adapt-sample", client).choice(len(seg), size=n, replace=False))
    return seg[idx]


def adapt_clients(model: Anonymizer, pop: Population, clf: Classifiers, clients: Sequence[str], cfg: PlantedConfig,
                  fraction: float = 0.04, iterations: int = 80, rehearsal: int = 3) -> dict[str, dict]:
    """Per-client before/after scores for local personalization."""
    out = {}
    for cid in clients:
        test = pop.test[pop.test.client == cid]
        before = evaluate(model, test, clf, cfg.seed)
        local = personalize(model, adaptation_set(pop, cid, fraction, cfg.seed), iterations, cfg.fed.local_lr,
                            seed=cfg.seed, batch=cfg.fed.batch, shadow=cfg.fed.shadow, rehearsal=rehearsal)
        out[cid] = {"before": before, "after": evaluate(local, test, clf, cfg.seed)}
    return out
