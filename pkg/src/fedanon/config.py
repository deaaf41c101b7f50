"""Experiment configuration: INI files with typed sections, overridable from the command line.

Example::

    [experiment]
    seed = 0
    data_dir = data
    out = runs/planted

    [federated]
    aggregation = meta_fedsgd
    epochs = 5

Every key is optional except ``experiment.seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .anonymizer import LossWeights
from .data import DatasetSchema, PrivateAttribute, SignalSpec
from .errors import ConfigError
from .evaluation import CNNConfig
from .experiment import PlantedConfig, planted_schema
from .federated import AGGREGATIONS, FedConfig


@dataclass
class ExperimentSection:
    seed: int | None = None
    data_dir: str = "data"
    schema: str = ""  # empty: <data_dir>/schema.json
    out: str = "runs/default"
    attributes: str = ""  # private attributes to protect; empty: all in the schema


@dataclass
class SynthSection:
    n_clients: int = 12
    segments_per_client: int = 1500
    private_attributes: str = "gender:2"


@dataclass
class FederatedSection:
    aggregation: str = "meta_fedsgd"
    selection_fraction: float = 0.4
    meta_lr: float = 0.2
    local_lr: float = 0.2
    support_size: int = 1
    query_size: int = 15
    epochs: int = 5
    local_steps_per_round: int = 1
    fedavg_local_rounds: int = 5
    shadow: bool = True
    meta_order: str = "first"


@dataclass
class LossSection:
    alpha: float = 0.9
    beta: float = 2.0
    gamma: float = 0.2
    latent_dim: int = 25


@dataclass
class HeterogeneitySection:
    imbalance_ratio: float = 1.0
    participation: float = 1.0
    rebalance: str = "auto"  # auto | yes | no


@dataclass
class EvaluationSection:
    cnn_epochs: int = 50
    mi_components: int = 25


@dataclass
class AdaptSection:
    fraction: float = 0.04
    iterations: int = 80
    rehearsal: int = 3


SECTIONS = {
    "experiment": ExperimentSection, "synth": SynthSection, "federated": FederatedSection, "loss": LossSection,
    "heterogeneity": HeterogeneitySection, "evaluation": EvaluationSection, "adapt": AdaptSection,
}


def _convert(raw: str, typ: Any, where: str):
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if "bool" in t:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in t and "float" not in t:
            if raw.strip().lower() in ("", "none") and "None" in t:
                return None
            return int(raw)
        if "float" in t:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {t}") from None
    return raw.strip()


def parse_attributes(spec: str) -> tuple[PrivateAttribute, ...]:
    """``"gender:2,weight:2"`` -> attributes; a bare name means two classes."""
    out = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, _, n = item.partition(":")
        try:
            k = int(n) if n else 2
        except ValueError:
            raise ConfigError(f"bad private attribute {item!r}: class count must be an integer") from None
        if k < 2:
            raise ConfigError(f"bad private attribute {item!r}: need at least 2 classes")
        out.append(PrivateAttribute(name, k))
    if not out:
        raise ConfigError("at least one private attribute is required")
    return tuple(out)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    synth: SynthSection = field(default_factory=SynthSection)
    federated: FederatedSection = field(default_factory=FederatedSection)
    loss: LossSection = field(default_factory=LossSection)
    heterogeneity: HeterogeneitySection = field(default_factory=HeterogeneitySection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{name}]")
            section = getattr(cfg, name)
            known = {f.name: f.type for f in fields(section)}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                setattr(section, key, _convert(raw, known[key], f"{source} [{name}] {key}"))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_ini(text, str(path))

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            parser[name] = {k: ("" if v is None else str(v).lower() if isinstance(v, bool) else str(v))
                            for k, v in asdict(getattr(self, name)).items()}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, **values) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides; ``None`` values are ignored."""
        new = dataclasses.replace(self, **{n: dataclasses.replace(getattr(self, n)) for n in SECTIONS})
        for flat, value in values.items():
            if value is None:
                continue
            name, _, key = flat.partition("__")
            section = getattr(new, name, None)
            if section is None or key not in {f.name for f in fields(section)}:
                raise ConfigError(f"unknown override {flat!r}")
            setattr(section, key, value)
        return new

    def validate(self) -> None:
        if self.experiment.seed is None:
            raise ConfigError("experiment.seed is required")
        if self.federated.aggregation not in AGGREGATIONS:
            raise ConfigError(f"federated.aggregation must be one of {AGGREGATIONS}")
        if self.heterogeneity.rebalance not in ("auto", "yes", "no"):
            raise ConfigError("heterogeneity.rebalance must be auto, yes or no")
        if not 0 < self.heterogeneity.participation <= 1:
            raise ConfigError("heterogeneity.participation must be in (0, 1]")
        if self.heterogeneity.imbalance_ratio < 1:
            raise ConfigError("heterogeneity.imbalance_ratio must be >= 1")
        if not 0 < self.adapt.fraction < 0.05:
            raise ConfigError("adapt.fraction must be in (0, 0.05)")
        try:
            self.fed_config().validate()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects ----------------------------------------------------

    @property
    def seed(self) -> int:
        if self.experiment.seed is None:
            raise ConfigError("experiment.seed is required")
        return int(self.experiment.seed)

    @property
    def out(self) -> Path:
        return Path(self.experiment.out)

    @property
    def data_dir(self) -> Path:
        return Path(self.experiment.data_dir)

    @property
    def schema_path(self) -> Path:
        return Path(self.experiment.schema) if self.experiment.schema else self.data_dir / "schema.json"

    def fed_config(self) -> FedConfig:
        f = self.federated
        return FedConfig(selection_fraction=f.selection_fraction, meta_lr=f.meta_lr, local_lr=f.local_lr,
                         support_size=f.support_size, query_size=f.query_size, epochs=f.epochs,
                         local_steps_per_round=f.local_steps_per_round, aggregation=f.aggregation,
                         fedavg_local_rounds=f.fedavg_local_rounds, shadow=f.shadow, meta_order=f.meta_order,
                         seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.alpha, self.loss.beta, self.loss.gamma)

    def cnn_config(self) -> CNNConfig:
        return CNNConfig(epochs=self.evaluation.cnn_epochs)

    def synth_schema(self) -> DatasetSchema:
        attrs = parse_attributes(self.synth.private_attributes)
        return planted_schema(tuple((a.name, a.n_classes) for a in attrs))

    def signal_spec(self) -> SignalSpec:
        return SignalSpec(segments_per_client=self.synth.segments_per_client)

    def rebalance(self) -> bool | None:
        return {"auto": None, "yes": True, "no": False}[self.heterogeneity.rebalance]

    def attribute_names(self) -> list[str]:
        return [a.name for a in parse_attributes(self.experiment.attributes)] if self.experiment.attributes else []

    def run_config(self, schema: DatasetSchema) -> PlantedConfig:
        """The experiment-runner view of this config for a given dataset schema."""
        h = self.heterogeneity
        return PlantedConfig(n_clients=self.synth.n_clients, schema=schema, signal=self.signal_spec(),
                             fed=self.fed_config(), weights=self.loss_weights(), latent_dim=self.loss.latent_dim,
                             imbalance_ratio=h.imbalance_ratio, participation=h.participation,
                             rebalance=self.rebalance(), cnn=self.cnn_config(), seed=self.seed)
