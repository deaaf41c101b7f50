"""Dataset ingestion, windowing, rebalancing and the planted-signal generator.

Segments are stored channel-major: a window of ``C`` channels and ``W``
samples becomes a flat vector ``[ch0[0..W), ch1[0..W), ...]``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (AxisCount, InvalidRatio, InvalidSpec, RecordingTooShort, SchemaError, ZeroVariance)

log = logging.getLogger(__name__)


# -- schema -----------------------------------------------------------------

@dataclass(frozen=True)
class PrivateAttribute:
    name: str
    n_classes: int


@dataclass(frozen=True)
class DatasetSchema:
    channels: int
    window: int
    stride: int
    public_classes: int
    private_attributes: tuple[PrivateAttribute, ...]
    magnitude_mode: bool = False

    def __post_init__(self):
        attrs = tuple(a if isinstance(a, PrivateAttribute) else PrivateAttribute(**a) for a in self.private_attributes)
        object.__setattr__(self, "private_attributes", attrs)
        self.validate()

    def validate(self) -> None:
        for name in ("channels", "window", "stride", "public_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise SchemaError(f"field {name!r}: expected a positive integer, got {v!r}")
        if self.public_classes < 2:
            raise SchemaError("field 'public_classes': need at least 2 classes")
        if not self.private_attributes:
            raise SchemaError("field 'private_attributes': at least one private attribute is required")
        names = [a.name for a in self.private_attributes]
        if len(set(names)) != len(names):
            raise SchemaError("field 'private_attributes': duplicate attribute names")
        for i, a in enumerate(self.private_attributes):
            if not isinstance(a.n_classes, int) or a.n_classes < 2:
                raise SchemaError(f"field 'private_attributes[{i}].n_classes': need at least 2 classes, "
                                  f"got {a.n_classes!r}")
        if self.magnitude_mode and self.channels % 3:
            raise SchemaError("field 'magnitude_mode': raw channel count must be a multiple of 3")

    @property
    def model_channels(self) -> int:
        """Channels after optional per-sensor magnitude."""
        return self.channels // 3 if self.magnitude_mode else self.channels

    @property
    def segment_length(self) -> int:
        return self.model_channels * self.window

    @property
    def private_classes(self) -> tuple[int, ...]:
        return tuple(a.n_classes for a in self.private_attributes)

    def attribute_index(self, name: str) -> int:
        for i, a in enumerate(self.private_attributes):
            if a.name == name:
                return i
        raise SchemaError(f"unknown private attribute {name!r}")

    def select_attributes(self, names: Sequence[str]) -> "DatasetSchema":
        attrs = tuple(self.private_attributes[self.attribute_index(n)] for n in names)
        return DatasetSchema(self.channels, self.window, self.stride, self.public_classes, attrs, self.magnitude_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["private_attributes"] = [asdict(a) for a in self.private_attributes]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, source: str = "<schema>") -> "DatasetSchema":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(d, dict):
            raise SchemaError(f"{source}: top level must be an object")
        required = {"channels", "window", "stride", "public_classes", "private_attributes"}
        missing = required - d.keys()
        if missing:
            raise SchemaError(f"{source}: missing field(s) {sorted(missing)}")
        unknown = d.keys() - required - {"magnitude_mode"}
        if unknown:
            raise SchemaError(f"{source}: unknown field(s) {sorted(unknown)}")
        attrs = d["private_attributes"]
        if not isinstance(attrs, list):
            raise SchemaError(f"{source}: field 'private_attributes' must be a list")
        parsed = []
        for i, a in enumerate(attrs):
            if not isinstance(a, dict) or set(a) != {"name", "n_classes"}:
                raise SchemaError(f"{source}: field 'private_attributes[{i}]' needs exactly 'name' and 'n_classes'")
            parsed.append(PrivateAttribute(str(a["name"]), a["n_classes"]))
        try:
            return cls(d["channels"], d["window"], d["stride"], d["public_classes"], tuple(parsed),
                       bool(d.get("magnitude_mode", False)))
        except SchemaError as exc:
            raise SchemaError(f"{source}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        return cls.from_json(Path(path).read_text(), str(path))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


# -- containers -------------------------------------------------------------

@dataclass
class RawRecording:
    client_id: str
    data: np.ndarray  # (C, L), sensor units
    public: np.ndarray  # (L,)
    private: np.ndarray  # (L, k)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        self.public = np.asarray(self.public, dtype=np.int64).reshape(-1)
        self.private = np.asarray(self.private, dtype=np.int64)
        if self.private.ndim == 1:
            self.private = self.private[:, None]
        n = self.data.shape[1]
        if self.public.shape[0] != n or self.private.shape[0] != n:
            raise ValueError("channel and label lengths differ")

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass
class LabeledSegment:
    x: np.ndarray
    public: int
    private: np.ndarray
    client_id: str


@dataclass
class SegmentSet:
    """Columnar store of labeled segments.

    ``ids`` are unique per original segment (used by leakage audits);
    synthetic rows get negative ids.
    """

    x: np.ndarray
    public: np.ndarray
    private: np.ndarray
    client: np.ndarray
    ids: np.ndarray
    synthetic: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.x)
        x = np.asarray(self.x, dtype=np.float32)
        self.x = x.reshape(n, -1) if n else x.reshape(0, x.shape[-1] if x.ndim > 1 else 0)
        self.public = np.asarray(self.public, dtype=np.int64).reshape(n)
        private = np.asarray(self.private, dtype=np.int64)
        self.private = private.reshape(n, -1) if n else private.reshape(0, private.shape[-1] if private.ndim > 1 else 0)
        self.client = np.asarray(self.client, dtype=object).reshape(n)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)
        self.synthetic = (np.zeros(n, dtype=bool) if self.synthetic is None
                          else np.asarray(self.synthetic, dtype=bool).reshape(n))

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, idx) -> "SegmentSet":
        return SegmentSet(self.x[idx], self.public[idx], self.private[idx], self.client[idx], self.ids[idx],
                          self.synthetic[idx])

    def __iter__(self) -> Iterator[LabeledSegment]:
        for i in range(len(self)):
            yield LabeledSegment(self.x[i], int(self.public[i]), self.private[i], str(self.client[i]))

    @classmethod
    def empty(cls, length: int, k: int) -> "SegmentSet":
        return cls(np.zeros((0, length)), np.zeros(0), np.zeros((0, k)), np.zeros(0, dtype=object), np.zeros(0))

    @classmethod
    def concat(cls, parts: Sequence["SegmentSet"]) -> "SegmentSet":
        parts = list(parts)
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.public for p in parts]),
                   np.concatenate([p.private for p in parts]), np.concatenate([p.client for p in parts]),
                   np.concatenate([p.ids for p in parts]), np.concatenate([p.synthetic for p in parts]))

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.public, minlength=n_classes)

    def with_x(self, x: np.ndarray) -> "SegmentSet":
        return SegmentSet(x, self.public, self.private, self.client, self.ids, self.synthetic)

    def by_client(self) -> dict[str, "SegmentSet"]:
        return {c: self[self.client == c] for c in sorted(set(self.client.tolist()))}


# -- segmentation and scaling -----------------------------------------------

def segment(recording: RawRecording, schema: DatasetSchema, id_offset: int = 0) -> SegmentSet:
    """Sliding windows over each contiguous run of constant labels."""
    w, s = schema.window, schema.stride
    if recording.length < w:
        raise RecordingTooShort(f"{recording.client_id}: {recording.length} samples < window {w}")
    data = magnitude_groups(recording.data) if schema.magnitude_mode else recording.data
    if data.shape[0] != schema.model_channels:
        raise ValueError(f"recording has {data.shape[0]} channels, schema expects {schema.model_channels}")
    labels = np.column_stack([recording.public, recording.private])
    change = np.flatnonzero(np.any(labels[1:] != labels[:-1], axis=1)) + 1
    bounds = np.concatenate([[0], change, [recording.length]])
    xs, pubs, privs = [], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        run = b - a
        if run < w:
            log.debug("%s: skipping labeled run of %d samples", recording.client_id, run)
            continue
        n = (run - w) // s + 1
        starts = a + s * np.arange(n)
        idx = starts[:, None] + np.arange(w)[None, :]
        # (n, C, W) -> channel-major flat
        xs.append(data[:, idx].transpose(1, 0, 2).reshape(n, -1))
        pubs.append(np.full(n, recording.public[a]))
        privs.append(np.repeat(recording.private[a][None, :], n, axis=0))
    k = recording.private.shape[1]
    if not xs:
        return SegmentSet.empty(schema.segment_length, k)
    x = np.concatenate(xs)
    n = len(x)
    return SegmentSet(x, np.concatenate(pubs), np.concatenate(privs), np.full(n, recording.client_id, dtype=object),
                      id_offset + np.arange(n))


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, segments: SegmentSet, channels: int) -> "ChannelStats":
        v = segments.x.reshape(len(segments), channels, -1).astype(np.float64)
        mean = v.mean(axis=(0, 2))
        std = v.std(axis=(0, 2))
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def standardize(segments: SegmentSet, stats: ChannelStats) -> SegmentSet:
    """Per-channel ``(x - mean) / std`` using stats fitted on the training split only."""
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(~(std > 1e-12)):
        bad = np.flatnonzero(~(std > 1e-12)).tolist()
        raise ZeroVariance(f"channel(s) {bad} have zero variance")
    c = len(std)
    v = segments.x.reshape(len(segments), c, -1).astype(np.float64)
    v = (v - np.asarray(stats.mean)[None, :, None]) / std[None, :, None]
    return segments.with_x(v.reshape(len(segments), -1))


def destandardize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Inverse of :func:`standardize` on a flat channel-major array."""
    c = len(stats.std)
    v = np.asarray(x, dtype=np.float64).reshape(len(x), c, -1)
    v = v * np.asarray(stats.std)[None, :, None] + np.asarray(stats.mean)[None, :, None]
    return v.reshape(len(x), -1)


def magnitude(axes: np.ndarray) -> np.ndarray:
    """Euclidean norm over three axes: ``(3, L) -> (1, L)``."""
    axes = np.asarray(axes, dtype=np.float64)
    if axes.ndim != 2 or axes.shape[0] != 3:
        raise AxisCount(f"magnitude needs exactly 3 axes, got shape {axes.shape}")
    return np.sqrt(np.sum(axes ** 2, axis=0, keepdims=True))


def magnitude_groups(data: np.ndarray) -> np.ndarray:
    """Magnitude of each consecutive 3-axis sensor: ``(3S, L) -> (S, L)``."""
    if data.shape[0] % 3:
        raise AxisCount(f"{data.shape[0]} channels is not a whole number of 3-axis sensors")
    return np.concatenate([magnitude(data[i:i + 3]) for i in range(0, data.shape[0], 3)])


def train_test_split(segments: SegmentSet, rng: np.random.Generator, train_frac: float = 0.8,
                     ) -> tuple[SegmentSet, SegmentSet]:
    """Per-client split stratified by public class."""
    train_idx, test_idx = [], []
    for c in sorted(set(segments.client.tolist())):
        for label in np.unique(segments.public):
            idx = np.flatnonzero((segments.client == c) & (segments.public == label))
            idx = rng.permutation(idx)
            n_train = int(round(train_frac * len(idx)))
            train_idx.append(idx[:n_train])
            test_idx.append(idx[n_train:])
    tr = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, int)
    te = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, int)
    return segments[tr], segments[te]


# -- rebalancing ------------------------------------------------------------

UNDERSAMPLE_RATIO = 10.0
IMBALANCE_TRIGGER = 2.0


_synthetic_counter = iter(range(-1, -(1 << 62), -1))


def smote(x: np.ndarray, n_new: int, k_neighbors: int, rng: np.random.Generator,
          ) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate ``n_new`` points between random seeds and one of their ``k`` nearest same-class neighbours.

    Returns the new points and the index of each one's seed sample.
    """
    n = len(x)
    if n_new <= 0:
        return np.zeros((0, x.shape[1]), dtype=x.dtype), np.zeros(0, dtype=np.int64)
    if n < 2:
        log.warning("only %d sample(s) in class; duplicating with noise instead of SMOTE", n)
        seeds = rng.integers(0, n, size=n_new)
        scale = 0.01 * max(float(np.std(x)), 1.0)
        return (x[seeds] + scale * rng.standard_normal((n_new, x.shape[1]))).astype(x.dtype), seeds
    k = min(k_neighbors, n - 1)
    d = cdist(x, x, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    seeds = rng.integers(0, n, size=n_new)
    picks = nn[seeds, rng.integers(0, k, size=n_new)]
    u = rng.random((n_new, 1))
    new = x[seeds] + u * (x[picks] - x[seeds])
    return new.astype(x.dtype), seeds


def _synthesize(segments: SegmentSet, label: int, n_new: int, k: int, rng) -> SegmentSet:
    cls = segments[(segments.public == label) & ~segments.synthetic]
    new_x, seeds = smote(cls.x, n_new, k, rng)
    ids = np.array([next(_synthetic_counter) for _ in range(n_new)], dtype=np.int64)
    return SegmentSet(new_x, cls.public[seeds], cls.private[seeds], cls.client[seeds], ids, np.ones(n_new, bool))


def _resize_class(segments: SegmentSet, label: int, target: int, k: int, rng) -> SegmentSet:
    cls = segments[segments.public == label]
    if len(cls) > target:
        keep = np.sort(rng.choice(len(cls), size=target, replace=False))
        log.info("undersampling class %d: %d -> %d", label, len(cls), target)
        return cls[keep]
    if len(cls) < target:
        return SegmentSet.concat([cls, _synthesize(segments, label, target - len(cls), k, rng)])
    return cls


def rebalance_public(segments: SegmentSet, rng: np.random.Generator, k_neighbors: int = 5) -> SegmentSet:
    """Even out public classes in one client's data.

    Nothing happens unless the largest class has at least twice the smallest.
    Classes above ten times the smallest are undersampled to that bound
    first; SMOTE then fills every class up to the (new) largest count.
    Classes absent from the client are left absent.
    """
    if len(segments) == 0:
        return segments
    labels = np.unique(segments.public)
    counts = {int(c): int(np.sum(segments.public == c)) for c in labels}
    lo, hi = min(counts.values()), max(counts.values())
    if hi < IMBALANCE_TRIGGER * lo:
        return segments
    cap = int(UNDERSAMPLE_RATIO * lo)
    parts = {c: _resize_class(segments, c, cap, k_neighbors, rng) if n > cap else segments[segments.public == c]
             for c, n in counts.items()}
    top = max(len(p) for p in parts.values())
    return SegmentSet.concat([_resize_class(p, c, top, k_neighbors, rng) for c, p in parts.items()])


def apply_skew(segments: SegmentSet, ratio: float, rng: np.random.Generator, k_neighbors: int = 5,
               n_majority: int | None = None) -> SegmentSet:
    """Make one client's public classes imbalanced with majority/minority count ratio ``ratio``.

    A random subset of the present classes becomes the majority; the total
    sample count is kept (up to rounding).  Majority classes grow by SMOTE,
    minority classes shrink by undersampling.
    """
    if not ratio >= 1:
        raise InvalidRatio(f"imbalance ratio must be >= 1, got {ratio}")
    labels = [int(c) for c in np.unique(segments.public)]
    if len(labels) < 2:
        return segments
    total = len(segments)
    if n_majority is None:
        n_majority = int(rng.integers(1, len(labels)))
    majority = set(rng.choice(labels, size=n_majority, replace=False).tolist())
    n_min = len(labels) - n_majority
    minority_count = max(1, int(total // (n_majority * ratio + n_min)))
    majority_count = int(round(ratio * minority_count))
    parts = [_resize_class(segments, c, majority_count if c in majority else minority_count, k_neighbors, rng)
             for c in labels]
    return SegmentSet.concat(parts)


def quality_gate(synthetic: SegmentSet, public_clf: Callable[[np.ndarray], np.ndarray],
                 private_clf: Callable[[np.ndarray], np.ndarray], attribute: int = 0) -> float:
    """Fraction of synthetic segments whose public and private labels both survive classification."""
    if len(synthetic) == 0:
        return 1.0
    ok = (np.asarray(public_clf(synthetic.x)) == synthetic.public) & \
         (np.asarray(private_clf(synthetic.x)) == synthetic.private[:, attribute])
    ratio = float(np.mean(ok))
    if ratio < 0.9:
        log.warning("synthetic samples pass the label check at only %.1f%%", 100 * ratio)
    return ratio


def split_population(clients: Sequence[str], participation: float, rng: np.random.Generator,
                     ) -> tuple[list[str], list[str]]:
    """Random participants (``floor(R_U * N)``) and the unseen remainder."""
    if not 0 < participation <= 1:
        raise InvalidRatio(f"participation ratio must be in (0, 1], got {participation}")
    clients = list(clients)
    n = int(math.floor(participation * len(clients) + 1e-9))
    order = rng.permutation(len(clients))
    chosen = set(order[:n].tolist())
    return ([c for i, c in enumerate(clients) if i in chosen], [c for i, c in enumerate(clients) if i not in chosen])


# -- planted-signal population ------------------------------------------------

@dataclass
class SignalSpec:
    """Recipe for a synthetic population.

    Public classes are sinusoids with a class-specific frequency per channel
    (frequencies are multiples of ``1/stride`` so every window of a run starts
    at the same phase).  Each private attribute adds a DC offset on one
    channel and a high-frequency component on another, scaled by the class
    index.
    """

    segments_per_client: int = 1500
    public_freqs: tuple[tuple[int, ...], ...] | None = None  # [class][channel] in cycles per stride
    public_amp: float = 1.0
    private_dc: float = 0.4
    private_hf: float = 0.4
    noise: float = 0.5
    client_scale: float = 0.15
    client_offset: float = 0.1
    baseline: tuple[float, ...] | None = None
    imbalance_ratio: float = 1.0

    def validate(self, schema: DatasetSchema) -> None:
        if self.segments_per_client < 4 * schema.public_classes:
            raise InvalidSpec("segments_per_client too small for the number of public classes")
        if min(self.public_amp, self.private_dc, self.private_hf, self.noise, self.client_scale,
               self.client_offset) < 0:
            raise InvalidSpec("amplitudes must be nonnegative")
        if self.imbalance_ratio < 1:
            raise InvalidSpec("imbalance_ratio must be >= 1")
        if self.public_freqs is not None:
            f = np.asarray(self.public_freqs)
            if f.shape != (schema.public_classes, schema.model_channels):
                raise InvalidSpec(f"public_freqs must have shape ({schema.public_classes}, {schema.model_channels})")
        if schema.magnitude_mode:
            raise InvalidSpec("the planted generator writes model channels directly; disable magnitude_mode")

    def freqs(self, schema: DatasetSchema) -> np.ndarray:
        if self.public_freqs is not None:
            return np.asarray(self.public_freqs, dtype=float)
        c, ch = schema.public_classes, schema.model_channels
        top = max(2, min(5, schema.stride // 2 - 1))
        return np.array([[1 + (k + 2 * j) % top for j in range(ch)] for k in range(c)], dtype=float)


def signature_channels(j: int, channels: int) -> tuple[int, int]:
    """Channels carrying attribute ``j``'s DC offset and high-frequency component."""
    return j % channels, (j + 1) % channels


def signature_frequency(j: int) -> float:
    """Cycles per sample of attribute ``j``'s high-frequency component (1/2 or 3/8)."""
    return 0.5 if j % 2 == 0 else 0.375


def assign_private_classes(n_clients: int, classes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One class per attribute per client, balanced for each attribute independently."""
    out = np.zeros((n_clients, len(classes)), dtype=np.int64)
    for j, n in enumerate(classes):
        col = np.arange(n_clients) % n
        out[:, j] = rng.permutation(col)
    return out


def public_counts(total: int, n_classes: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if ratio <= 1:
        base = np.full(n_classes, total // n_classes)
        base[: total - base.sum()] += 1
        return base
    n_major = int(rng.integers(1, n_classes))
    major = rng.choice(n_classes, size=n_major, replace=False)
    minority = max(1, int(total // (n_major * ratio + (n_classes - n_major))))
    counts = np.full(n_classes, minority)
    counts[major] = int(round(ratio * minority))
    return counts


def generate_synthetic_population(n_clients: int, schema: DatasetSchema, spec: SignalSpec,
                                  rng: np.random.Generator) -> list[RawRecording]:
    """Per-client recordings with planted public waveforms and private signatures.

    Every client holds exactly one class of each private attribute.
    """
    spec.validate(schema)
    if n_clients < 1:
        raise InvalidSpec("n_clients must be positive")
    ch, w, s = schema.model_channels, schema.window, schema.stride
    freqs = spec.freqs(schema) / s
    phases = rng.uniform(0, 2 * np.pi, size=freqs.shape)
    baseline = np.zeros(ch) if spec.baseline is None else np.asarray(spec.baseline, dtype=float)
    if baseline.shape != (ch,):
        raise InvalidSpec(f"baseline must have {ch} entries")
    private = assign_private_classes(n_clients, schema.private_classes, rng)
    recordings = []
    for i in range(n_clients):
        cid = f"client{i:03d}"
        scale = 1 + spec.client_scale * rng.uniform(-1, 1, size=ch)
        offset = spec.client_offset * rng.standard_normal(ch)
        counts = public_counts(spec.segments_per_client, schema.public_classes, spec.imbalance_ratio, rng)
        chunks, pubs = [], []
        for c in range(schema.public_classes):
            if counts[c] == 0:
                continue
            length = w + (counts[c] - 1) * s
            t = np.arange(length)
            sig = spec.public_amp * scale[:, None] * np.sin(2 * np.pi * freqs[c][:, None] * t[None, :]
                                                             + phases[c][:, None])
            for j, n in enumerate(schema.private_classes):
                level = private[i, j] / (n - 1)
                dc_ch, hf_ch = signature_channels(j, ch)
                sig[dc_ch] += spec.private_dc * (2 * level - 1)
                sig[hf_ch] += spec.private_hf * level * np.cos(2 * np.pi * signature_frequency(j) * t)
            sig += baseline[:, None] + offset[:, None] + spec.noise * rng.standard_normal(sig.shape)
            chunks.append(sig)
            pubs.append(np.full(length, c))
        data = np.concatenate(chunks, axis=1)
        pub = np.concatenate(pubs)
        priv = np.repeat(private[i][None, :], data.shape[1], axis=0)
        recordings.append(RawRecording(cid, data, pub, priv))
    return recordings


# -- CSV files --------------------------------------------------------------

def csv_header(channels: int, k: int) -> list[str]:
    return ["t"] + [f"ch{i}" for i in range(channels)] + ["public"] + [f"priv{j}" for j in range(k)]


def recording_to_csv(rec: RawRecording) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(csv_header(rec.data.shape[0], rec.private.shape[1]))
    for t in range(rec.length):
        wr.writerow([t] + [f"{v:.7g}" for v in rec.data[:, t]] + [int(rec.public[t])] +
                    [int(v) for v in rec.private[t]])
    return buf.getvalue()


def write_recording(rec: RawRecording, path: str | Path) -> None:
    Path(path).write_text(recording_to_csv(rec))


def read_recording(path: str | Path, schema: DatasetSchema, client_id: str | None = None) -> RawRecording:
    path = Path(path)
    k = len(schema.private_attributes)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = csv_header(schema.channels, k)
        if header != expected:
            raise SchemaError(f"{path}: header {header} does not match expected {expected}")
        rows = list(reader)
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric value ({exc})") from exc
    if arr.size == 0:
        arr = np.zeros((0, len(expected)))
    ch = schema.channels
    public = arr[:, 1 + ch].astype(np.int64)
    private = arr[:, 2 + ch:].astype(np.int64)
    if np.any(public < 0) or np.any(public >= schema.public_classes):
        raise SchemaError(f"{path}: public label out of range")
    for j, n in enumerate(schema.private_classes):
        if np.any(private[:, j] < 0) or np.any(private[:, j] >= n):
            raise SchemaError(f"{path}: private label {j} out of range")
    return RawRecording(client_id or path.stem, arr[:, 1:1 + ch].T, public, private)


def load_population(data_dir: str | Path, schema: DatasetSchema) -> list[RawRecording]:
    files = sorted(Path(data_dir).glob("*.csv"))
    return [read_recording(f, schema) for f in files]


def segment_population(recordings: Sequence[RawRecording], schema: DatasetSchema) -> SegmentSet:
    parts, offset = [], 0
    for rec in recordings:
        seg = segment(rec, schema, id_offset=offset)
        offset += len(seg)
        parts.append(seg)
    return SegmentSet.concat(parts)
