"""Inference classifiers, metrics, PCA and mutual-information analysis.

Inference CNNs only ever see raw training-split segments: they stand in
for an adversary (private target) or a data consumer (public target) who
trained on unmodified sensor data.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .anonymizer import Anonymizer, anonymize
from .data import SegmentSet
from .errors import DegenerateLabels, EmptySet, SingleClassData
from .nn import (Adam, Network, build_network, conv1d, dense, flatten, leaky_relu, load_params, reshape, save_params,
                 softmax)
from .rng import stream

log = logging.getLogger(__name__)


# -- inference CNN --------------------------------------------------------------

@dataclass(frozen=True)
class CNNConfig:
    conv_channels: tuple[int, ...] = (32, 64, 64, 128)
    kernel: int = 5
    stride: int = 2
    dense: tuple[int, ...] = (256, 128)
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    patience: int = 4
    val_fraction: float = 0.1


def cnn_specs(channels: int, window: int, n_classes: int, cfg: CNNConfig = CNNConfig()):
    """Four 1-D convolutions then three dense layers; strides drop to 1 when the window is too short."""
    specs = [reshape(channels, window)]
    c, length = channels, window
    for out in cfg.conv_channels:
        k = min(cfg.kernel, length)
        s = cfg.stride if (length - k) // cfg.stride + 1 >= 1 and length - k >= cfg.stride else 1
        specs += [conv1d(c, out, k, s), leaky_relu()]
        c, length = out, (length - k) // s + 1
    specs.append(flatten())
    width = c * length
    for h in cfg.dense:
        specs += [dense(width, h), leaky_relu()]
        width = h
    specs += [dense(width, n_classes, init="xavier"), softmax()]
    return specs


def _target_labels(segments: SegmentSet, target: str | int) -> np.ndarray:
    if target == "public":
        return segments.public
    return segments.private[:, int(target)]


@dataclass
class InferenceModel:
    net: Network
    target: str | int
    n_classes: int
    channels: int
    train_accuracy: float
    history: list[dict] = field(default_factory=list)
    config: CNNConfig = CNNConfig()
    seed: int = 0

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.net.predict(np.asarray(x, dtype=np.float32), batch_size=1024)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    __call__ = predict


def train_inference_cnn(segments: SegmentSet, target: str | int, n_classes: int, channels: int,
                        epochs: int | None = None, seed: int = 0, config: CNNConfig = CNNConfig(),
                        ) -> InferenceModel:
    """Adam on cross-entropy with early stopping on a held-out slice of the training data."""
    y = _target_labels(segments, target)
    if len(np.unique(y)) < 2:
        raise SingleClassData(f"target {target!r}: training data holds a single class")
    epochs = config.epochs if epochs is None else epochs
    window = segments.x.shape[1] // channels
    rng = stream(seed, "cnn", str(target))
    net = build_network(cnn_specs(channels, window, n_classes, config), int(rng.integers(2 ** 31)))
    order = rng.permutation(len(segments))
    n_val = int(round(config.val_fraction * len(order))) if len(order) >= 20 else 0
    val, tr = order[:n_val], order[n_val:]
    x = segments.x.astype(np.float32)
    opt = Adam(config.lr)
    best, best_loss, stale = net.params.copy(), np.inf, 0
    history = []
    for ep in range(epochs):
        perm = rng.permutation(tr)
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            p = net.forward(x[idx])
            g = np.zeros_like(p)
            rows = np.arange(len(idx))
            g[rows, y[idx]] = -1.0 / np.maximum(p[rows, y[idx]], 1e-12) / len(idx)
            opt.step(net.params, net.backward(g))
        probe = val if n_val else tr
        pv = net.predict(x[probe], batch_size=1024)
        loss = float(np.mean(-np.log(np.maximum(pv[np.arange(len(probe)), y[probe]], 1e-12))))
        acc = float(np.mean(np.argmax(pv, 1) == y[probe]))
        history.append({"epoch": ep + 1, "val_loss": loss, "val_acc": acc})
        if loss < best_loss - 1e-4:
            best, best_loss, stale = net.params.copy(), loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_params(best)
    train_acc = float(np.mean(np.argmax(net.predict(x[tr], batch_size=1024), 1) == y[tr])) if len(tr) else float("nan")
    return InferenceModel(net, target, n_classes, channels, train_acc, history, config, seed)


# -- metrics ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: dict[int, float]
    baseline: float
    n: int
    target: str
    seed: int | None = None
    config: dict = field(default_factory=dict)
    notes: str = "macro-averaged F1 over classes present in labels or predictions"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, dict[int, float]]:
    """Accuracy, macro-F1 and per-class recall."""
    y_true, y_pred = np.asarray(y_true).reshape(-1), np.asarray(y_pred).reshape(-1)
    if y_true.size == 0:
        raise EmptySet("no samples to score")
    acc = float(np.mean(y_true == y_pred))
    labels = np.union1d(y_true, y_pred)
    f1s, per_class = [], {}
    for c in labels:
        tp = float(np.sum((y_pred == c) & (y_true == c)))
        fp = float(np.sum((y_pred == c) & (y_true != c)))
        fn = float(np.sum((y_pred != c) & (y_true == c)))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        if np.any(y_true == c):
            per_class[int(c)] = tp / (tp + fn)
    return acc, float(np.mean(f1s)), per_class


def score(model: InferenceModel | Callable[[np.ndarray], np.ndarray], segments: SegmentSet,
          target: str | int | None = None, n_classes: int | None = None, seed: int | None = None,
          config: dict | None = None) -> MetricsReport:
    if len(segments) == 0:
        raise EmptySet("no segments to score")
    if isinstance(model, InferenceModel):
        target = model.target if target is None else target
        n_classes = model.n_classes if n_classes is None else n_classes
        seed = model.seed if seed is None else seed
    if target is None or n_classes is None:
        raise ValueError("target and n_classes are required for bare predictors")
    y = _target_labels(segments, target)
    acc, f1, per = classification_metrics(y, model(segments.x))
    return MetricsReport(acc, f1, per, 1.0 / n_classes, len(segments), str(target), seed, dict(config or {}))


# -- PCA and mutual information ------------------------------------------------------

@dataclass
class PCAResult:
    components: np.ndarray  # (k, d), rows ordered by decreasing variance
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, scores: np.ndarray) -> np.ndarray:
        return scores @ self.components + self.mean


def pca_fit(x: np.ndarray, n_components: int = 25) -> PCAResult:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n <= n_components:
        raise ValueError(f"need more than {n_components} samples, got {n}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s ** 2 / (n - 1)
    total = var.sum()
    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    k = n_components
    if rank < k:
        log.warning("data rank %d below requested %d components; keeping %d", rank, k, rank)
        k = rank
    # deterministic sign: largest-magnitude loading positive
    comps = vt[:k]
    signs = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(signs == 0, 1, signs)[:, None]
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(comps, var[:k], ratio, mean)


def pca_project(x: np.ndarray, n_components: int = 25) -> tuple[np.ndarray, PCAResult]:
    """Centered projection onto the leading principal components."""
    pca = pca_fit(x, n_components)
    return pca.transform(x), pca


def mi_continuous_discrete(c: np.ndarray, labels: np.ndarray, k: int = 3) -> float:
    """Nearest-neighbour MI estimate (nats) between one continuous variable and discrete labels.

    For each sample the distance to its ``k``-th same-label neighbour sets
    a radius; the count of all samples inside that radius enters the
    digamma formula.  Labels seen only once are dropped.
    """
    c = np.asarray(c, dtype=np.float64).reshape(len(c), -1)
    labels = np.asarray(labels).reshape(-1)
    n = len(labels)
    radius = np.zeros(n)
    k_all = np.zeros(n)
    counts = np.zeros(n)
    for lab in np.unique(labels):
        mask = labels == lab
        cnt = int(mask.sum())
        counts[mask] = cnt
        if cnt > 1:
            kk = min(k, cnt - 1)
            d, _ = cKDTree(c[mask]).query(c[mask], k=kk + 1)
            radius[mask] = np.nextafter(d[:, -1], 0)
            k_all[mask] = kk
    keep = counts > 1
    n_kept = int(keep.sum())
    if n_kept == 0:
        return 0.0
    tree = cKDTree(c[keep])
    m = tree.query_ball_point(c[keep], radius[keep], return_length=True)
    mi = digamma(n_kept) + np.mean(digamma(k_all[keep])) - np.mean(digamma(counts[keep])) - np.mean(digamma(m))
    return float(mi)


@dataclass
class MIResult:
    per_component: np.ndarray
    mean: float


def mutual_information(components: np.ndarray, labels: np.ndarray, k: int = 3,
                       rng: np.random.Generator | None = None) -> MIResult:
    """MI between each column of ``components`` and ``labels``; negatives are clamped to 0.

    A tiny jitter (relative 1e-10) breaks exact ties when ``rng`` is given.
    """
    comps = np.asarray(components, dtype=np.float64)
    if comps.ndim == 1:
        comps = comps[:, None]
    labels = np.asarray(labels).reshape(-1)
    if len(np.unique(labels)) < 2:
        raise DegenerateLabels("labels take a single value")
    if len(labels) != len(comps):
        raise ValueError("components and labels differ in length")
    if rng is not None:
        scale = np.maximum(1.0, np.mean(np.abs(comps), axis=0))
        comps = comps + 1e-10 * scale * rng.standard_normal(comps.shape)
    vals = np.array([mi_continuous_discrete(comps[:, i], labels, k) for i in range(comps.shape[1])])
    if np.any(vals < 0):
        log.debug("clamping %d negative MI estimates", int(np.sum(vals < 0)))
    vals = np.maximum(vals, 0.0)
    return MIResult(vals, float(vals.mean()) if vals.size else 0.0)


def mean_mi(x: np.ndarray, labels: np.ndarray, n_components: int = 25, seed: int = 0) -> float:
    """Mean MI between the PCA components of ``x`` and ``labels``."""
    proj, _ = pca_project(x, n_components)
    return mutual_information(proj, labels, rng=np.random.default_rng(seed)).mean


# -- privacy/utility curves ---------------------------------------------------------------

@dataclass
class CurveRow:
    epoch: int
    desired_acc: float
    intrusive_acc: float
    mi_public: float
    mi_private: float


CURVE_FIELDS = ["epoch", "desired_acc", "intrusive_acc", "mi_public", "mi_private"]


def evaluate_anonymizer(model: Anonymizer, test: SegmentSet, desired: InferenceModel,
                        intrusive: Sequence[InferenceModel], seed: int = 0, mi: bool = True,
                        n_components: int = 25) -> dict:
    """Anonymize ``test`` once and score it with every classifier."""
    anon = anonymize(model, test.x, desired, stream(seed, "anonymize"))
    out_set = test.with_x(anon)
    res = {"desired": score(desired, out_set).accuracy,
           "intrusive": [score(m, out_set).accuracy for m in intrusive]}
    if mi:
        proj, _ = pca_project(anon, n_components)
        r = np.random.default_rng(seed)
        res["mi_public"] = mutual_information(proj, test.public, rng=r).mean
        res["mi_private"] = [mutual_information(proj, test.private[:, j], rng=r).mean for j in range(test.private.shape[1])]
    return res


def privacy_utility_curve(snapshots: Sequence[tuple[int, Anonymizer]], test: SegmentSet, desired: InferenceModel,
                          intrusive: InferenceModel, seed: int = 0, n_components: int = 25) -> list[CurveRow]:
    """One row per snapshot, sorted by epoch."""
    rows = []
    for epoch, model in sorted(snapshots, key=lambda t: t[0]):
        r = evaluate_anonymizer(model, test, desired, [intrusive], seed, True, n_components)
        j = 0 if intrusive.target == "public" else int(intrusive.target)
        rows.append(CurveRow(int(epoch), r["desired"], r["intrusive"][0], r["mi_public"], r["mi_private"][j]))
    return rows


def curve_csv(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for r in rows:
        w.writerow([r.epoch] + [f"{getattr(r, f):.6f}" for f in CURVE_FIELDS[1:]])
    return buf.getvalue()


def write_curve(rows: Sequence[CurveRow], path: str | Path) -> None:
    Path(path).write_text(curve_csv(rows))


# -- persistence ------------------------------------------------------------------

def save_inference_model(model: InferenceModel, path: str | Path) -> None:
    """Length-prefixed JSON descriptor followed by the parameter stream."""
    window = model.net.specs[0].shape[1]
    desc = {"target": model.target, "n_classes": model.n_classes, "channels": model.channels, "window": window,
            "train_accuracy": model.train_accuracy, "config": asdict(model.config), "seed": model.seed}
    js = json.dumps(desc, sort_keys=True).encode()
    Path(path).write_bytes(len(js).to_bytes(4, "little") + js + save_params(model.net.params))


def load_inference_model(path: str | Path) -> InferenceModel:
    data = Path(path).read_bytes()
    n = int.from_bytes(data[:4], "little")
    desc = json.loads(data[4:4 + n])
    cfg = CNNConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in desc["config"].items()})
    net = build_network(cnn_specs(desc["channels"], desc["window"], desc["n_classes"], cfg), 0)
    net.load_params(load_params(data[4 + n:]))
    return InferenceModel(net, desc["target"], desc["n_classes"], desc["channels"], desc["train_accuracy"], [], cfg,
                          desc["seed"])
