"""Conditional VAE anonymizer with adversarial latent discriminators.

The encoder maps a flattened segment to ``(mu, log_var)``; the decoder gets
``z`` concatenated with one-hot public and private labels; one MLP
discriminator per private attribute tries to recover that attribute from
``z``.  Training alternates: discriminators first with the encoder frozen,
then encoder/decoder against the frozen discriminators.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (CorruptStream, EmptyBatch, InvalidLabel, NonFiniteLoss, ShapeError, SingleClassSchema,
                     VersionMismatch)
from .nn import (GradientUpdate, LayerSpec, Network, ParameterSet, build_network, conv1d, conv_transpose1d, dense,
                 flatten, leaky_relu, load_params, reshape, save_params, softmax)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.9
    beta: float = 2.0
    gamma: float = 0.2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    window: int
    public_classes: int
    private_classes: tuple[int, ...]
    latent_dim: int = 25
    hidden: tuple[int, ...] = (256, 128)
    disc_hidden: tuple[int, ...] = (64, 32)
    arch: str = "dense"
    conv_channels: tuple[int, int] = (16, 32)
    conv_kernel: int = 5
    conv_stride: int = 2
    slope: float = 0.01
    head_gain: float = 0.1  # init scale of the (mu, log_var) and discriminator heads
    encoder_init: str = "xavier"
    decoder_init: str = "he"

    def __post_init__(self):
        object.__setattr__(self, "private_classes", tuple(int(c) for c in self.private_classes))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.arch not in ("dense", "conv"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if not self.private_classes:
            raise ValueError("at least one private attribute is required")

    @property
    def input_dim(self) -> int:
        return self.channels * self.window

    @property
    def cond_dim(self) -> int:
        return self.public_classes + sum(self.private_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Batch(NamedTuple):
    x: np.ndarray
    public: np.ndarray
    private: np.ndarray  # (B, k)


@dataclass
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray
    z: np.ndarray


@dataclass
class ShadowSample:
    x_star: np.ndarray
    y_star: np.ndarray
    public: int
    z_star: LatentCode = field(repr=False)


def _conv_lengths(length: int, kernel: int, stride: int) -> tuple[int, int]:
    l1 = (length - kernel) // stride + 1
    l2 = (l1 - kernel) // stride + 1
    return l1, l2


def encoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    act = leaky_relu(cfg.slope)
    init = cfg.encoder_init
    specs: list[LayerSpec] = []
    width = cfg.input_dim
    if cfg.arch == "conv":
        c1, c2 = cfg.conv_channels
        k, s = cfg.conv_kernel, cfg.conv_stride
        _, l2 = _conv_lengths(cfg.window, k, s)
        specs += [reshape(cfg.channels, cfg.window), conv1d(cfg.channels, c1, k, s, init), act,
                  conv1d(c1, c2, k, s, init), act, flatten()]
        width = c2 * l2
    for h in cfg.hidden:
        specs += [dense(width, h, init), act]
        width = h
    specs.append(dense(width, 2 * cfg.latent_dim, init="xavier", gain=cfg.head_gain))
    return specs


def decoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    act = leaky_relu(cfg.slope)
    init = cfg.decoder_init
    specs: list[LayerSpec] = []
    width = cfg.latent_dim + cfg.cond_dim
    for h in reversed(cfg.hidden):
        specs += [dense(width, h, init), act]
        width = h
    if cfg.arch == "conv":
        c1, c2 = cfg.conv_channels
        k, s = cfg.conv_kernel, cfg.conv_stride
        l1, l2 = _conv_lengths(cfg.window, k, s)
        pad1 = l1 - ((l2 - 1) * s + k)
        pad2 = cfg.window - ((l1 - 1) * s + k)
        specs += [dense(width, c2 * l2, init), act, reshape(c2, l2), conv_transpose1d(c2, c1, k, s, pad1, init), act,
                  conv_transpose1d(c1, cfg.channels, k, s, pad2, init="xavier"), flatten()]
    else:
        specs.append(dense(width, cfg.input_dim, init="xavier"))
    return specs


def discriminator_specs(cfg: ModelConfig, n_classes: int) -> list[LayerSpec]:
    act = leaky_relu(cfg.slope)
    specs: list[LayerSpec] = []
    width = cfg.latent_dim
    for h in cfg.disc_hidden:
        specs += [dense(width, h), act]
        width = h
    specs += [dense(width, n_classes, init="xavier", gain=cfg.head_gain), softmax()]
    return specs


def one_hot(labels: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


class Anonymizer:
    """Encoder (theta), decoder (phi) and one discriminator (eta_j) per private attribute."""

    def __init__(self, config: ModelConfig, weights: LossWeights = LossWeights(), seed: int = 0,
                 dtype=np.float32, _nets: dict[str, Network] | None = None):
        self.config = config
        self.weights = weights
        self.dtype = np.dtype(dtype)
        if _nets is None:
            _nets = {"encoder": build_network(encoder_specs(config), seed, dtype),
                     "decoder": build_network(decoder_specs(config), seed + 1, dtype)}
            for j, n in enumerate(config.private_classes):
                _nets[f"disc{j}"] = build_network(discriminator_specs(config, n), seed + 2 + j, dtype)
        self.nets = _nets
        self.params = ParameterSet.merge({k: v.params for k, v in self.nets.items()})

    @property
    def encoder(self) -> Network:
        return self.nets["encoder"]

    @property
    def decoder(self) -> Network:
        return self.nets["decoder"]

    @property
    def discriminators(self) -> list[Network]:
        return [self.nets[f"disc{j}"] for j in range(self.n_private)]

    @property
    def n_private(self) -> int:
        return len(self.config.private_classes)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def network_names(self, group: str) -> list[str]:
        """``"vae"`` for encoder+decoder, ``"disc"`` for discriminators."""
        if group == "vae":
            return ["encoder", "decoder"]
        if group == "disc":
            return [f"disc{j}" for j in range(self.n_private)]
        raise ValueError(group)

    def group_names(self, group: str) -> list[str]:
        prefixes = tuple(n + "/" for n in self.network_names(group))
        return [k for k in self.params.names() if k.startswith(prefixes)]

    def clone(self) -> "Anonymizer":
        m = Anonymizer(self.config, self.weights, dtype=self.dtype,
                       _nets={k: v.clone() for k, v in self.nets.items()})
        m.params.version = self.params.version
        return m

    def snapshot(self) -> ParameterSet:
        return self.params.copy()

    def load_snapshot(self, params: ParameterSet) -> None:
        if params.shapes() != self.params.shapes():
            raise ShapeError("snapshot does not match this model's architecture")
        self.params.assign(params)
        self.params.version = params.version

    def apply_gradients(self, update: GradientUpdate, lr: float) -> None:
        """In-place SGD on the parameters named in ``update`` (may be a subset)."""
        lr_t = self.dtype.type(lr)
        for name, g in update.grads.items():
            arr = self.params[name]
            arr -= lr_t * g.astype(arr.dtype, copy=False)
        self.params.version += 1

    # -- forward pieces --------------------------------------------------

    def check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"expected segments of length {self.config.input_dim}, got shape {x.shape}")
        return x

    def check_labels(self, public: np.ndarray, private: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        public = np.asarray(public, dtype=np.int64).reshape(-1)
        private = np.asarray(private, dtype=np.int64)
        if private.ndim == 1:
            private = private[:, None]
        if private.shape != (public.shape[0], self.n_private):
            raise InvalidLabel(f"private labels must have shape (B, {self.n_private}), got {private.shape}")
        if public.size and (public.min() < 0 or public.max() >= self.config.public_classes):
            raise InvalidLabel("public label out of range")
        for j, n in enumerate(self.config.private_classes):
            col = private[:, j]
            if col.size and (col.min() < 0 or col.max() >= n):
                raise InvalidLabel(f"private label {j} out of range")
        return public, private

    def condition(self, public: np.ndarray, private: np.ndarray) -> np.ndarray:
        public, private = self.check_labels(public, private)
        parts = [one_hot(public, self.config.public_classes, self.dtype)]
        parts += [one_hot(private[:, j], n, self.dtype) for j, n in enumerate(self.config.private_classes)]
        return np.concatenate(parts, axis=1)

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.encoder.predict(self.check_x(x))
        d = self.latent_dim
        return h[:, :d], h[:, d:]

    def decode(self, z: np.ndarray, public: np.ndarray, private: np.ndarray) -> np.ndarray:
        return self.decoder.predict(np.concatenate([np.asarray(z, self.dtype), self.condition(public, private)], 1))

    def discriminate(self, z: np.ndarray, j: int) -> np.ndarray:
        if not 0 <= j < self.n_private:
            raise IndexError(f"attribute index {j} out of range for {self.n_private} discriminators")
        return self.discriminators[j].predict(z)


# -- losses ---------------------------------------------------------------

def reparameterize(mu: np.ndarray, log_var: np.ndarray, eps: np.ndarray | np.random.Generator) -> np.ndarray:
    """``z = mu + eps * exp(log_var / 2)``; ``eps`` may be an array or a generator to draw it from."""
    mu = np.asarray(mu)
    if isinstance(eps, np.random.Generator):
        eps = eps.standard_normal(mu.shape).astype(mu.dtype)
    return mu + eps * np.exp(np.asarray(log_var) / 2)


def vae_loss(x: np.ndarray, x_rec: np.ndarray, mu: np.ndarray, log_var: np.ndarray) -> tuple[float, float]:
    """Mean squared reconstruction error and batch-mean KL to the unit Gaussian."""
    x, x_rec = np.asarray(x, np.float64), np.asarray(x_rec, np.float64)
    if x.shape != x_rec.shape:
        raise ShapeError(f"reconstruction shape {x_rec.shape} != input shape {x.shape}")
    mu, log_var = np.atleast_2d(np.asarray(mu, np.float64)), np.atleast_2d(np.asarray(log_var, np.float64))
    recon = float(np.mean((x - x_rec) ** 2))
    kl = float(np.mean(0.5 * np.sum(np.exp(log_var) + mu ** 2 - 1 - log_var, axis=1)))
    return recon, max(kl, 0.0)


def disc_loss(probs: np.ndarray, y_true: np.ndarray) -> float:
    probs = np.atleast_2d(probs)
    p = probs[np.arange(len(probs)), np.asarray(y_true, dtype=np.int64)].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def disc_loss_grad(probs: np.ndarray, y_true: np.ndarray) -> np.ndarray:
    """d(disc_loss)/d(probs); zero where the floor clamps."""
    probs = np.atleast_2d(probs)
    idx = np.arange(len(probs)), np.asarray(y_true, dtype=np.int64)
    p = probs[idx]
    g = np.zeros_like(probs)
    g[idx] = np.where(p > PROB_FLOOR, -1.0 / np.maximum(p, PROB_FLOOR), 0.0) / len(probs)
    return g


def total_loss(recon: float, kl: float, disc: float | Sequence[float], weights: LossWeights) -> float:
    disc_sum = float(np.sum(disc))
    return weights.alpha * recon + weights.beta * kl - weights.gamma * disc_sum


# -- objectives with gradients ---------------------------------------------

def vae_objective(model: Anonymizer, batch: Batch, eps: np.ndarray | np.random.Generator,
                  weights: LossWeights | None = None) -> tuple[dict[str, float], GradientUpdate]:
    """Total loss on ``batch`` and its gradient w.r.t. encoder and decoder.

    Discriminators take part in the forward pass but are treated as frozen:
    no discriminator gradients are returned.
    """
    w = weights or model.weights
    x = model.check_x(batch.x)
    public, private = model.check_labels(batch.public, batch.private)
    if len(x) == 0:
        raise EmptyBatch("empty batch")
    d = model.latent_dim
    h = model.encoder.forward(x)
    mu, log_var = h[:, :d], h[:, d:]
    if isinstance(eps, np.random.Generator):
        eps = eps.standard_normal(mu.shape).astype(model.dtype)
    std = np.exp(log_var / 2)
    z = mu + eps * std
    x_rec = model.decoder.forward(np.concatenate([z, model.condition(public, private)], 1))
    recon, kl = vae_loss(x, x_rec, mu, log_var)
    d_losses, dz = [], np.zeros_like(z)
    for j, net in enumerate(model.discriminators):
        probs = net.forward(z)
        d_losses.append(disc_loss(probs, private[:, j]))
        if w.gamma:
            dz += net.backward(-w.gamma * disc_loss_grad(probs, private[:, j])).input_grad
        else:
            net.backward(np.zeros_like(probs))
    total = total_loss(recon, kl, d_losses, w)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite total loss ({recon=}, {kl=}, {d_losses=})")

    b, n = x.shape
    dec = model.decoder.backward((w.alpha * 2.0 / (b * n)) * (x_rec - x))
    dz += dec.input_grad[:, :d]
    dmu = dz + (w.beta / b) * mu
    dlv = dz * eps * std * 0.5 + (w.beta / b) * 0.5 * (np.exp(log_var) - 1)
    enc = model.encoder.backward(np.concatenate([dmu, dlv], 1))
    grads = GradientUpdate.merge({"encoder": enc, "decoder": dec})
    losses = {"total": total, "recon": recon, "kl": kl, "disc": float(np.sum(d_losses))}
    return losses, grads


def disc_objective(model: Anonymizer, z: np.ndarray, private: np.ndarray) -> tuple[list[float], GradientUpdate]:
    """Cross-entropy of each discriminator on fixed latents ``z``, with gradients w.r.t. the discriminators."""
    private = np.asarray(private, dtype=np.int64)
    if private.ndim == 1:
        private = private[:, None]
    if len(z) == 0:
        raise EmptyBatch("empty batch")
    losses, parts = [], {}
    for j, net in enumerate(model.discriminators):
        probs = net.forward(z)
        losses.append(disc_loss(probs, private[:, j]))
        parts[f"disc{j}"] = net.backward(disc_loss_grad(probs, private[:, j]))
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss(f"non-finite discriminator loss {losses}")
    return losses, GradientUpdate.merge(parts)


def sample_latent(model: Anonymizer, x: np.ndarray, rng: np.random.Generator) -> LatentCode:
    mu, log_var = model.encode(x)
    return LatentCode(mu, log_var, reparameterize(mu, log_var, rng))


# -- shadow samples ---------------------------------------------------------

def draw_other_class(y: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from ``{0..n-1} \\ {y}`` for each entry of ``y``."""
    if n_classes < 2:
        raise SingleClassSchema("shadow samples need at least two private classes")
    return (np.asarray(y) + rng.integers(1, n_classes, size=np.shape(y))) % n_classes


def shadow_arrays(model: Anonymizer, batch: Batch, rng: np.random.Generator):
    """Vectorized shadow synthesis: ``(x_star, y_star, latent)``."""
    public, private = model.check_labels(batch.public, batch.private)
    y_star = np.stack([draw_other_class(private[:, j], n, rng)
                       for j, n in enumerate(model.config.private_classes)], axis=1)
    latent = sample_latent(model, batch.x, rng)
    x_star = model.decode(latent.z, public, y_star)
    return x_star, y_star, latent


def generate_shadow_samples(model: Anonymizer, batch: Batch, rng: np.random.Generator) -> list[ShadowSample]:
    """One shadow per input: same public label and latent draw, a private label other than the true one."""
    x_star, y_star, lat = shadow_arrays(model, batch, rng)
    public = np.asarray(batch.public).reshape(-1)
    return [ShadowSample(x_star[i], y_star[i], int(public[i]), LatentCode(lat.mu[i], lat.log_var[i], lat.z[i]))
            for i in range(len(x_star))]


# -- training steps ---------------------------------------------------------

def discriminator_batch(model: Anonymizer, batch: Batch, rng: np.random.Generator, shadow: bool):
    """Latents and labels the discriminators train on; shadows are re-encoded and appended."""
    _, private = model.check_labels(batch.public, batch.private)
    z = sample_latent(model, batch.x, rng).z
    if not shadow:
        return z, private
    x_star, y_star, _ = shadow_arrays(model, batch, rng)
    z_star = sample_latent(model, x_star, rng).z
    return np.concatenate([z, z_star]), np.concatenate([private, y_star])


def adversarial_step(model: Anonymizer, batch: Batch, lr: float, rng: np.random.Generator, shadow: bool = False,
                     weights: LossWeights | None = None) -> dict[str, float]:
    """One alternating update: discriminators with the encoder fixed, then encoder/decoder with them fixed."""
    if len(batch.x) == 0:
        raise EmptyBatch("empty batch")
    z, labels = discriminator_batch(model, batch, rng, shadow)
    d_losses, d_grads = disc_objective(model, z, labels)
    model.apply_gradients(d_grads, lr)
    losses, g = vae_objective(model, batch, rng, weights)
    model.apply_gradients(g, lr)
    losses["disc_step"] = float(np.sum(d_losses))
    return losses


def evaluate_losses(model: Anonymizer, batch: Batch, rng: np.random.Generator,
                    weights: LossWeights | None = None) -> dict[str, float]:
    """Loss terms without touching the parameters."""
    w = weights or model.weights
    public, private = model.check_labels(batch.public, batch.private)
    lat = sample_latent(model, batch.x, rng)
    x_rec = model.decode(lat.z, public, private)
    recon, kl = vae_loss(batch.x, x_rec, lat.mu, lat.log_var)
    d = [disc_loss(model.discriminate(lat.z, j), private[:, j]) for j in range(model.n_private)]
    return {"total": total_loss(recon, kl, d, w), "recon": recon, "kl": kl, "disc": float(np.sum(d))}


# -- anonymization ----------------------------------------------------------

def anonymize(model: Anonymizer, x: np.ndarray, public_predictor: Callable[[np.ndarray], np.ndarray],
              rng: np.random.Generator, return_labels: bool = False):
    """Decode with the predicted public label and uniformly random private labels."""
    x = model.check_x(x)
    public = np.asarray(public_predictor(x), dtype=np.int64).reshape(-1)
    drawn = np.stack([rng.integers(0, n, size=len(x)) for n in model.config.private_classes], axis=1)
    z = sample_latent(model, x, rng).z
    out = model.decode(z, public, drawn)
    return (out, drawn) if return_labels else out


# -- bundle files -----------------------------------------------------------

BUNDLE_MAGIC = b"FANB"
BUNDLE_VERSION = 1


def save_bundle(model: Anonymizer, path: str | Path | None = None, extra: dict | None = None) -> bytes:
    """Schema JSON followed by one parameter stream per network."""
    desc = {"model": model.config.to_dict(), "weights": asdict(model.weights),
            "networks": list(model.nets), "dtype": model.dtype.name}
    if extra:
        desc["extra"] = extra
    js = json.dumps(desc, sort_keys=True).encode()
    out = bytearray(BUNDLE_MAGIC) + struct.pack("<HI", BUNDLE_VERSION, len(js)) + js
    for name, net in model.nets.items():
        blob = save_params(net.params)
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(blob)) + blob
    data = bytes(out)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_bundle_descriptor(data: bytes) -> dict:
    if data[:4] != BUNDLE_MAGIC:
        raise CorruptStream("not a model bundle")
    _, n = struct.unpack_from("<HI", data, 4)
    return json.loads(data[10:10 + n])


def load_bundle(source: bytes | str | Path) -> Anonymizer:
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if data[:4] != BUNDLE_MAGIC:
        raise CorruptStream("not a model bundle")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != BUNDLE_VERSION:
            raise VersionMismatch(f"bundle version {version}")
        desc = json.loads(data[10:10 + n])
        off = 10 + n
        cfg = ModelConfig.from_dict(desc["model"])
        model = Anonymizer(cfg, LossWeights(**desc["weights"]), dtype=np.dtype(desc["dtype"]))
        for _ in desc["networks"]:
            (ln,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            (bl,) = struct.unpack_from("<Q", data, off)
            off += 8
            model.nets[name].load_params(load_params(bytes(data[off:off + bl])))
            off += bl
    except (struct.error, KeyError, json.JSONDecodeError) as exc:
        raise CorruptStream(f"malformed bundle: {exc}") from exc
    if off != len(data):
        raise CorruptStream("trailing bytes in bundle")
    return model
