"""Simulated federated training: meta-learned FedSGD and a FedAvg baseline.

Clients live in-process.  Everything a client hands to the server goes
through :class:`Channel`, which only accepts serialized gradient updates or
parameter sets plus scalar loss metrics.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .anonymizer import (Anonymizer, Batch, adversarial_step, disc_objective, discriminator_batch, sample_latent,
                         shadow_arrays, vae_objective)
from .data import SegmentSet
from .errors import (EmptyBatch, EmptyClientSet, InsufficientData, MisalignedUpdate, NonFiniteActivation,
                     NonFiniteLoss, PrivacyViolation, UnexpectedClient)
from .nn import GradientUpdate, ParameterSet, check_aligned, load_params, save_params
from .rng import stream

log = logging.getLogger(__name__)

AGGREGATIONS = ("meta_fedsgd", "fedavg")


@dataclass
class FedConfig:
    selection_fraction: float = 0.4
    meta_lr: float = 0.05
    local_lr: float = 0.05
    support_size: int = 1
    query_size: int = 15
    rounds_per_epoch: int | None = None  # None: floor(K / b) from the smallest client
    epochs: int = 5
    local_steps_per_round: int = 1
    aggregation: str = "meta_fedsgd"
    fedavg_local_rounds: int = 5
    shadow: bool = True
    meta_order: str = "first"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.selection_fraction <= 1:
            raise ValueError(f"selection_fraction must be in (0, 1], got {self.selection_fraction}")
        if self.support_size < 1 or self.query_size < 1:
            raise ValueError("support and query sizes must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.meta_order not in ("first", "second"):
            raise ValueError("meta_order must be 'first' or 'second'")
        if min(self.meta_lr, self.local_lr) < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.epochs < 0 or self.local_steps_per_round < 0 or self.fedavg_local_rounds < 0:
            raise ValueError("counts must be nonnegative")
        if self.rounds_per_epoch is not None and self.rounds_per_epoch < 0:
            raise ValueError("rounds_per_epoch must be nonnegative")

    @property
    def batch(self) -> int:
        return self.support_size + self.query_size

    def rounds_for(self, n_samples: int) -> int:
        """Communication rounds per epoch for a client holding ``n_samples`` segments."""
        if self.rounds_per_epoch is not None:
            return self.rounds_per_epoch
        if self.aggregation == "fedavg":
            return n_samples // (self.batch * max(1, self.fedavg_local_rounds))
        return n_samples // self.batch

    def with_batch(self, b: int) -> "FedConfig":
        """Same config at batch size ``b``; support/query keep their 1:15 proportion."""
        if b < 2:
            raise ValueError("batch must be at least 2")
        s = max(1, round(b * self.support_size / self.batch))
        return replace(self, support_size=s, query_size=b - s)

    def to_dict(self) -> dict:
        return asdict(self)


# -- client side ------------------------------------------------------------

class ClientDataset:
    """One client's segments with without-replacement sampling that cycles per epoch."""

    def __init__(self, client_id: str, segments: SegmentSet, seed: int = 0):
        self.client_id = client_id
        self.segments = segments
        self.rng = stream(seed, "client-data", client_id)
        self._order = self.rng.permutation(len(segments))
        self._pos = 0

    def __len__(self) -> int:
        return len(self.segments)

    def new_epoch(self) -> None:
        self._order = self.rng.permutation(len(self.segments))
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        if n > len(self):
            raise InsufficientData(f"{self.client_id}: need {n} segments, have {len(self)}")
        if self._pos + n > len(self._order):
            self.new_epoch()
        idx = self._order[self._pos:self._pos + n]
        self._pos += n
        return idx

    def batch(self, idx: np.ndarray) -> Batch:
        s = self.segments
        return Batch(s.x[idx], s.public[idx], s.private[idx])

    def sample_support_query(self, s: int, q: int) -> tuple[Batch, Batch]:
        idx = self.take(s + q)
        return self.batch(idx[:s]), self.batch(idx[s:])


def sample_support_query(client: ClientDataset, s: int, q: int) -> tuple[Batch, Batch]:
    """Disjoint support and query batches from the client's current shuffle."""
    return client.sample_support_query(s, q)


@dataclass
class ClientResult:
    update: GradientUpdate
    losses: dict[str, float]


def query_gradients(model: Anonymizer, query: Batch, rng: np.random.Generator,
                    eps: np.ndarray | None = None, shadow: bool = False) -> tuple[dict[str, float], GradientUpdate]:
    """Query-set losses and gradients for every network at the model's current parameters.

    Discriminators are scored on latents from the (fixed) encoder, with shadows
    appended when ``shadow``; the VAE loss uses the (fixed) discriminators.
    """
    z, labels = discriminator_batch(model, query, rng, shadow)
    d_losses, d_grads = disc_objective(model, z, labels)
    if eps is None:
        eps = rng.standard_normal((len(query.x), model.latent_dim)).astype(model.dtype)
    v_losses, v_grads = vae_objective(model, query, eps)
    grads = GradientUpdate({k: {**v_grads.grads, **d_grads.grads}[k] for k in model.params.names()})
    losses = {"vae": model.weights.alpha * v_losses["recon"] + model.weights.beta * v_losses["kl"],
              "disc": float(np.sum(d_losses)), "meta": v_losses["total"], "recon": v_losses["recon"],
              "kl": v_losses["kl"]}
    return losses, grads


def _hvp(grad_fn: Callable[[], GradientUpdate], params: ParameterSet, v: dict[str, np.ndarray],
         rel_step: float) -> dict[str, np.ndarray]:
    """Hessian-vector product by central differences of ``grad_fn`` along ``v`` (restricted to ``v``'s names)."""
    norm = math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in v.values()))
    if norm == 0:
        return {k: np.zeros_like(a) for k, a in v.items()}
    r = rel_step / norm
    base = {k: params[k].copy() for k in v}
    out = {}
    try:
        for k in v:
            params[k] = base[k] + r * v[k]
        plus = grad_fn()
        for k in v:
            params[k] = base[k] - r * v[k]
        minus = grad_fn()
    finally:
        for k in v:
            params[k] = base[k]
    for k in v:
        out[k] = (plus[k].astype(np.float64) - minus[k].astype(np.float64)) / (2 * r)
    return out


def client_meta_step(model: Anonymizer, support: Batch, query: Batch, local_lr: float, rng: np.random.Generator,
                     shadow: bool = True, steps: int = 1, order: str = "first") -> ClientResult:
    """Adapt a private clone on the support set, then return query gradients.

    Adaptation per step: discriminators with the encoder fixed (shadows mixed
    in when ``shadow``), then encoder/decoder with the discriminators fixed.
    ``order="first"`` returns the query gradient at the adapted parameters;
    ``order="second"`` also carries it back through each adaptation step
    with ``(I - lr * H)`` products, using finite-difference Hessian-vector
    products per block (discriminators, encoder/decoder).
    """
    if len(support.x) == 0 or len(query.x) == 0:
        raise EmptyBatch("support and query must be nonempty")
    adapt_rng, query_rng = rng.spawn(2)
    local = model.clone()
    history = []
    disc_names, vae_names = local.group_names("disc"), local.group_names("vae")
    try:
        for _ in range(steps):
            z, labels = discriminator_batch(local, support, adapt_rng, shadow)
            _, dg = disc_objective(local, z, labels)
            if order == "second":
                history.append(("disc", {k: local.params[k].copy() for k in disc_names}, z, labels))
            local.apply_gradients(dg, local_lr)
            eps = adapt_rng.standard_normal((len(support.x), local.latent_dim)).astype(local.dtype)
            _, vg = vae_objective(local, support, eps)
            if order == "second":
                history.append(("vae", {k: local.params[k].copy() for k in vae_names}, eps, None))
            local.apply_gradients(vg, local_lr)
        losses, grads = query_gradients(local, query, query_rng, shadow=shadow)
        if order == "second" and local_lr > 0:
            grads = _second_order(local, support, grads, history, local_lr, disc_names, vae_names)
    except (NonFiniteActivation, FloatingPointError) as exc:
        raise NonFiniteLoss(str(exc)) from exc
    if not grads.is_finite() or not all(np.isfinite(v) for v in losses.values()):
        raise NonFiniteLoss("non-finite client gradients")
    return ClientResult(grads, losses)


def _second_order(local: Anonymizer, support: Batch, grads: GradientUpdate, history, lr: float,
                  disc_names: list[str], vae_names: list[str]) -> GradientUpdate:
    rel = 1e-3 if local.dtype == np.float32 else 1e-6
    v = {k: g.astype(np.float64) for k, g in grads.grads.items()}
    saved = local.snapshot()
    try:
        for kind, values, a, b in reversed(history):
            names = disc_names if kind == "disc" else vae_names
            for k in names:
                local.params[k] = values[k]
            if kind == "disc":
                def fn(z=a, labels=b):
                    return disc_objective(local, z, labels)[1]
            else:
                def fn(eps=a):
                    return vae_objective(local, support, eps)[1]
            hv = _hvp(fn, local.params, {k: v[k] for k in names}, rel)
            for k in names:
                v[k] = v[k] - lr * hv[k]
    finally:
        local.load_snapshot(saved)
    return GradientUpdate({k: v[k].astype(grads[k].dtype) for k in grads.names()})


# -- client/server boundary ----------------------------------------------------

@dataclass
class Message:
    client_id: str
    round: int
    kind: str  # "gradients" or "parameters"
    payload: bytes
    metrics: dict[str, float] = field(default_factory=dict)


class Channel:
    """Client-to-server mailbox that carries only serialized model updates.

    Audit hooks are called with every accepted message.
    """

    def __init__(self, audit_hooks: Iterable[Callable[[Message], None]] = ()):
        self.audit_hooks = list(audit_hooks)
        self._inbox: list[Message] = []
        self.sent = 0

    def send(self, client_id: str, round: int, payload: GradientUpdate | ParameterSet,
             metrics: Mapping[str, float] | None = None) -> None:
        if isinstance(payload, GradientUpdate):
            kind, blob = "gradients", save_params(ParameterSet(payload.grads))
        elif isinstance(payload, ParameterSet):
            kind, blob = "parameters", save_params(payload)
        else:
            raise PrivacyViolation(f"refusing to transmit {type(payload).__name__} from client scope")
        clean = {}
        for k, val in (metrics or {}).items():
            if not isinstance(val, (float, int, np.floating, np.integer)) or isinstance(val, bool):
                raise PrivacyViolation(f"metric {k!r} is not a scalar")
            clean[str(k)] = float(val)
        msg = Message(str(client_id), int(round), kind, blob, clean)
        for hook in self.audit_hooks:
            hook(msg)
        self._inbox.append(msg)
        self.sent += 1

    def drain(self) -> list[Message]:
        out, self._inbox = self._inbox, []
        return out


def decode_update(msg: Message) -> GradientUpdate:
    ps = load_params(msg.payload)
    return GradientUpdate({k: v for k, v in ps.items()}, source_client=msg.client_id, round=msg.round)


def decode_params(msg: Message) -> ParameterSet:
    return load_params(msg.payload)


# -- server side --------------------------------------------------------------

def select_clients(client_ids: Sequence[str], fraction: float, rng: np.random.Generator) -> list[str]:
    """``max(1, floor(fraction * N))`` distinct clients, returned sorted."""
    if not client_ids:
        raise EmptyClientSet("no clients to select from")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted(client_ids)
    m = max(1, int(math.floor(fraction * len(ids) + 1e-9)))
    pick = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in pick)


def _mean_in_order(arrays: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        acc += a
    return acc / len(arrays)


def aggregate_meta(params: ParameterSet, updates: Sequence[GradientUpdate], lr: float,
                   selected: Iterable[str] | None = None) -> GradientUpdate:
    """``params -= lr * mean(updates)``; returns the mean gradient.

    Updates are summed in float64 in client-id order, so the result does not
    depend on arrival order.  The divisor is the number of updates received.
    """
    if not updates:
        raise EmptyClientSet("no updates to aggregate")
    if selected is not None:
        allowed = set(selected)
        for u in updates:
            if u.source_client not in allowed:
                raise UnexpectedClient(f"update from unselected client {u.source_client!r}")
    for u in updates:
        check_aligned(params, u)
    ordered = sorted(updates, key=lambda u: "" if u.source_client is None else str(u.source_client))
    mean = {}
    for name, arr in params.items():
        g = _mean_in_order([u[name] for u in ordered]).astype(arr.dtype)
        arr -= arr.dtype.type(lr) * g
        mean[name] = g
    params.version += 1
    return GradientUpdate(mean)


def fedavg_aggregate(params: ParameterSet, client_params: Sequence[tuple[str, ParameterSet]],
                     selected: Iterable[str] | None = None) -> None:
    """Replace ``params`` by the elementwise mean of the clients' parameters."""
    if not client_params:
        raise EmptyClientSet("no parameters to aggregate")
    if selected is not None:
        allowed = set(selected)
        for cid, _ in client_params:
            if cid not in allowed:
                raise UnexpectedClient(f"parameters from unselected client {cid!r}")
    for _, p in client_params:
        if p.shapes() != params.shapes():
            raise MisalignedUpdate("client parameters do not match the global architecture")
    ordered = [p for _, p in sorted(client_params, key=lambda t: t[0])]
    for name, arr in params.items():
        arr[...] = _mean_in_order([p[name] for p in ordered]).astype(arr.dtype)
    params.version += 1


def local_train(model: Anonymizer, client: ClientDataset, rounds: int, batch: int, lr: float,
                rng: np.random.Generator, shadow: bool) -> dict[str, float]:
    """Plain adversarial SGD on the client's data for ``rounds`` batches; returns the last losses."""
    losses: dict[str, float] = {}
    for _ in range(rounds):
        b = client.batch(client.take(batch))
        try:
            losses = adversarial_step(model, b, lr, rng, shadow=shadow)
        except (NonFiniteActivation, FloatingPointError) as exc:
            raise NonFiniteLoss(str(exc)) from exc
    if not all(np.all(np.isfinite(v)) for _, v in model.params.items()):
        raise NonFiniteLoss("non-finite parameters after local training")
    return losses


def fedavg_round(model: Anonymizer, clients: Sequence[ClientDataset], local_rounds: int, local_lr: float,
                 batch: int, rng: np.random.Generator, shadow: bool = True, channel: Channel | None = None,
                 round_index: int = 0) -> dict[str, dict[str, float]]:
    """Each client trains a copy for ``local_rounds`` batches; the server averages the parameters."""
    channel = channel or Channel()
    rngs = rng.spawn(len(clients))
    for client, crng in zip(clients, rngs):
        local = model.clone()
        try:
            losses = local_train(local, client, local_rounds, batch, local_lr, crng, shadow)
        except NonFiniteLoss as exc:
            log.warning("client %s skipped: %s", client.client_id, exc)
            continue
        metrics = {"vae": losses.get("recon", 0.0) * model.weights.alpha + losses.get("kl", 0.0) * model.weights.beta,
                   "disc": losses.get("disc_step", 0.0), "meta": losses.get("total", 0.0)}
        channel.send(client.client_id, round_index, local.params, metrics)
    msgs = channel.drain()
    if not msgs:
        log.warning("round %d: no client contributed", round_index)
        return {}
    fedavg_aggregate(model.params, [(m.client_id, decode_params(m)) for m in msgs],
                     selected=[c.client_id for c in clients])
    return {m.client_id: m.metrics for m in msgs}


# -- training loop ------------------------------------------------------------

@dataclass
class RoundRecord:
    epoch: int
    round: int
    selected: list[str]
    client_losses: dict[str, dict[str, float]]
    grad_norms: dict[str, float]
    aggregate_norm: float
    skipped: list[str] = field(default_factory=list)

    def mean(self, key: str) -> float:
        vals = [v[key] for v in self.client_losses.values() if key in v]
        return float(np.mean(vals)) if vals else float("nan")


LOG_FIELDS = ["epoch", "round", "client", "vae_loss", "disc_loss", "meta_loss", "grad_norm"]


def round_log_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        for cid in sorted(r.client_losses):
            l = r.client_losses[cid]
            w.writerow([r.epoch, r.round, cid, f"{l.get('vae', float('nan')):.6g}",
                        f"{l.get('disc', float('nan')):.6g}", f"{l.get('meta', float('nan')):.6g}",
                        f"{r.grad_norms.get(cid, float('nan')):.6g}"])
    return buf.getvalue()


def write_round_log(records: Sequence[RoundRecord], path: str | Path) -> None:
    Path(path).write_text(round_log_csv(records))


EpochCallback = Callable[[int, Anonymizer, list[RoundRecord]], None]


def run_training(config: FedConfig, clients: Mapping[str, SegmentSet] | Sequence[ClientDataset], model: Anonymizer,
                 channel: Channel | None = None, on_epoch: EpochCallback | None = None,
                 fault: Callable[[str, int, GradientUpdate], GradientUpdate] | None = None,
                 ) -> tuple[Anonymizer, list[RoundRecord]]:
    """Train ``model`` in place over ``config.epochs`` epochs.

    Clients are selected once per epoch and stay for all its rounds.  A
    client whose step fails numerically is skipped for that round and the
    aggregate divides by the remaining contributors.  ``fault`` lets tests
    tamper with a client's update before it is sent.
    """
    config.validate()
    if isinstance(clients, Mapping):
        clients = [ClientDataset(cid, seg, config.seed) for cid, seg in sorted(clients.items())]
    clients = list(clients)
    if not clients:
        raise EmptyClientSet("no clients")
    by_id = {c.client_id: c for c in clients}
    b = config.batch
    for c in clients:
        if len(c) < b:
            raise InsufficientData(f"{c.client_id}: {len(c)} segments < batch {b}")
    t = config.rounds_for(min(len(c) for c in clients))
    channel = channel or Channel()
    sel_rng = stream(config.seed, "selection")
    step_rng = stream(config.seed, "client-steps")
    records: list[RoundRecord] = []
    if on_epoch is not None:
        on_epoch(0, model, records)
    for epoch in range(1, config.epochs + 1):
        selected = select_clients(list(by_id), config.selection_fraction, sel_rng)
        for cid in selected:
            by_id[cid].new_epoch()
        for r in range(t):
            if config.aggregation == "fedavg":
                metrics = fedavg_round(model, [by_id[c] for c in selected], config.fedavg_local_rounds,
                                       config.local_lr, b, step_rng, config.shadow, channel, r)
                records.append(RoundRecord(epoch, r, list(selected), metrics, {}, float("nan"),
                                           sorted(set(selected) - set(metrics))))
                continue
            records.append(_meta_round(config, model, [by_id[c] for c in selected], step_rng, channel, epoch, r,
                                       fault))
        if on_epoch is not None:
            on_epoch(epoch, model, records)
    return model, records


def _meta_round(config: FedConfig, model: Anonymizer, clients: list[ClientDataset], rng: np.random.Generator,
                channel: Channel, epoch: int, r: int, fault) -> RoundRecord:
    snapshot = model.clone()  # every client starts from the same global snapshot
    rngs = rng.spawn(len(clients))
    skipped = []
    for client, crng in zip(clients, rngs):
        support, query = client.sample_support_query(config.support_size, config.query_size)
        try:
            res = client_meta_step(snapshot, support, query, config.local_lr, crng, config.shadow,
                                   config.local_steps_per_round, config.meta_order)
            update = res.update
            if fault is not None:
                update = fault(client.client_id, r, update)
            if not update.is_finite():
                raise NonFiniteLoss("non-finite update")
        except NonFiniteLoss as exc:
            log.warning("epoch %d round %d: client %s skipped (%s)", epoch, r, client.client_id, exc)
            skipped.append(client.client_id)
            continue
        channel.send(client.client_id, r, update, res.losses)
    msgs = channel.drain()
    updates = [decode_update(m) for m in msgs]
    norms = {u.source_client: u.norm() for u in updates}
    if updates:
        mean = aggregate_meta(model.params, updates, config.meta_lr, selected=[c.client_id for c in clients])
        agg = mean.norm()
    else:
        log.warning("epoch %d round %d: no contributors, global model unchanged", epoch, r)
        agg = 0.0
    return RoundRecord(epoch, r, [c.client_id for c in clients], {m.client_id: m.metrics for m in msgs}, norms,
                       agg, skipped)


# -- personalization ------------------------------------------------------------

def rehearsal_batch(reference: Anonymizer, batch: Batch, copies: int, rng: np.random.Generator) -> Batch:
    """``batch`` plus ``copies`` counterfactual-label decodings from a frozen ``reference`` model.

    Training the decoder on these keeps its private-label conditioning intact when
    the local data only ever shows one private class.
    """
    public, private = reference.check_labels(batch.public, batch.private)
    xs, pubs, privs = [batch.x], [public], [private]
    for _ in range(copies):
        x_star, y_star, _ = shadow_arrays(reference, batch, rng)
        xs.append(x_star)
        pubs.append(public)
        privs.append(y_star)
    return Batch(np.concatenate(xs), np.concatenate(pubs), np.concatenate(privs))


def personalize(model: Anonymizer, adaptation: SegmentSet, iterations: int = 80, local_lr: float = 0.05,
                seed: int = 0, batch: int = 16, shadow: bool = True, rehearsal: int = 3) -> Anonymizer:
    """Fine-tune a copy of ``model`` on a client's adaptation set; the original is untouched.

    ``rehearsal > 0`` adds that many counterfactual copies of each batch, decoded by
    the untouched global model, to the reconstruction loss.
    """
    if len(adaptation) == 0:
        raise EmptyBatch("adaptation set is empty")
    local = model.clone()
    client = ClientDataset("adapt", adaptation, seed)
    rng = stream(seed, "personalize")
    size = min(batch, len(adaptation))
    if rehearsal <= 0:
        local_train(local, client, iterations, size, local_lr, rng, shadow)
        return local
    for _ in range(iterations):
        b = client.batch(client.take(size))
        try:
            z, labels = discriminator_batch(local, b, rng, shadow)
            local.apply_gradients(disc_objective(local, z, labels)[1], local_lr)
            local.apply_gradients(vae_objective(local, rehearsal_batch(model, b, rehearsal, rng), rng)[1], local_lr)
        except (NonFiniteActivation, FloatingPointError) as exc:
            raise NonFiniteLoss(str(exc)) from exc
    if not all(np.all(np.isfinite(v)) for _, v in local.params.items()):
        raise NonFiniteLoss("non-finite parameters after personalization")
    return local
