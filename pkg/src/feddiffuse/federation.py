"""Federated orchestration: rounds, client updates, aggregation and traffic accounting.

Four training methods are supported:

``full``
    broadcast and collect the whole parameter vector (plain FedAvg).
``usplit``
    broadcast the whole vector; each round clients are paired at random and
    each pair reports the encoder, bottleneck and decoder between them.
``ulatdec``
    only bottleneck + decoder are federated; encoders stay local.
``udec``
    only the decoder is federated; encoder and bottleneck stay local.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Partition
from .diffusion import NoiseSchedule
from .errors import ConfigurationError, NumericError
from .model import SEGMENTS, Denoiser, ModelConfig, SegmentLayout, build_denoiser, loss_gradient
from .optim import OPTIMIZERS, OptimizerState, apply_update

log = logging.getLogger(__name__)

METHODS = ("full", "usplit", "ulatdec", "udec")
EXCHANGED = {
    "full": SEGMENTS,
    "usplit": SEGMENTS,
    "ulatdec": ("bottleneck", "decoder"),
    "udec": ("decoder",),
}

# stream tags for the seed hierarchy
_INIT, _PLAN, _SHUFFLE, _ITEM = 1, 2, 3, 4


def derive_seed(master: int, *keys: int) -> int:
    """Child seed for ``keys`` under ``master``; independent of call order."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1, np.uint64)[0])


def epoch_order(seed: int, round_index: int, client: int, epoch: int, n: int) -> np.ndarray:
    """Seeded shuffle of a client's shard for one local epoch."""
    return np.random.default_rng([int(seed), _SHUFFLE, round_index, client, epoch]).permutation(n)


def item_generators(seed: int, round_index: int, client: int, epoch: int, item_ids) -> list[np.random.Generator]:
    """One generator per training example, keyed by the example's dataset index."""
    return [np.random.default_rng([int(seed), _ITEM, round_index, client, epoch, int(i)]) for i in item_ids]


def init_params(model_config: ModelConfig, seed: int) -> Denoiser:
    return build_denoiser(model_config, np.random.default_rng(derive_seed(seed, _INIT)))


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 2
    rounds: int = 15
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    method: str = "full"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.num_clients < 1:
            raise ConfigurationError(f"need at least one client, got {self.num_clients}")
        if self.method == "usplit" and self.num_clients < 2:
            raise ConfigurationError("usplit pairs clients and needs at least 2 of them")
        for name in ("rounds", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr >= 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")


# ---------------------------------------------------------------------------
# USplit task assignment


@dataclass(frozen=True)
class RoundPlan:
    round: int
    assignments: tuple[frozenset, ...]
    pairs: tuple[tuple[int, int], ...] = ()
    leftover: int | None = None

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def reporters(self, segment: str) -> list[int]:
        return [k for k, segs in enumerate(self.assignments) if segment in segs]

    def validate(self) -> None:
        """Raise AssertionError if any USplit assignment invariant is violated."""
        K = self.num_clients
        seen = sorted([k for p in self.pairs for k in p] + ([self.leftover] if self.leftover is not None else []))
        assert seen == list(range(K)), f"pairs/leftover do not cover clients exactly once: {seen}"
        assert len(self.pairs) == K // 2
        assert (self.leftover is None) == (K % 2 == 0)
        for a, b in self.pairs:
            sa, sb = self.assignments[a], self.assignments[b]
            assert {("encoder" in sa), ("encoder" in sb)} == {True, False}, "one pair member reports the encoder"
            assert {("decoder" in sa), ("decoder" in sb)} == {True, False}, "one pair member reports the decoder"
            assert ("encoder" in sa) != ("decoder" in sa), "a paired client reports exactly one of encoder/decoder"
            assert ("bottleneck" in sa) != ("bottleneck" in sb), "exactly one pair member reports the bottleneck"
        if self.leftover is not None:
            s = self.assignments[self.leftover]
            assert "bottleneck" in s and len(s) == 2 and ("encoder" in s) != ("decoder" in s)
        for seg in SEGMENTS:
            assert self.reporters(seg), f"no reporter for {seg}"


def assign_usplit_tasks(num_clients: int, rng: np.random.Generator, round_index: int = 0) -> RoundPlan:
    """Random pairing; one member reports encoder, the other decoder, a random one also the bottleneck.

    With an odd client count the unpaired client reports the bottleneck plus a
    random one of encoder/decoder.
    """
    if num_clients < 2:
        raise ConfigurationError(f"usplit needs at least 2 clients, got {num_clients}")
    order = rng.permutation(num_clients)
    tasks: list[set] = [set() for _ in range(num_clients)]
    pairs = []
    for i in range(0, num_clients - 1, 2):
        a, b = int(order[i]), int(order[i + 1])
        enc, dec = (a, b) if rng.random() < 0.5 else (b, a)
        tasks[enc].add("encoder")
        tasks[dec].add("decoder")
        tasks[a if rng.random() < 0.5 else b].add("bottleneck")
        pairs.append((a, b))
    leftover = None
    if num_clients % 2:
        leftover = int(order[-1])
        tasks[leftover] |= {"bottleneck", "encoder" if rng.random() < 0.5 else "decoder"}
    return RoundPlan(round_index, tuple(frozenset(t) for t in tasks), tuple(pairs), leftover)


# ---------------------------------------------------------------------------
# aggregation


def aggregate_full(updates: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Dataset-size weighted average of client vectors.

    Computed as an offset from the first update, so identical inputs come back
    bit-for-bit; the result is clamped to the per-coordinate client range.
    """
    if not updates:
        raise ConfigurationError("no client updates to aggregate")
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != len(updates):
        raise ValueError(f"{len(updates)} updates but {len(sizes)} sizes")
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ConfigurationError(f"aggregation weights must be non-negative with positive total, got {sizes.tolist()}")
    stack = [np.asarray(u, dtype=np.float64) for u in updates]
    if any(u.shape != stack[0].shape for u in stack):
        raise ValueError("client updates differ in length")
    weights = sizes / sizes.sum()
    base = stack[0]
    out = base.copy()
    for w, u in zip(weights, stack):
        if w > 0 and u is not base:
            out += w * (u - base)
    if len(stack) > 1:
        lo = np.minimum.reduce([u for u, w in zip(stack, weights) if w > 0])
        hi = np.maximum.reduce([u for u, w in zip(stack, weights) if w > 0])
        np.clip(out, lo, hi, out=out)
    return out


def aggregate_split(updates: Sequence[np.ndarray], plan: RoundPlan, sizes: Sequence[int],
                    layout: SegmentLayout) -> np.ndarray:
    """Per segment, weighted average over that segment's reporters only."""
    if len(updates) != plan.num_clients:
        raise ValueError(f"{len(updates)} updates for a plan over {plan.num_clients} clients")
    out = np.empty(layout.total, dtype=np.float64)
    for seg in SEGMENTS:
        who = plan.reporters(seg)
        if not who or sum(sizes[k] for k in who) <= 0:
            raise ConfigurationError(f"segment {seg} has no reporter with data in round {plan.round}")
        sl = layout.slice(seg)
        out[sl] = aggregate_full([np.asarray(updates[k])[sl] for k in who], [sizes[k] for k in who])
    return out


# ---------------------------------------------------------------------------
# communication ledger


@dataclass
class CommLedger:
    records: list[tuple[int, int, str, str, int]] = field(default_factory=list)

    def record(self, round_index: int, client: int, direction: str, segment: str, count: int) -> None:
        if direction not in ("download", "upload"):
            raise ValueError(f"direction must be download or upload, got {direction!r}")
        if count < 0:
            raise ValueError("parameter counts are non-negative")
        self.records.append((round_index, client, direction, segment, int(count)))

    @property
    def total(self) -> int:
        return sum(r[4] for r in self.records)

    def round_total(self, round_index: int) -> int:
        return sum(r[4] for r in self.records if r[0] == round_index)

    def cumulative(self) -> list[int]:
        rounds = sorted({r[0] for r in self.records})
        acc, out = 0, []
        for r in rounds:
            acc += self.round_total(r)
            out.append(acc)
        return out

    def direction_total(self, direction: str) -> int:
        return sum(r[4] for r in self.records if r[2] == direction)

    def to_dict(self) -> dict:
        rounds: dict = {}
        for r, k, direction, seg, n in self.records:
            slot = rounds.setdefault(str(r), {}).setdefault(str(k), {"download": {}, "upload": {}})
            slot[direction][seg] = slot[direction].get(seg, 0) + n
        return {"total": self.total, "cumulative": self.cumulative(), "rounds": rounds}

    def write_json(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        tmp.replace(path)


def expected_traffic(method: str, num_clients: int, rounds: int, layout: SegmentLayout,
                     plans: Sequence[RoundPlan] | None = None) -> int:
    """Closed-form total number of transferred parameters.

    USplit with an odd client count depends on the realised plans (the unpaired
    client uploads either encoder or decoder), so ``plans`` is required there.
    """
    P, K, R = layout.total, num_clients, rounds
    if method == "full":
        return 2 * R * K * P
    if method == "udec":
        return 2 * R * K * layout.size("decoder")
    if method == "ulatdec":
        return 2 * R * K * (layout.size("decoder") + layout.size("bottleneck"))
    if method == "usplit":
        if plans is None:
            if K % 2:
                raise ValueError("odd-K usplit traffic depends on the realised plans; pass them")
            return R * K * P + R * (K // 2) * P
        if len(plans) != R:
            raise ValueError(f"expected {R} plans, got {len(plans)}")
        uploads = sum(layout.size(s) for plan in plans for segs in plan.assignments for s in segs)
        return R * K * P + uploads
    raise ConfigurationError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# clients


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    images: np.ndarray  # (n, c, h, w) in [-1, 1]
    params: np.ndarray
    model_config: ModelConfig
    layout: SegmentLayout

    @property
    def size(self) -> int:
        return len(self.indices)


def _initial_local(state: ClientState, incoming, method: str) -> np.ndarray:
    if isinstance(incoming, dict):
        params = np.array(state.params, dtype=np.float64)
        for seg, values in incoming.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (state.layout.size(seg),):
                raise ValueError(f"incoming {seg} has shape {values.shape}, expected ({state.layout.size(seg)},)")
            params[state.layout.slice(seg)] = values
        return params
    incoming = np.array(incoming, dtype=np.float64)
    if incoming.shape != (state.layout.total,):
        raise ValueError(f"incoming vector has shape {incoming.shape}, expected ({state.layout.total},)")
    return incoming


def client_update(state: ClientState, incoming, cfg: FederationConfig, sched: NoiseSchedule,
                  round_index: int = 1) -> tuple[np.ndarray, float]:
    """Local training for one round.

    ``incoming`` is a full parameter vector (full/usplit) or a mapping from
    segment name to values (udec/ulatdec); in the latter case the remaining
    segments keep the client's own values.  Returns the updated full local
    vector and the mean mini-batch loss (nan for an empty shard).
    """
    params = _initial_local(state, incoming, cfg.method)
    if state.size == 0:
        log.warning("client %d has an empty shard; skipping local training", state.client_id)
        state.params = params
        return params, float("nan")
    template = Denoiser(state.model_config, params, state.layout)
    opt = OptimizerState.create(cfg.optimizer, cfg.lr, params.size)
    losses = []
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, round_index, state.client_id, epoch, state.size)
        for start in range(0, state.size, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            rngs = item_generators(cfg.seed, round_index, state.client_id, epoch, state.indices[sel])
            loss, grad = loss_gradient(template.with_params(params), state.images[sel], sched, rngs)
            params, opt = apply_update(params, grad, opt)
            losses.append(loss)
    if not np.all(np.isfinite(params)):
        raise NumericError(f"non-finite parameters after round {round_index} on client {state.client_id}")
    state.params = params
    return params, float(np.mean(losses))


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RoundMetrics:
    round: int
    method: str
    mean_loss: float
    client_losses: list[float]
    cumulative_traffic: int


@dataclass
class TrainingResult:
    method: str
    global_params: np.ndarray
    client_params: list[np.ndarray]
    ledger: CommLedger
    metrics: list[RoundMetrics]
    plans: list[RoundPlan]
    model_config: ModelConfig | None = None
    layout: SegmentLayout | None = None

    @property
    def global_model(self) -> Denoiser:
        return Denoiser(self.model_config, self.global_params, self.layout)

    @property
    def client_models(self) -> list[Denoiser]:
        """Composed per-client models: local segments plus the final global segments."""
        return [Denoiser(self.model_config, p, self.layout) for p in self.client_params]

    def scored_models(self) -> Denoiser | list[Denoiser]:
        return self.client_models if self.method in ("udec", "ulatdec") else self.global_model


LocalStep = Callable[[int, int, object], tuple[np.ndarray, float]]


def federate(cfg: FederationConfig, layout: SegmentLayout, theta0: np.ndarray, sizes: Sequence[int],
             local_step: LocalStep, client_params: list[np.ndarray] | None = None,
             on_round: Callable | None = None) -> TrainingResult:
    """The round loop: broadcast, local steps, upload, aggregate, account.

    ``local_step(client, round, incoming)`` performs a client's local work and
    returns its full local vector and mean loss.  ``on_round(round, theta,
    client_params)`` is called after each aggregation, e.g. for checkpoints.
    """
    K, method = cfg.num_clients, cfg.method
    if len(sizes) != K:
        raise ConfigurationError(f"partition has {len(sizes)} shards but {K} clients are configured")
    theta = np.array(theta0, dtype=np.float64)
    exchanged = EXCHANGED[method]
    ledger, metrics, plans = CommLedger(), [], []
    if client_params is None:
        client_params = [theta.copy() for _ in range(K)]
    for r in range(1, cfg.rounds + 1):
        plan = None
        if method == "usplit":
            plan = assign_usplit_tasks(K, np.random.default_rng(derive_seed(cfg.seed, _PLAN, r)), r)
            plans.append(plan)
        updates, losses = [], []
        for k in range(K):
            for seg in exchanged:
                ledger.record(r, k, "download", seg, layout.size(seg))
            if method in ("full", "usplit"):
                incoming = theta.copy()
            else:
                incoming = {seg: theta[layout.slice(seg)].copy() for seg in exchanged}
            params, loss = local_step(k, r, incoming)
            updates.append(params)
            losses.append(loss)
            client_params[k] = params
        # barrier: uploads and aggregation
        if method == "usplit":
            for k, segs in enumerate(plan.assignments):
                for seg in SEGMENTS:
                    if seg in segs:
                        ledger.record(r, k, "upload", seg, layout.size(seg))
            theta = aggregate_split(updates, plan, sizes, layout)
        else:
            for k in range(K):
                for seg in exchanged:
                    ledger.record(r, k, "upload", seg, layout.size(seg))
            if method == "full":
                theta = aggregate_full(updates, sizes)
            else:
                for seg in exchanged:
                    sl = layout.slice(seg)
                    theta[sl] = aggregate_full([u[sl] for u in updates], sizes)
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"non-finite global parameters after aggregation in round {r}")
        finite = [l for l in losses if not math.isnan(l)]
        metrics.append(RoundMetrics(r, method, float(np.mean(finite)) if finite else float("nan"),
                                    [float(l) for l in losses], ledger.total))
        if on_round is not None:
            on_round(r, theta, client_params)
    if method in ("udec", "ulatdec"):
        composed = []
        for p in client_params:
            p = np.array(p, dtype=np.float64)
            for seg in exchanged:
                p[layout.slice(seg)] = theta[layout.slice(seg)]
            composed.append(p)
    else:
        composed = [theta.copy() for _ in range(K)]
    return TrainingResult(method, theta, composed, ledger, metrics, plans, layout=layout)


def build_clients(ds: Dataset, partition: Partition, model_config: ModelConfig, theta0: np.ndarray,
                  layout: SegmentLayout) -> list[ClientState]:
    return [ClientState(k, np.asarray(idx, dtype=np.int64), ds.as_float(idx), np.array(theta0), model_config, layout)
            for k, idx in enumerate(partition.shards)]


def run_training(cfg: FederationConfig, ds: Dataset, partition: Partition, sched: NoiseSchedule,
                 model_config: ModelConfig, init: Denoiser | None = None,
                 on_round: Callable | None = None) -> TrainingResult:
    """Train a denoiser with the configured federated method.

    All clients start from the same seeded initial model.  Returns the global
    parameters, each client's composed model, the traffic ledger and per-round
    metrics.
    """
    if len(partition.shards) != cfg.num_clients:
        raise ConfigurationError(
            f"partition has {len(partition.shards)} shards but {cfg.num_clients} clients are configured")
    if ds.image_size != model_config.image_size:
        raise ConfigurationError(f"dataset images are {ds.image_size}px, model expects {model_config.image_size}px")
    d0 = init or init_params(model_config, cfg.seed)
    clients = build_clients(ds, partition, model_config, d0.params, d0.layout)

    def local_step(k, r, incoming):
        return client_update(clients[k], incoming, cfg, sched, r)

    result = federate(cfg, d0.layout, d0.params, partition.sizes, local_step, on_round=on_round)
    result.model_config = model_config
    return result


def simulate_traffic(method: str, num_clients: int, rounds: int, layout: SegmentLayout,
                     seed: int = 0) -> TrainingResult:
    """Run the protocol with no-op clients on zero vectors of the layout's length.

    Exercises the same broadcast/upload/aggregation path as :func:`run_training`
    without any training, for traffic accounting at full model scale.
    """
    cfg = FederationConfig(num_clients=num_clients, rounds=rounds, epochs=1, method=method, seed=seed)
    theta0 = np.zeros(layout.total)

    def local_step(k, r, incoming):
        if isinstance(incoming, dict):
            return theta0, 0.0
        return incoming, 0.0

    return federate(cfg, layout, theta0, [1] * num_clients, local_step, client_params=[theta0] * num_clients)


REFERENCE_PARAMETER_COUNT = 2_996_315


def reference_layout() -> SegmentLayout:
    """Segment sizes of a 2,996,315-parameter three-level UNet (ConvNeXt blocks).

    |dec| = 792,333 and |dec| + |bot| = 1,758,333, i.e. the UDec and ULatDec
    traffic totals of 47.54e6 and 105.50e6 at K=2, R=15 divided by 2RK.
    """
    dec = 792_333
    bot = 1_758_333 - dec
    return SegmentLayout.from_sizes(REFERENCE_PARAMETER_COUNT - dec - bot, bot, dec)
