"""Split-network VFL: party/coordinator models, the split exchange and FedAvg."""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import (
    Callable,
    Dict,
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from vflunlearn.data import ClientDataset, Party, VerticalBatch, VerticalSample
from vflunlearn.exceptions import ArgumentError, DimensionError
from vflunlearn.logger import Logger
from vflunlearn.numcore import (
    ActivationCache,
    LayerSpec,
    Network,
    ParamVector,
    backward,
    conv,
    dropout,
    fc,
    forward,
    maxpool,
    output_shape,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from vflunlearn.utils import MetricsRecord, derive_seed

ArchitectureName = Literal["cnn", "alexnet", "mlp"]

# (clean accuracy, backdoor accuracy) of a model; either may be None
Evaluator = Callable[["SplitModel"], Tuple[Optional[float], Optional[float]]]


class TrainConfig(BaseModel):
    """Federated training hyper-parameters (N, E, m, eta and the participant set)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_clients: int = Field(5, ge=1)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    seed: int = 0
    participants: Optional[Tuple[int, ...]] = None
    workers: int = Field(1, ge=1)

    def active(self) -> Tuple[int, ...]:
        """Participating client ids, ascending. ``None`` means every client."""
        if self.participants is None:
            return tuple(range(1, self.num_clients + 1))
        return tuple(sorted(set(self.participants)))

    def without(self, client_id: int) -> "TrainConfig":
        remaining = tuple(c for c in self.active() if c != client_id)
        return self.model_copy(update={"participants": remaining})


@dataclass(frozen=True)
class SplitArchitecture:
    """Party A, party B and coordinator networks of one SplitNN."""

    party_a: Network
    party_b: Network
    coordinator: Network

    def __post_init__(self):
        fused = self.width_a + self.width_b
        if self.coordinator.input_shape != (fused,):
            raise DimensionError(
                f"coordinator takes {self.coordinator.input_shape}, "
                f"parties emit {self.width_a} + {self.width_b}"
            )

    @property
    def width_a(self) -> int:
        return math.prod(self.party_a.output_shape)

    @property
    def width_b(self) -> int:
        return math.prod(self.party_b.output_shape)

    @property
    def num_params(self) -> int:
        return (
            self.party_a.num_params
            + self.party_b.num_params
            + self.coordinator.num_params
        )

    def initialize(self, rng: np.random.Generator) -> "SplitModel":
        return SplitModel(
            arch=self,
            w_a=self.party_a.init_params(rng),
            w_b=self.party_b.init_params(rng),
            w_c=self.coordinator.init_params(rng),
        )

    def zeros(self) -> "SplitModel":
        return self.from_flat(np.zeros(self.num_params))

    def from_flat(self, values: ParamVector) -> "SplitModel":
        if values.shape != (self.num_params,):
            raise DimensionError(
                f"flat vector has shape {values.shape}, model needs ({self.num_params},)"
            )
        a = self.party_a.num_params
        b = a + self.party_b.num_params
        return SplitModel(arch=self, w_a=values[:a], w_b=values[a:b], w_c=values[b:])


@dataclass(frozen=True)
class SplitModel:
    """The parameter triple (W_A, W_B, W_C). Also used for gradient triples."""

    arch: SplitArchitecture
    w_a: ParamVector
    w_b: ParamVector
    w_c: ParamVector

    def __post_init__(self):
        for name, net, values in (
            ("w_a", self.arch.party_a, self.w_a),
            ("w_b", self.arch.party_b, self.w_b),
            ("w_c", self.arch.coordinator, self.w_c),
        ):
            if values.shape != (net.num_params,):
                raise DimensionError(
                    f"{name} has shape {values.shape}, network needs ({net.num_params},)"
                )

    @property
    def blocks(self) -> Tuple[ParamVector, ParamVector, ParamVector]:
        return self.w_a, self.w_b, self.w_c

    def flatten(self) -> ParamVector:
        return np.concatenate(self.blocks)

    def apply(self, fn: Callable[..., ParamVector], *others: "SplitModel") -> "SplitModel":
        """Combine this model block-by-block with ``others`` through ``fn``."""
        for other in others:
            if other.arch != self.arch:
                raise DimensionError("split models have different architectures")
        blocks = [
            fn(*parts)
            for parts in zip(self.blocks, *(o.blocks for o in others))
        ]
        return SplitModel(self.arch, *blocks)


@dataclass(frozen=True)
class RoundMessage:
    """A model snapshot travelling between the server and one client."""

    direction: Literal["up", "down"]
    round_index: int
    payload: SplitModel
    client_id: Optional[int] = None


@dataclass
class SplitCache:
    logits: np.ndarray
    party_a: ActivationCache
    party_b: ActivationCache
    coordinator: ActivationCache
    shape_a: Tuple[int, ...]
    shape_b: Tuple[int, ...]


@dataclass
class FedAvgResult:
    model: SplitModel
    metrics: List[MetricsRecord] = field(default_factory=list)
    # each client's last pre-aggregation model, keyed by client id
    history: Dict[int, SplitModel] = field(default_factory=dict)


def cnn_party_layers(in_channels: int) -> List[LayerSpec]:
    return [
        conv(in_channels, 32, 3, padding=1),
        maxpool(2),
        conv(32, 64, 3, padding=1),
        maxpool(2),
    ]


def alexnet_party_layers(in_channels: int) -> List[LayerSpec]:
    channels = [in_channels, 64, 192, 384, 256, 256]
    # the last two pools are 1x1 so a 32x16 half ends at 256x4x2
    pools = [2, 2, 2, 1, 1]
    layers: List[LayerSpec] = []
    for i, pool in enumerate(pools):
        layers += [conv(channels[i], channels[i + 1], 3, padding=1), relu(), maxpool(pool)]
    return layers


def build_architecture(
    name: ArchitectureName,
    left_shape: Tuple[int, ...],
    right_shape: Tuple[int, ...],
    num_classes: int = 10,
    hidden: int = 32,
) -> SplitArchitecture:
    """Build one of the supported split architectures for the given half shapes.

    - ``cnn``: two conv + max-pool stages per party, FC(·,128)+ReLU+FC(128,classes)
      at the coordinator.
    - ``alexnet``: five conv + ReLU + max-pool stages per party, two FC(4096)
      + dropout + ReLU layers and a classifier at the coordinator.
    - ``mlp``: one dense layer per party and a two-layer coordinator; used for
      fast runs.
    """
    if name == "cnn":
        layers_a = cnn_party_layers(left_shape[0])
        layers_b = cnn_party_layers(right_shape[0])
    elif name == "alexnet":
        layers_a = alexnet_party_layers(left_shape[0])
        layers_b = alexnet_party_layers(right_shape[0])
    elif name == "mlp":
        layers_a = [fc(math.prod(left_shape), hidden), relu()]
        layers_b = [fc(math.prod(right_shape), hidden), relu()]
    else:
        raise ArgumentError(f"unknown architecture {name!r}")

    party_a = Network(layers_a, left_shape)
    party_b = Network(layers_b, right_shape)
    fused = math.prod(output_shape(layers_a, left_shape)) + math.prod(
        output_shape(layers_b, right_shape)
    )
    if name == "cnn":
        head = [fc(fused, 128), relu(), fc(128, num_classes)]
    elif name == "alexnet":
        head = [
            fc(fused, 4096),
            dropout(0.5),
            relu(),
            fc(4096, 4096),
            dropout(0.5),
            relu(),
            fc(4096, num_classes),
        ]
    else:
        head = [fc(fused, hidden), relu(), fc(hidden, num_classes)]
    return SplitArchitecture(party_a, party_b, Network(head, (fused,)))


def _as_batch(samples: Union[VerticalBatch, VerticalSample]) -> VerticalBatch:
    if isinstance(samples, VerticalSample):
        return VerticalBatch.from_samples([samples])
    return samples


def split_forward(
    model: SplitModel,
    samples: Union[VerticalBatch, VerticalSample],
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, SplitCache]:
    """Forward pass L_C = f_C([f_A(x_A) ⊕ f_B(x_B)]).

    Party A's output occupies the first block of the coordinator input.
    """
    batch = _as_batch(samples)
    arch = model.arch
    out_a, cache_a = forward(arch.party_a, model.w_a, batch.left, training, rng)
    out_b, cache_b = forward(arch.party_b, model.w_b, batch.right, training, rng)
    n = len(batch)
    fused = np.concatenate([out_a.reshape(n, -1), out_b.reshape(n, -1)], axis=1)
    logits, cache_c = forward(arch.coordinator, model.w_c, fused, training, rng)
    return logits, SplitCache(
        logits=logits,
        party_a=cache_a,
        party_b=cache_b,
        coordinator=cache_c,
        shape_a=out_a.shape,
        shape_b=out_b.shape,
    )


def split_backward(
    model: SplitModel, caches: SplitCache, labels
) -> Tuple[SplitModel, float]:
    """Backward pass of the batch-mean cross-entropy.

    The coordinator's input gradient is cut into the A block and the B block,
    which each party then pushes through its own network.

    Returns:
        The gradient triple (shaped like a SplitModel) and the loss.
    """
    arch = model.arch
    loss, grad_logits = softmax_cross_entropy(caches.logits, labels)
    grad_c, grad_fused = backward(arch.coordinator, model.w_c, caches.coordinator, grad_logits)
    grad_out_a = grad_fused[:, : arch.width_a].reshape(caches.shape_a)
    grad_out_b = grad_fused[:, arch.width_a :].reshape(caches.shape_b)
    grad_a, _ = backward(arch.party_a, model.w_a, caches.party_a, grad_out_a)
    grad_b, _ = backward(arch.party_b, model.w_b, caches.party_b, grad_out_b)
    return SplitModel(arch, grad_a, grad_b, grad_c), loss


def local_epoch(
    model: SplitModel, client: ClientDataset, batch_size: int, lr: float, seed: int
) -> SplitModel:
    """One shuffled pass of mini-batch SGD over a client's data, on all three blocks."""
    n = len(client)
    if n == 0:
        Logger.train.warning(f"Client {client.client_id} has no samples, skipping epoch")
        return model
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = client.samples[order[start : start + batch_size]]
        _, caches = split_forward(model, batch, training=True, rng=rng)
        grads, _ = split_backward(model, caches, batch.labels)
        model = model.apply(lambda w, g: sgd_step(w, g, lr), grads)
    return model


def aggregate(models: Union[Mapping[int, SplitModel], Sequence[SplitModel]]) -> SplitModel:
    """Elementwise mean of client models, summed in ascending client-id order.

    A plain sequence is treated as already ordered by position.
    """
    if not isinstance(models, Mapping):
        models = dict(enumerate(models))
    if not models:
        raise ArgumentError("cannot aggregate an empty set of models")
    ordered = [models[cid] for cid in sorted(models)]
    first = ordered[0]
    return first.apply(
        lambda *blocks: np.mean(np.stack(blocks), axis=0), *ordered[1:]
    )


class FedAvgServer:
    """Server side of federated averaging: broadcast, collect, aggregate."""

    def __init__(self, model: SplitModel, participants: Sequence[int]):
        self.model = model
        self.participants = tuple(sorted(participants))

    def broadcast(self, round_index: int) -> RoundMessage:
        return RoundMessage(direction="down", round_index=round_index, payload=self.model)

    def receive(self, messages: Sequence[RoundMessage]) -> SplitModel:
        senders = sorted(m.client_id for m in messages)
        if tuple(senders) != self.participants:
            raise ArgumentError(
                f"round updates came from {senders}, expected {list(self.participants)}"
            )
        self.model = aggregate({m.client_id: m.payload for m in messages})
        return self.model


class FedAvgClient:
    """Client side: trains a full local copy of the split model each round."""

    def __init__(self, dataset: ClientDataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg

    @property
    def client_id(self) -> int:
        return self.dataset.client_id

    def run_round(self, message: RoundMessage) -> RoundMessage:
        seed = derive_seed(self.cfg.seed, "local", self.client_id, message.round_index)
        local = local_epoch(
            message.payload, self.dataset, self.cfg.batch_size, self.cfg.lr, seed
        )
        return RoundMessage(
            direction="up",
            round_index=message.round_index,
            payload=local,
            client_id=self.client_id,
        )


def initial_model(cfg: TrainConfig, architecture: SplitArchitecture) -> SplitModel:
    return architecture.initialize(np.random.default_rng(derive_seed(cfg.seed, "init")))


def train_fedavg(
    cfg: TrainConfig,
    architecture: SplitArchitecture,
    clients: Sequence[ClientDataset],
    evaluator: Optional[Evaluator] = None,
    initial: Optional[SplitModel] = None,
    phase: str = "fedavg",
) -> FedAvgResult:
    """Run ``cfg.epochs`` rounds of vertical FedAvg.

    Every round the server broadcasts the global model, each participant runs
    one local epoch, and the server averages the returned models. Clients may
    train on a thread pool (``cfg.workers``); the result does not depend on it.

    Args:
        cfg: Training configuration.
        architecture: The split architecture, used for fresh initialisation.
        clients: Client datasets; only ``cfg.active()`` ids take part.
        evaluator: Called on the global model after each round.
        initial: Starting model; a seeded random model when omitted.
        phase: Label written into the metrics records.

    Returns:
        FedAvgResult: final model, one metrics record per round and the last
        pre-aggregation model of every participant.

    Raises:
        ArgumentError: If the participant set is empty or names unknown clients.
    """
    participants = cfg.active()
    if not participants:
        raise ArgumentError("participant set is empty")
    by_id = {c.client_id: c for c in clients}
    unknown = [cid for cid in participants if cid not in by_id]
    if unknown:
        raise ArgumentError(f"participants {unknown} have no dataset")

    server = FedAvgServer(initial or initial_model(cfg, architecture), participants)
    workers = [FedAvgClient(by_id[cid], cfg) for cid in participants]
    result = FedAvgResult(model=server.model)

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for k in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            down = server.broadcast(k)
            run = partial(FedAvgClient.run_round, message=down)
            ups = list(pool.map(run, workers) if pool else map(run, workers))
            for up in ups:
                result.history[up.client_id] = up.payload
            model = server.receive(ups)
            record = MetricsRecord(
                round=k, phase=phase, wall_ms=(time.perf_counter() - start) * 1000.0
            )
            if evaluator is not None:
                record.clean_acc, record.backdoor_acc = evaluator(model)
            result.metrics.append(record)
            Logger.train.info(
                f"{phase} round {k}/{cfg.epochs}: clients={list(participants)} "
                f"clean={record.clean_acc} backdoor={record.backdoor_acc}"
            )
    finally:
        if pool is not None:
            pool.shutdown()

    result.model = server.model
    return result


def retrain_without_target(
    cfg: TrainConfig,
    architecture: SplitArchitecture,
    clients: Sequence[ClientDataset],
    target_id: int,
    selected_party: Party,
    evaluator: Optional[Evaluator] = None,
) -> FedAvgResult:
    """Retrain from a fresh initialisation with the target client left out."""
    Logger.train.info(
        f"Retraining without client {target_id} (selected party {selected_party})"
    )
    return train_fedavg(
        cfg.without(target_id), architecture, clients, evaluator=evaluator, phase="retrain"
    )
