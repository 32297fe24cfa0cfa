"""Dataset ingestion, vertical splitting, client partitioning and backdoors."""

import gzip
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterator, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from vflunlearn.exceptions import ArgumentError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

Party = Literal["A", "B"]


@dataclass(frozen=True)
class RawDataset:
    """Images ``(n, channels, height, width)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be 4-D, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ArgumentError(
                f"{len(self.labels)} labels for {len(self.images)} images in {self.name}"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ArgumentError(f"labels of {self.name} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, limit: Optional[int], offset: int = 0) -> "RawDataset":
        """At most ``limit`` samples starting at ``offset``; ``None`` means all the rest."""
        if offset == 0 and (limit is None or limit >= len(self)):
            return self
        stop = None if limit is None else offset + limit
        return replace(self, images=self.images[offset:stop], labels=self.labels[offset:stop])


@dataclass(frozen=True)
class VerticalSample:
    left: np.ndarray
    right: np.ndarray
    label: int
    poisoned: bool


@dataclass(frozen=True)
class VerticalBatch:
    """Column-wise collection of vertically split samples.

    ``left`` holds party A's halves, ``right`` party B's; both keep the
    leading sample axis so slices can be fed straight into the networks.
    """

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index) -> "VerticalBatch":
        if isinstance(index, (int, np.integer)):
            index = [index]
        return VerticalBatch(
            left=self.left[index],
            right=self.right[index],
            labels=self.labels[index],
            poisoned=self.poisoned[index],
        )

    def __iter__(self) -> Iterator[VerticalSample]:
        for i in range(len(self)):
            yield VerticalSample(
                left=self.left[i],
                right=self.right[i],
                label=int(self.labels[i]),
                poisoned=bool(self.poisoned[i]),
            )

    @property
    def left_shape(self) -> Tuple[int, ...]:
        return tuple(self.left.shape[1:])

    @property
    def right_shape(self) -> Tuple[int, ...]:
        return tuple(self.right.shape[1:])

    def half(self, party: Party) -> np.ndarray:
        return self.left if party == "A" else self.right

    @classmethod
    def from_samples(cls, samples: List[VerticalSample]) -> "VerticalBatch":
        return cls(
            left=np.stack([s.left for s in samples]),
            right=np.stack([s.right for s in samples]),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            poisoned=np.array([s.poisoned for s in samples], dtype=bool),
        )


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    samples: VerticalBatch

    @property
    def poison_count(self) -> int:
        return int(self.samples.poisoned.sum())

    def __len__(self) -> int:
        return len(self.samples)


class BackdoorSpec(BaseModel):
    """Trigger geometry and poisoning rule.

    ``trigger_origin`` is the (row, col) of the trigger's top-left pixel
    inside the selected party's half; ``None`` places it in the bottom-right
    corner of that half.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    trigger_size: int = Field(3, gt=0)
    trigger_origin: Optional[Tuple[int, int]] = None
    trigger_value: float = Field(1.0, ge=0.0, le=1.0)
    target_label: int = Field(8, ge=0)
    poison_fraction: float = Field(0.8, ge=0.0, le=1.0)
    selected_party: Party = "B"

    def origin_for(self, half_shape: Tuple[int, ...]) -> Tuple[int, int]:
        """Resolve the trigger origin for a half of shape ``(channels, h, w)``."""
        _, height, width = half_shape
        size = self.trigger_size
        row, col = self.trigger_origin or (height - size, width - size)
        if row < 0 or col < 0 or row + size > height or col + size > width:
            raise ArgumentError(
                f"{size}x{size} trigger at ({row}, {col}) does not fit a {height}x{width} half"
            )
        return row, col


def _open(path: str):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path: str, magic: int, header_dims: int) -> Tuple[Tuple[int, ...], bytes]:
    with _open(path) as f:
        raw = f.read()
    header_size = 4 * (1 + header_dims)
    if len(raw) < header_size:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(
            f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0
        )
    dims = struct.unpack(f">{header_dims}I", raw[4:header_size])
    expected = header_size + math.prod(dims)
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload, need {expected} bytes, have {len(raw)}",
            offset=len(raw),
        )
    return dims, raw[header_size:expected]


def load_idx(images_path: str, labels_path: str, name: str = "idx") -> RawDataset:
    """Decode an IDX image/label file pair (MNIST, Fashion-MNIST).

    Files ending in ``.gz`` are decompressed transparently. Pixels are divided
    by 255.

    Raises:
        FormatError: On a bad magic number, truncated file or count mismatch.
    """
    (n, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_labels != n:
        raise FormatError(
            f"{labels_path}: {n_labels} labels for {n} images", offset=4
        )
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return RawDataset(images=images / 255.0, labels=labels, name=name)


def load_cifar_batch(path: str, name: str = "cifar10") -> RawDataset:
    """Decode one CIFAR-10 binary batch (label byte followed by 3072 pixel bytes)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD_BYTES:
        whole = len(raw) - len(raw) % CIFAR_RECORD_BYTES
        raise FormatError(f"{path}: trailing partial record", offset=whole)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return RawDataset(images=images, labels=labels, name=name)


def concat_datasets(parts: List[RawDataset], name: str) -> RawDataset:
    return RawDataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        name=name,
        num_classes=parts[0].num_classes,
    )


def synth_dataset(
    seed: int,
    n: int,
    num_classes: int = 10,
    height: int = 28,
    width: int = 28,
    channels: int = 1,
    noise: float = 0.1,
) -> RawDataset:
    """Class-conditional Gaussian blob images.

    Every class gets a prototype made of three Gaussian bumps at random
    positions; samples are the prototype plus pixel noise, clipped to [0, 1].
    Labels cycle through the classes before shuffling, so counts differ by at
    most one.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    prototypes = np.zeros((num_classes, channels, height, width))
    for c in range(num_classes):
        for _ in range(3):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            sigma = rng.uniform(0.1, 0.25) * min(height, width)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            prototypes[c] += bump[None, :, :]
        prototypes[c] /= prototypes[c].max()

    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(n, channels, height, width))
    return RawDataset(
        images=np.clip(images, 0.0, 1.0),
        labels=labels,
        name=f"synth-{seed}",
        num_classes=num_classes,
    )


def vertical_split(dataset: RawDataset) -> VerticalBatch:
    """Give party A columns [0, ceil(w/2)) and party B the remaining columns."""
    width = dataset.images.shape[3]
    cut = (width + 1) // 2
    return VerticalBatch(
        left=dataset.images[:, :, :, :cut].copy(),
        right=dataset.images[:, :, :, cut:].copy(),
        labels=dataset.labels.copy(),
        poisoned=np.zeros(len(dataset), dtype=bool),
    )


def partition_clients(samples: VerticalBatch, num_clients: int, seed: int) -> List[ClientDataset]:
    """Shuffle and deal samples into ``num_clients`` disjoint shards with ids 1..N."""
    if num_clients < 1:
        raise ArgumentError("need at least one client")
    order = np.random.default_rng(seed).permutation(len(samples))
    shards = np.array_split(order, num_clients)
    return [
        ClientDataset(client_id=i + 1, samples=samples[np.sort(shard)])
        for i, shard in enumerate(shards)
    ]


def _stamp(half: np.ndarray, rows: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    row, col = spec.origin_for(half.shape[1:])
    size = spec.trigger_size
    stamped = half.copy()
    stamped[rows, :, row : row + size, col : col + size] = spec.trigger_value
    return stamped


def inject_backdoor(client: ClientDataset, spec: BackdoorSpec, seed: int) -> ClientDataset:
    """Poison a seeded fraction of the client's non-target samples.

    The trigger is stamped only into the selected party's half; the other
    half is left bitwise untouched. The number of poisoned samples is
    ``floor(poison_fraction * eligible + 0.5)``.
    """
    samples = client.samples
    spec.origin_for(samples.half(spec.selected_party).shape[1:])

    eligible = np.flatnonzero(samples.labels != spec.target_label)
    count = int(math.floor(spec.poison_fraction * len(eligible) + 0.5))
    chosen = np.sort(
        np.random.default_rng(seed).choice(eligible, size=count, replace=False)
    )

    labels = samples.labels.copy()
    labels[chosen] = spec.target_label
    poisoned = samples.poisoned.copy()
    poisoned[chosen] = True
    if spec.selected_party == "A":
        left, right = _stamp(samples.left, chosen, spec), samples.right
    else:
        left, right = samples.left, _stamp(samples.right, chosen, spec)

    return ClientDataset(
        client_id=client.client_id,
        samples=VerticalBatch(left=left, right=right, labels=labels, poisoned=poisoned),
    )


def build_backdoor_testset(test: RawDataset, spec: BackdoorSpec) -> VerticalBatch:
    """Trigger every test sample whose true label is not the target and relabel it."""
    split = vertical_split(test)
    keep = np.flatnonzero(split.labels != spec.target_label)
    subset = split[keep]
    if not len(subset):
        return subset
    everyone = np.arange(len(subset))
    left, right = subset.left, subset.right
    if spec.selected_party == "A":
        left = _stamp(left, everyone, spec)
    else:
        right = _stamp(right, everyone, spec)
    return VerticalBatch(
        left=left,
        right=right,
        labels=np.full(len(subset), spec.target_label, dtype=np.int64),
        poisoned=np.ones(len(subset), dtype=bool),
    )


def target_ascent_data(client: ClientDataset, party: Party, clean_half: str = "target") -> VerticalBatch:
    """The poisoned samples of the target client, as seen during unlearning.

    The selected party's half carries the trigger; the other half is the
    client's own clean half (``clean_half="target"``) or zeros
    (``clean_half="zero"``).
    """
    batch = client.samples[np.flatnonzero(client.samples.poisoned)]
    if clean_half == "zero":
        if party == "B":
            batch = replace(batch, left=np.zeros_like(batch.left))
        else:
            batch = replace(batch, right=np.zeros_like(batch.right))
    return batch
