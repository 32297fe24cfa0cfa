import gzip
import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from vflunlearn.data import (
    BackdoorSpec,
    ClientDataset,
    RawDataset,
    VerticalBatch,
    build_backdoor_testset,
    inject_backdoor,
    load_cifar_batch,
    load_idx,
    partition_clients,
    synth_dataset,
    target_ascent_data,
    vertical_split,
)
from vflunlearn.exceptions import ArgumentError, FormatError


def _client(labels, width=6, height=6):
    n = len(labels)
    rng = np.random.default_rng(0)
    return ClientDataset(
        client_id=1,
        samples=VerticalBatch(
            left=rng.random((n, 1, height, width // 2)),
            right=rng.random((n, 1, height, width - width // 2)),
            labels=np.array(labels, dtype=np.int64),
            poisoned=np.zeros(n, dtype=bool),
        ),
    )


def _write_idx(path, images, labels, opener=open):
    n, rows, cols = images.shape
    with opener(path / "images", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with opener(path / "labels", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.astype(np.uint8).tobytes())
    return str(path / "images"), str(path / "labels")


class TestVerticalSplit:
    def test_even_width_halves(self):
        split = vertical_split(synth_dataset(seed=0, n=5))
        assert split.left_shape == (1, 28, 14)
        assert split.right_shape == (1, 28, 14)

    def test_odd_width_gives_left_the_extra_column(self):
        split = vertical_split(synth_dataset(seed=0, n=5, height=4, width=5))
        assert split.left_shape == (1, 4, 3)
        assert split.right_shape == (1, 4, 2)

    def test_halves_reassemble_the_image(self):
        raw = synth_dataset(seed=0, n=4, height=6, width=7)
        split = vertical_split(raw)
        assert np.array_equal(np.concatenate([split.left, split.right], axis=3), raw.images)
        assert not split.poisoned.any()


class TestPartition:
    def test_clients_partition_the_samples(self, tiny_split):
        clients = partition_clients(tiny_split, 4, seed=1)
        assert [c.client_id for c in clients] == [1, 2, 3, 4]
        assert sum(len(c) for c in clients) == len(tiny_split)
        seen = np.concatenate([c.samples.left.reshape(len(c), -1) for c in clients])
        assert len(np.unique(seen, axis=0)) == len(tiny_split)

    def test_partition_is_seeded(self, tiny_split):
        a = partition_clients(tiny_split, 3, seed=7)
        b = partition_clients(tiny_split, 3, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x.samples.labels, y.samples.labels)
            assert np.array_equal(x.samples.left, y.samples.left)

    def test_needs_a_client(self, tiny_split):
        with pytest.raises(ArgumentError):
            partition_clients(tiny_split, 0, seed=0)


class TestBackdoor:
    def test_fraction_of_eligible_samples_poisoned(self):
        client = inject_backdoor(_client([0, 1, 2, 3, 4, 5, 6, 7, 9, 0]), BackdoorSpec(), seed=0)
        assert client.poison_count == 8
        assert np.all(client.samples.labels[client.samples.poisoned] == 8)

    def test_target_label_samples_never_poisoned(self):
        client = inject_backdoor(_client([8, 8, 8, 1, 2]), BackdoorSpec(poison_fraction=1.0), seed=0)
        assert client.samples.poisoned.tolist() == [False, False, False, True, True]

    def test_count_rounds_half_up(self):
        client = inject_backdoor(_client([0, 1, 2, 3, 4]), BackdoorSpec(poison_fraction=0.5), seed=3)
        assert client.poison_count == 3

    def test_unselected_half_untouched(self):
        original = _client(list(range(8)))
        poisoned = inject_backdoor(original, BackdoorSpec(selected_party="B"), seed=1)
        assert np.array_equal(poisoned.samples.left, original.samples.left)
        assert not np.array_equal(poisoned.samples.right, original.samples.right)

    def test_trigger_stamped_bottom_right(self):
        original = _client([1, 2])
        spec = BackdoorSpec(poison_fraction=1.0, trigger_size=2, trigger_value=1.0)
        poisoned = inject_backdoor(original, spec, seed=0)
        assert np.all(poisoned.samples.right[:, :, -2:, -2:] == 1.0)
        assert np.array_equal(
            poisoned.samples.right[:, :, :4, :], original.samples.right[:, :, :4, :]
        )

    def test_party_a_trigger(self):
        original = _client([1, 2, 3])
        spec = BackdoorSpec(selected_party="A", poison_fraction=1.0, trigger_origin=(0, 0))
        poisoned = inject_backdoor(original, spec, seed=0)
        assert np.array_equal(poisoned.samples.right, original.samples.right)
        assert np.all(poisoned.samples.left[:, :, :3, :3] == 1.0)

    def test_trigger_must_fit(self):
        with pytest.raises(ArgumentError):
            inject_backdoor(_client([1, 2]), BackdoorSpec(trigger_origin=(5, 0)), seed=0)

    def test_poisoning_is_seeded(self):
        client = _client(list(range(8)) * 2)
        a = inject_backdoor(client, BackdoorSpec(poison_fraction=0.5), seed=11)
        b = inject_backdoor(client, BackdoorSpec(poison_fraction=0.5), seed=11)
        assert np.array_equal(a.samples.poisoned, b.samples.poisoned)

    def test_backdoor_testset(self):
        raw = synth_dataset(seed=2, n=30, height=8, width=8)
        tampered = build_backdoor_testset(raw, BackdoorSpec(trigger_size=2))
        assert len(tampered) == int((raw.labels != 8).sum())
        assert tampered.poisoned.all()
        assert np.all(tampered.labels == 8)
        assert np.all(tampered.right[:, :, -2:, -2:] == 1.0)

    def test_ascent_data_keeps_poisoned_samples_only(self, small_trigger):
        client = inject_backdoor(_client(list(range(8))), small_trigger, seed=0)
        batch = target_ascent_data(client, "B")
        assert len(batch) == client.poison_count
        assert batch.poisoned.all()

    def test_ascent_data_zero_clean_half(self, small_trigger):
        client = inject_backdoor(_client(list(range(8))), small_trigger, seed=0)
        batch = target_ascent_data(client, "B", clean_half="zero")
        assert not batch.left.any()
        assert batch.right.any()


class TestIdx:
    def test_decodes_images_and_labels(self, tmp_path):
        images = np.arange(2 * 3 * 4).reshape(2, 3, 4)
        images_path, labels_path = _write_idx(tmp_path, images, np.array([3, 7]))
        ds = load_idx(images_path, labels_path)
        assert ds.images.shape == (2, 1, 3, 4)
        assert ds.images[1, 0, 2, 3] == pytest.approx(23 / 255)
        assert ds.labels.tolist() == [3, 7]

    def test_gzip(self, tmp_path):
        gz = tmp_path / "gz"
        gz.mkdir()
        images = np.full((1, 2, 2), 255)
        _write_idx(gz, images, np.array([1]), opener=gzip.open)
        (gz / "images").rename(gz / "images.gz")
        (gz / "labels").rename(gz / "labels.gz")
        ds = load_idx(str(gz / "images.gz"), str(gz / "labels.gz"))
        assert ds.images.max() == 1.0

    def test_bad_magic(self, tmp_path):
        images_path, labels_path = _write_idx(tmp_path, np.zeros((1, 2, 2)), np.array([0]))
        with pytest.raises(FormatError) as info:
            load_idx(images_path, images_path)
        assert info.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        images_path, labels_path = _write_idx(tmp_path, np.zeros((2, 2, 2)), np.array([0, 1]))
        with open(images_path, "r+b") as f:
            f.truncate(16 + 5)
        with pytest.raises(FormatError, match="truncated"):
            load_idx(images_path, labels_path)

    def test_count_mismatch(self, tmp_path):
        images_path, labels_path = _write_idx(tmp_path, np.zeros((2, 2, 2)), np.array([0, 1]))
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", 0x801, 1) + bytes([0]))
        with pytest.raises(FormatError):
            load_idx(images_path, labels_path)


class TestCifar:
    def test_decodes_records(self, tmp_path):
        records = np.zeros((2, 3073), dtype=np.uint8)
        records[:, 0] = [4, 9]
        records[1, 1:] = 255
        path = tmp_path / "batch.bin"
        path.write_bytes(records.tobytes())
        ds = load_cifar_batch(str(path))
        assert ds.images.shape == (2, 3, 32, 32)
        assert ds.labels.tolist() == [4, 9]
        assert ds.images[1].min() == 1.0

    def test_partial_record(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes(3073 + 10))
        with pytest.raises(FormatError) as info:
            load_cifar_batch(str(path))
        assert info.value.offset == 3073


class TestSynth:
    def test_seeded_and_balanced(self):
        a = synth_dataset(seed=4, n=50)
        b = synth_dataset(seed=4, n=50)
        assert np.array_equal(a.images, b.images)
        assert np.bincount(a.labels, minlength=10).tolist() == [5] * 10
        assert 0.0 <= a.images.min() and a.images.max() <= 1.0

    def test_subset_with_offset(self):
        ds = synth_dataset(seed=4, n=20)
        part = ds.subset(5, offset=10)
        assert len(part) == 5
        assert np.array_equal(part.labels, ds.labels[10:15])

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ArgumentError):
            RawDataset(images=np.zeros((1, 1, 2, 2)), labels=np.array([10]), name="bad")

    def test_linearly_separable(self):
        ds = synth_dataset(seed=1, n=2000)
        features = ds.images.reshape(len(ds), -1)
        classifier = LogisticRegression(max_iter=1000)
        classifier.fit(features[:1500], ds.labels[:1500])
        assert classifier.score(features[1500:], ds.labels[1500:]) > 0.9
