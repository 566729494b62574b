import os

import numpy as np
import pytest

from vik.config import SynthConfig
from vik.data import (
    RECORD_BYTES,
    BatchPlan,
    Dataset,
    Prefetcher,
    epoch_plan,
    gather,
    grating_wave_vector,
    hflip,
    load_cifar10_binary,
    load_datasets,
    read_cifar10_file,
    synth_dataset,
)
from vik.errors import ConfigError, DataError, FormatError, ShapeError


def cifar_bytes(labels: list[int]) -> bytes:
    out = bytearray()
    for i, label in enumerate(labels):
        out.append(label)
        out.extend(bytes([(i * 7 + j) % 256 for j in range(RECORD_BYTES - 1)]))
    return bytes(out)


class TestSynth:
    def test_shape_and_range(self):
        ds = synth_dataset(0, 5, resolution=16)
        assert ds.images.shape == (50, 3, 16, 16)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert np.bincount(ds.labels).tolist() == [5] * 10

    def test_same_seed_same_bytes(self):
        a, b = synth_dataset(3, 4), synth_dataset(3, 4)
        assert a.images.tobytes() == b.images.tobytes()
        assert not np.array_equal(a.images, synth_dataset(4, 4).images)

    def test_clean_images_carry_no_mean_signal(self):
        ds = synth_dataset(0, 1, noise=0.0)
        np.testing.assert_allclose(ds.images.mean(axis=(1, 2, 3)), 0.5, atol=1e-5)
        assert np.array_equal(ds.images[:, 0], ds.images[:, 2])

    def test_wave_vectors_are_distinct(self):
        vectors = {grating_wave_vector(c, 10) for c in range(10)}
        assert len(vectors) == 10
        assert (0, 0) not in vectors

    def test_one_class(self):
        with pytest.raises(DataError):
            synth_dataset(0, 2, num_classes=1)


class TestDataset:
    def test_label_out_of_range_names_index(self):
        with pytest.raises(DataError, match="index 1"):
            Dataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 10]), 10)

    def test_count_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0]), 10)


class TestCifar:
    def test_reads_records(self, tmp_path):
        path = tmp_path / "test_batch.bin"
        path.write_bytes(cifar_bytes([3, 9]))
        images, labels = read_cifar10_file(path)
        assert labels.tolist() == [3, 9]
        assert images.shape == (2, 3, 32, 32)
        assert images[0, 0, 0, 0] == 0.0
        assert images[0, 0, 0, 1] == pytest.approx(1 / 255)
        # channel-planar: green starts after 1024 red bytes
        assert images[0, 1, 0, 0] == pytest.approx((1024 % 256) / 255)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "test_batch.bin"
        path.write_bytes(cifar_bytes([1, 2])[:-5])
        with pytest.raises(FormatError, match=str(2 * RECORD_BYTES)):
            read_cifar10_file(path)

    def test_bad_label_names_record(self, tmp_path):
        path = tmp_path / "test_batch.bin"
        path.write_bytes(cifar_bytes([1, 2, 12]))
        with pytest.raises(DataError, match="record 2"):
            read_cifar10_file(path)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError, match="test_batch.bin"):
            load_cifar10_binary(tmp_path, "test")

    def test_train_split_concatenates_batches(self, tmp_path):
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_bytes([i, i]))
        ds = load_cifar10_binary(tmp_path, "train")
        assert ds.labels.tolist() == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]

    def test_single_file_path(self, tmp_path):
        path = tmp_path / "test_batch.bin"
        path.write_bytes(cifar_bytes([0]))
        assert len(load_cifar10_binary(path)) == 1

    def test_accepts_str_path(self, tmp_path):
        path = tmp_path / "test_batch.bin"
        path.write_bytes(cifar_bytes([4]))
        assert read_cifar10_file(str(path))[1].tolist() == [4]

    @pytest.mark.slow
    @pytest.mark.skipif("VIK_CIFAR10_DIR" not in os.environ, reason="VIK_CIFAR10_DIR not set")
    def test_real_cifar(self):
        train, test = load_datasets(f"cifar10:{os.environ['VIK_CIFAR10_DIR']}", 0, SynthConfig(), (32, 32), 10)
        assert len(train) == 50000 and len(test) == 10000


class TestLoadDatasets:
    def test_synth_splits(self):
        train, val = load_datasets("synth", 0, SynthConfig(n_per_class=3, val_per_class=2), (8, 8), 4)
        assert len(train) == 12 and len(val) == 8
        assert val.split == "val"
        assert not np.array_equal(train.images[:2], val.images[:2])

    def test_no_validation(self):
        _, val = load_datasets("synth", 0, SynthConfig(n_per_class=1, val_per_class=0), (8, 8), 2)
        assert val is None

    def test_unknown_spec(self):
        with pytest.raises(ConfigError, match="cifar10:DIR"):
            load_datasets("imagenet", 0, SynthConfig(), (32, 32), 10)

    def test_cifar_needs_cifar_shape(self, tmp_path):
        with pytest.raises(ShapeError):
            load_datasets(f"cifar10:{tmp_path}", 0, SynthConfig(), (64, 64), 10)

    def test_synth_needs_square(self):
        with pytest.raises(DataError):
            load_datasets("synth", 0, SynthConfig(), (8, 16), 10)


class TestBatching:
    def test_plan_covers_every_index_once(self):
        plans = epoch_plan(10, 4, np.random.default_rng(0))
        assert [p.index.size for p in plans] == [4, 4, 2]
        assert sorted(np.concatenate([p.index for p in plans]).tolist()) == list(range(10))

    def test_plan_is_seeded(self):
        a = epoch_plan(20, 8, np.random.default_rng(7), flip=True)
        b = epoch_plan(20, 8, np.random.default_rng(7), flip=True)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.index, pb.index) and np.array_equal(pa.flip, pb.flip)

    def test_no_shuffle(self):
        plans = epoch_plan(5, 5, np.random.default_rng(0), shuffle=False)
        assert plans[0].index.tolist() == [0, 1, 2, 3, 4]
        assert plans[0].flip is None

    def test_hflip_reverses_width(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        np.testing.assert_array_equal(hflip(x)[0, 0, 0], [2, 1, 0])
        np.testing.assert_array_equal(hflip(hflip(x)), x)

    def test_gather_does_not_touch_dataset(self):
        ds = synth_dataset(0, 2, num_classes=2, resolution=4)
        before = ds.images.copy()
        plans = epoch_plan(len(ds), 4, np.random.default_rng(0), flip=True)
        for plan in plans:
            gather(ds, plan)
        np.testing.assert_array_equal(ds.images, before)

    def test_prefetcher_preserves_order(self):
        ds = synth_dataset(0, 3, num_classes=2, resolution=4)
        plans = epoch_plan(len(ds), 2, np.random.default_rng(1))
        fed = [labels.tolist() for _, labels in Prefetcher(ds, plans, depth=1)]
        assert fed == [ds.labels[p.index].tolist() for p in plans]

    def test_prefetcher_forwards_errors(self):
        ds = synth_dataset(0, 1, num_classes=2, resolution=4)
        plans = epoch_plan(len(ds), 1, np.random.default_rng(0), shuffle=False)
        plans.append(BatchPlan(np.array([99])))
        with pytest.raises(IndexError):
            list(Prefetcher(ds, plans))

    def test_prefetcher_close_early(self):
        ds = synth_dataset(0, 8, num_classes=2, resolution=4)
        feeder = Prefetcher(ds, epoch_plan(len(ds), 1, np.random.default_rng(0)), depth=1)
        batches = iter(feeder)
        next(batches)
        batches.close()
        assert not feeder._thread.is_alive()
