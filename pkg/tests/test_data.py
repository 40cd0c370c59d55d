"""Dataset container parsing, hierarchy mapping, and batching tests."""

import struct

import numpy as np
import pytest

from nestednet.data import (
    CIFAR_RECORD,
    DataFormatError,
    Dataset,
    LabelHierarchy,
    attach_hierarchy,
    batches,
    load_cifar10,
    load_hierarchy,
    load_idx,
    write_idx,
)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(20, 9, 7), dtype=np.uint8)
    labels = rng.integers(0, 10, size=20, dtype=np.uint8)
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


class TestIdx:
    def test_round_trip(self, idx_pair):
        ip, lp, images, labels = idx_pair
        ds = load_idx(ip, lp)
        assert ds.images.shape == (20, 9, 7, 1)
        assert ds.images.dtype == np.float32
        np.testing.assert_allclose(ds.images[..., 0], images / 255.0, rtol=1e-6)
        np.testing.assert_array_equal(ds.labels, labels)
        assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0

    def test_deterministic_reload(self, idx_pair):
        ip, lp, *_ = idx_pair
        a = load_idx(ip, lp)
        b = load_idx(ip, lp)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_bad_magic_names_offset(self, idx_pair, tmp_path):
        ip, lp, *_ = idx_pair
        corrupt = tmp_path / "bad.idx"
        data = bytearray(ip.read_bytes())
        data[0] = 0xFF
        corrupt.write_bytes(bytes(data))
        with pytest.raises(DataFormatError, match="offset 0"):
            load_idx(corrupt, lp)

    def test_truncated_payload(self, idx_pair, tmp_path):
        ip, lp, *_ = idx_pair
        cut = tmp_path / "cut.idx"
        cut.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(DataFormatError, match="payload"):
            load_idx(cut, lp)

    def test_empty_file(self, idx_pair, tmp_path):
        ip, lp, *_ = idx_pair
        empty = tmp_path / "empty.idx"
        empty.write_bytes(b"")
        with pytest.raises(DataFormatError):
            load_idx(empty, lp)

    def test_count_mismatch(self, idx_pair, tmp_path):
        ip, _, images, _ = idx_pair
        lp2 = tmp_path / "short.idx"
        write_idx(tmp_path / "unused.idx", lp2, images, np.zeros(5, np.uint8))
        with pytest.raises(DataFormatError, match="labels"):
            load_idx(ip, lp2)


def _cifar_file(path, n, seed=0, bad_label=False):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, size=(n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, size=n)
    if bad_label:
        rec[0, 0] = 17
    path.write_bytes(rec.tobytes())
    return rec


class TestCifar:
    def test_shape_and_planar_layout(self, tmp_path):
        p = tmp_path / "batch.bin"
        rec = _cifar_file(p, 6)
        ds = load_cifar10(p, normalize=False)
        assert ds.images.shape == (6, 32, 32, 3)
        # red plane comes first in the record
        np.testing.assert_allclose(
            ds.images[0, 0, 0, 0], rec[0, 1] / 255.0, rtol=1e-6
        )
        np.testing.assert_allclose(
            ds.images[0, 0, 0, 1], rec[0, 1 + 1024] / 255.0, rtol=1e-6
        )

    def test_normalization_centers_training_split(self, tmp_path):
        p = tmp_path / "batch.bin"
        _cifar_file(p, 50)
        ds = load_cifar10(p)
        np.testing.assert_allclose(ds.images.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(ds.images.std(axis=(0, 1, 2)), 1.0, atol=1e-5)

    def test_test_split_reuses_training_stats(self, tmp_path):
        ptr, pte = tmp_path / "train.bin", tmp_path / "test.bin"
        _cifar_file(ptr, 50, seed=1)
        _cifar_file(pte, 20, seed=2)
        train = load_cifar10(ptr, split="train")
        test = load_cifar10(pte, split="test", stats=train.norm_stats)
        assert test.norm_stats is train.norm_stats

    def test_size_not_multiple(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * (CIFAR_RECORD + 7))
        with pytest.raises(DataFormatError, match="3073"):
            load_cifar10(p)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "bad.bin"
        _cifar_file(p, 3, bad_label=True)
        with pytest.raises(DataFormatError, match="label"):
            load_cifar10(p)

    def test_multiple_files_concatenate(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        _cifar_file(a, 4, seed=3)
        _cifar_file(b, 6, seed=4)
        ds = load_cifar10([a, b], normalize=False)
        assert len(ds) == 10


class TestHierarchy:
    def test_digit_split(self):
        h = LabelHierarchy(
            class_counts=(2, 10),
            tables=(np.array([0] * 5 + [1] * 5), np.arange(10)),
        )
        ds = Dataset(images=np.zeros((3, 2, 2, 1)), labels=np.array([7, 2, 5]))
        out = attach_hierarchy(ds, h)
        np.testing.assert_array_equal(out.level_labels[0], [1, 0, 1])
        np.testing.assert_array_equal(out.level_labels[1], [7, 2, 5])

    def test_identity_hierarchy(self):
        h = LabelHierarchy(class_counts=(4, 4), tables=(np.arange(4), np.arange(4)))
        ds = Dataset(images=np.zeros((2, 1, 1, 1)), labels=np.array([3, 1]))
        out = attach_hierarchy(ds, h)
        np.testing.assert_array_equal(out.level_labels[0], out.level_labels[1])

    def test_hundred_to_twenty_mapping(self):
        table = np.arange(100) // 5
        h = LabelHierarchy(class_counts=(20, 100), tables=(table, np.arange(100)))
        sizes = np.bincount(h.tables[0], minlength=20)
        assert (sizes == 5).all()

    def test_unmapped_fine_label(self):
        h = LabelHierarchy(class_counts=(2, 4), tables=(np.array([0, 0, 1, 1]), np.arange(4)))
        ds = Dataset(images=np.zeros((1, 1, 1, 1)), labels=np.array([9]))
        with pytest.raises(DataFormatError):
            attach_hierarchy(ds, h)

    def test_non_surjective_rejected(self):
        with pytest.raises(DataFormatError):
            LabelHierarchy(class_counts=(3, 4), tables=(np.array([0, 0, 2, 2]), np.arange(4)))

    def test_load_text_format(self, tmp_path):
        p = tmp_path / "hier.tsv"
        lines = [f"{i}\t{0 if i < 5 else 1}" for i in range(10)]
        p.write_text("\n".join(lines) + "\n")
        h = load_hierarchy(p)
        assert h.class_counts == (2, 10)
        np.testing.assert_array_equal(h.tables[0][:5], 0)
        np.testing.assert_array_equal(h.tables[0][5:], 1)

    def test_load_rejects_gaps(self, tmp_path):
        p = tmp_path / "hier.tsv"
        p.write_text("0\t0\n2\t1\n")
        with pytest.raises(DataFormatError, match="fine indices"):
            load_hierarchy(p)

    def test_labels_for_levels_mismatch(self):
        h = LabelHierarchy(class_counts=(2, 4), tables=(np.array([0, 0, 1, 1]), np.arange(4)))
        ds = attach_hierarchy(
            Dataset(images=np.zeros((1, 1, 1, 1)), labels=np.array([0])), h
        )
        with pytest.raises(DataFormatError):
            ds.labels_for_levels(3)


class TestBatches:
    def _ds(self, n=23):
        return Dataset(images=np.zeros((n, 2, 2, 1)), labels=np.zeros(n, dtype=int))

    def test_same_seed_epoch_same_order(self):
        ds = self._ds()
        a = [idx.tolist() for idx in batches(ds, 5, seed=7, epoch=3)]
        b = [idx.tolist() for idx in batches(ds, 5, seed=7, epoch=3)]
        assert a == b

    def test_different_epochs_differ(self):
        ds = self._ds(200)
        a = np.concatenate(list(batches(ds, 50, seed=7, epoch=0)))
        b = np.concatenate(list(batches(ds, 50, seed=7, epoch=1)))
        assert not np.array_equal(a, b)

    def test_full_batch_is_whole_set(self):
        ds = self._ds(16)
        out = list(batches(ds, 16, seed=0, epoch=0))
        assert len(out) == 1 and len(out[0]) == 16

    def test_partition_no_duplicates(self):
        ds = self._ds(23)
        out = list(batches(ds, 5, seed=1, epoch=0))
        assert [len(b) for b in out] == [5, 5, 5, 5, 3]
        all_idx = np.concatenate(out)
        assert sorted(all_idx.tolist()) == list(range(23))

    def test_oversized_batch_rejected(self):
        with pytest.raises(ValueError):
            list(batches(self._ds(4), 5, seed=0, epoch=0))
