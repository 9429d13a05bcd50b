import gzip
import struct

import numpy as np
import pytest

from extractlab import data, nn
from extractlab.data import IdxFormatError, LabeledDataset, SyntheticTaskSpec


def write_pair(tmp_path, images, labels, prefix="train"):
    names = data.IDX_NAMES[prefix]
    data.write_idx_images(tmp_path / names[0], images)
    data.write_idx_labels(tmp_path / names[1], labels)
    return tmp_path / names[0], tmp_path / names[1]


class TestSynthetic:
    def test_ring_label_by_construction(self):
        assert data.ring_label([[0.5, 0.0]])[0] == 0
        assert data.ring_label([[0.0, 1.5]])[0] == 1
        assert data.ring_label([[2.5, 0.0]])[0] == 0

    def test_rings_labels_match_radius(self):
        folds = data.gen_synthetic(SyntheticTaskSpec("rings", seed=1))
        x, c = folds["train"].samples, folds["train"].classes
        assert np.array_equal(c, np.floor(np.hypot(x[:, 0], x[:, 1])).astype(int) % 2)
        assert np.all(np.hypot(x[:, 0], x[:, 1]) < data.RING_COUNT)

    def test_blobs_zero_noise_sit_on_centers(self):
        folds = data.gen_synthetic(SyntheticTaskSpec("blobs", 4, n_train=50, noise=0.0))
        centers = data.blob_centers(4)
        for fold in folds.values():
            assert np.array_equal(fold.samples, centers[fold.classes])

    def test_checkerboard_parity(self):
        folds = data.gen_synthetic(SyntheticTaskSpec("checkerboard"))
        x = folds["test"].samples
        assert np.array_equal(folds["test"].classes, (np.floor(x[:, 0]) + np.floor(x[:, 1])).astype(int) % 2)

    def test_deterministic(self):
        spec = SyntheticTaskSpec("rings", noise=0.1, seed=5)
        a, b = data.gen_synthetic(spec), data.gen_synthetic(spec)
        for f in ("train", "valid", "test"):
            assert np.array_equal(a[f].samples, b[f].samples)
            assert np.array_equal(a[f].labels, b[f].labels)

    def test_fold_sizes_and_tags(self):
        folds = data.gen_synthetic(SyntheticTaskSpec("blobs", 3, n_train=7, n_valid=5, n_test=3))
        assert [(len(v), v.fold) for v in folds.values()] == [(7, "train"), (5, "valid"), (3, "test")]

    @pytest.mark.parametrize("kwargs", [
        {"kind": "moons"}, {"kind": "rings", "num_classes": 3}, {"kind": "checkerboard", "num_classes": 4},
        {"kind": "blobs", "num_classes": 1}, {"kind": "blobs", "noise": -1.0}, {"kind": "rings", "n_test": 0},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(**kwargs)


class TestThiefPool:
    def test_noise_within_bounds(self):
        pool = data.gen_thief_pool(([0, 0], [1, 1]), 500, 100, "noise", seed=2)
        assert pool.provenance == "uniform-noise"
        for part in (pool.train, pool.valid):
            assert np.all((part >= 0) & (part <= 1))

    def test_exact_partition_sizes(self):
        pool = data.gen_thief_pool(([-1, -1], [1, 1]), 100000, 50000, "natural")
        assert pool.train.shape == (100000, 2) and pool.valid.shape == (50000, 2)

    def test_natural_pool_hits_every_ring_class(self):
        spec = SyntheticTaskSpec("rings")
        pool = data.gen_thief_pool(data.task_bounds(spec), 2000, 500, "natural", seed=0)
        assert set(data.ring_label(pool.train).tolist()) == {0, 1}
        assert pool.provenance == "synthetic-natural"

    def test_deterministic(self):
        a = data.gen_thief_pool(([0, 0], [1, 1]), 30, 10, "natural", seed=4)
        b = data.gen_thief_pool(([0, 0], [1, 1]), 30, 10, "natural", seed=4)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.valid, b.valid)

    @pytest.mark.parametrize("bounds", [([0, 0], [0, 1]), ([1, 0], [0, 1]), ([0], [1, 1])])
    def test_degenerate_bounds(self, bounds):
        with pytest.raises(ValueError):
            data.gen_thief_pool(bounds, 10, 10, "noise")

    def test_bad_mode_and_sizes(self):
        with pytest.raises(ValueError):
            data.gen_thief_pool(([0], [1]), 10, 10, "imagenet")
        with pytest.raises(ValueError):
            data.gen_thief_pool(([0], [1]), 0, 10, "noise")

    def test_uniform_noise_pool(self):
        pool = data.uniform_noise_pool(784, 20, 5)
        assert pool.train.shape == (20, 784) and pool.valid.min() >= 0 and pool.valid.max() <= 1


@pytest.fixture(scope="module")
def big():
    return LabeledDataset(np.arange(60000, dtype=float)[:, None], nn.one_hot(np.arange(60000) % 10, 10))


class TestSplit:
    def test_mnist_shaped_split(self, big):
        tr, va = data.split(big, (0.8, 0.2), seed=0)
        assert (len(tr), len(va)) == (48000, 12000)
        a, b = set(tr.samples[:, 0].tolist()), set(va.samples[:, 0].tolist())
        assert not a & b and len(a | b) == 60000

    def test_identity_fold(self, big):
        (only,) = data.split(big, (1.0,), seed=3)
        assert np.array_equal(only.samples, big.samples)

    def test_same_seed_same_partition(self):
        assert all(np.array_equal(a, b) for a, b in zip(data.split_indices(100, (0.5, 0.3), 7),
                                                       data.split_indices(100, (0.5, 0.3), 7)))

    def test_exact_decimal_fractions(self):
        assert [len(f) for f in data.split_indices(100, (0.29, 0.71))] == [29, 71]

    def test_errors(self):
        with pytest.raises(ValueError):
            data.split_indices(10, (0.6, 0.5))
        with pytest.raises(ValueError):
            data.split_indices(10, (0.0, 0.5))

    def test_fold_tags(self, big):
        tr, va = data.split(big, (0.5, 0.5), folds=("train", "valid"))
        assert (tr.fold, va.fold) == ("train", "valid")


class TestIdx:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(17, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=17, dtype=np.uint8)
        ip, lp = write_pair(tmp_path, imgs, labels)
        ds = data.load_idx(ip, lp, num_classes=10)
        assert ds.samples.shape == (17, 784) and ds.num_classes == 10
        assert np.array_equal(np.rint(ds.samples * 255).astype(np.uint8).reshape(17, 28, 28), imgs)
        assert np.array_equal(ds.classes, labels)
        assert ds.samples.min() >= 0 and ds.samples.max() <= 1

    def test_row_major_flattening(self, tmp_path):
        img = np.zeros((1, 2, 3), dtype=np.uint8)
        img[0, 1, 0] = 255
        ip, lp = write_pair(tmp_path, img, [0])
        assert np.array_equal(data.load_idx(ip, lp).samples[0], [0, 0, 0, 1, 0, 0])

    def test_all_zero_image(self, tmp_path):
        ip, lp = write_pair(tmp_path, np.zeros((2, 4, 4), dtype=np.uint8), [1, 0])
        assert np.all(data.load_idx(ip, lp).samples == 0)

    def test_gzip(self, tmp_path):
        ip, lp = write_pair(tmp_path, np.full((3, 2, 2), 51, dtype=np.uint8), [0, 1, 2])
        for p in (ip, lp):
            with open(p, "rb") as f, gzip.open(str(p) + ".gz", "wb") as g:
                g.write(f.read())
            p.unlink()
        found = data.find_idx_pair(tmp_path, "train")
        ds = data.load_idx(*found)
        assert np.allclose(ds.samples, 0.2) and ds.num_classes == 3

    def test_count_mismatch(self, tmp_path):
        ip, lp = write_pair(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8), [0, 1])
        with pytest.raises(IdxFormatError, match="count mismatch"):
            data.load_idx(ip, lp)

    def test_bad_magic(self, tmp_path):
        ip, lp = write_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0])
        with pytest.raises(IdxFormatError, match="magic"):
            data.load_idx(lp, lp)
        with pytest.raises(IdxFormatError, match="magic"):
            data.read_idx_labels(ip)

    def test_truncated(self, tmp_path):
        p = tmp_path / "imgs"
        p.write_bytes(struct.pack(">iiii", 2051, 5, 28, 28) + b"\0" * 100)
        with pytest.raises(IdxFormatError, match="truncated"):
            data.read_idx_images(p)
        (tmp_path / "short").write_bytes(b"\0\0")
        with pytest.raises(IdxFormatError, match="truncated"):
            data.read_idx_labels(tmp_path / "short")

    def test_find_pair_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.find_idx_pair(tmp_path, "test")

    def test_unlabeled(self, tmp_path):
        ip, _ = write_pair(tmp_path, np.full((4, 3, 3), 255, dtype=np.uint8), [0] * 4)
        assert np.all(data.load_idx_unlabeled(ip) == 1.0)


class TestDatasetTypes:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.array([[np.nan, 0.0]]), np.array([[1.0, 0.0]]))

    def test_csv_export(self, tmp_path):
        ds = LabeledDataset(np.array([[0.5, -1.0], [2.0, 3.25]]), nn.one_hot([1, 0], 2))
        data.to_csv(ds, tmp_path / "d.csv")
        raw = (tmp_path / "d.csv").read_bytes()
        assert raw == b"x0,x1,label\n0.5,-1.0,1\n2.0,3.25,0\n"


class TestImageStandIns:
    def test_digits_task_shape(self):
        folds = data.load_digits_task(seed=0)
        assert folds["train"].samples.shape[1] == 784
        assert sum(len(f) for f in folds.values()) <= 1797
        assert set(folds["test"].classes.tolist()) == set(range(10))
        assert folds["train"].samples.min() >= 0 and folds["train"].samples.max() <= 1

    def test_rendered_glyph_is_centered(self):
        img = data.render_digits(np.ones((1, 8, 8)))[0].reshape(28, 28)
        assert img[4:24, 4:24].min() == pytest.approx(1.0)
        assert img[:4].max() == 0 and img[:, 24:].max() == 0

    def test_natural_patches(self):
        x = data.natural_image_patches(50, seed=1)
        assert x.shape == (50, 784) and x.min() >= 0 and x.max() <= 1
        assert np.array_equal(x, data.natural_image_patches(50, seed=1))
        pool = data.natural_patch_pool(30, 10, seed=2)
        assert pool.train.shape == (30, 784) and pool.provenance == "natural-images"
