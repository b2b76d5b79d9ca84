import struct

import numpy as np
import pytest

from fedil.data import (
    Dataset,
    PartitionPlan,
    UnlabeledShard,
    classes_per_shard,
    gen_synthetic,
    holdout_split,
    load_mnist_idx,
    partition_iid,
    partition_noniid,
    split_by_label_rate,
)
from fedil.errors import ConfigurationError, FormatError


def balanced(num_classes, n_per_class, dim=2, seed=0):
    return gen_synthetic(num_classes, n_per_class, dim, 4.0, seed)


def write_idx(tmp_path, images, labels, truncate=0):
    count, rows, cols = images.shape
    img = struct.pack(">IIII", 0x803, count, rows, cols) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, np.uint8).tobytes()
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(img[:len(img) - truncate])
    lp.write_bytes(lab)
    return ip, lp


class TestSplit:
    def test_sizes(self):
        d = gen_synthetic(4, 250, 3, 2.0, 1)
        lab, pool = split_by_label_rate(d, 0.1, 0)
        assert len(lab) == 100 and len(pool) == 900

    def test_disjoint_cover_and_visible_labels(self):
        d = balanced(3, 100)
        lab, pool = split_by_label_rate(d, 0.2, 7)
        assert sorted(np.concatenate([lab.ids, pool.ids]).tolist()) == sorted(d.ids.tolist())
        truth = dict(zip(d.ids.tolist(), d.labels.tolist()))
        assert all(truth[i] == l for i, l in zip(lab.ids.tolist(), lab.labels.tolist()))

    def test_deterministic(self):
        d = balanced(3, 100)
        a, _ = split_by_label_rate(d, 0.1, 3)
        b, _ = split_by_label_rate(d, 0.1, 3)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_stratified_covers_classes_at_one_percent(self):
        d = gen_synthetic(3, 334, 2, 1.0, 0).subset(np.arange(1000))
        lab, _ = split_by_label_rate(d, 0.01, 0)
        assert len(lab) == 10
        assert set(np.bincount(lab.labels, minlength=3).nonzero()[0]) == {0, 1, 2}

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 1e-4])
    def test_bad_rates(self, gamma):
        with pytest.raises(ConfigurationError):
            split_by_label_rate(balanced(2, 50), gamma, 0)


class TestPartition:
    def test_iid_sizes(self):
        pool = balanced(3, 300)
        shards = partition_iid(pool, 10, 0)
        assert [len(s) for s in shards] == [90] * 10

    def test_iid_single_shard_and_too_many(self):
        pool = balanced(2, 10)
        (only,) = partition_iid(pool, 1, 0)
        assert sorted(only.ids.tolist()) == sorted(pool.ids.tolist())
        with pytest.raises(ConfigurationError):
            partition_iid(pool, 21, 0)

    def test_iid_class_histograms_follow_multinomial(self):
        pool = gen_synthetic(10, 200, 2, 1.0, 3)
        shards = partition_iid(pool, 10, 5)
        truth = dict(zip(pool.ids.tolist(), pool.labels.tolist()))
        global_p = np.bincount(pool.labels, minlength=10) / len(pool)
        dof = 9
        for s in shards:
            counts = np.bincount([truth[i] for i in s.ids.tolist()], minlength=10)
            expected = len(s) * global_p
            chi2 = ((counts - expected) ** 2 / expected).sum()
            # chi-square(dof) has mean dof and sd sqrt(2 dof)
            assert chi2 <= dof + 3 * np.sqrt(2 * dof)

    def test_noniid_two_classes_per_shard(self):
        pool = gen_synthetic(10, 300, 2, 1.0, 0)
        shards = partition_noniid(pool, 100, 0.2, 1)
        truth = dict(zip(pool.ids.tolist(), pool.labels.tolist()))
        seen = set()
        for s in shards:
            classes = {truth[i] for i in s.ids.tolist()}
            assert len(classes) == 2
            seen |= classes
        assert seen == set(range(10))

    def test_noniid_full_fraction_is_all_classes(self):
        pool = gen_synthetic(5, 40, 2, 1.0, 0)
        truth = dict(zip(pool.ids.tolist(), pool.labels.tolist()))
        for s in partition_noniid(pool, 4, 1.0, 0):
            assert {truth[i] for i in s.ids.tolist()} == set(range(5))

    def test_noniid_infeasible(self):
        pool = gen_synthetic(10, 5, 2, 1.0, 0)
        with pytest.raises(ConfigurationError):
            partition_noniid(pool, 2, 0.2, 0)  # 2 shards x 2 classes < 10
        with pytest.raises(ConfigurationError):
            partition_noniid(pool, 40, 0.2, 0)  # 8 shards per class but only 5 examples

    def test_classes_per_shard_rounding(self):
        assert classes_per_shard(0.2, 10) == 2
        assert classes_per_shard(0.34, 3) == 2
        assert classes_per_shard(0.01, 3) == 1

    @pytest.mark.parametrize("regime", ["iid", "non-iid"])
    def test_plan_disjoint_cover(self, regime):
        d = gen_synthetic(3, 200, 4, 2.0, 9)
        lab, shards = PartitionPlan(0.1, 7, regime, 0.34, seed=2).apply(d)
        ids = np.concatenate([lab.ids, *[s.ids for s in shards]])
        assert sorted(ids.tolist()) == sorted(d.ids.tolist())
        again_lab, again = PartitionPlan(0.1, 7, regime, 0.34, seed=2).apply(d)
        for a, b in zip(shards, again):
            np.testing.assert_array_equal(a.ids, b.ids)

    def test_shards_hide_labels(self):
        d = balanced(3, 30)
        _, shards = PartitionPlan(0.1, 3, "iid").apply(d)
        s = shards[0]
        public = [a for a in dir(s) if not a.startswith("__")]
        assert not any("label" in a for a in public)
        assert s.resolve(int(s.ids[0])).true_label is None
        assert not hasattr(s, "__dict__")

    def test_plan_requires_label_per_class(self):
        with pytest.raises(ConfigurationError):
            PartitionPlan(0.01, 2).apply(gen_synthetic(3, 50, 2, 1.0, 0))


class TestSynthetic:
    @staticmethod
    def centroid_accuracy(train, test):
        cents = np.stack([train.features[train.labels == c].mean(0) for c in range(train.num_classes)])
        d = ((test.features[:, None, :] - cents[None]) ** 2).sum(-1)
        return np.mean(d.argmin(1) == test.labels)

    def test_separated_clusters_are_easy(self):
        full = gen_synthetic(3, 200, 2, 6.0, 0)
        train, test = holdout_split(full, 100, 0)
        assert self.centroid_accuracy(train, test) >= 0.99

    def test_zero_separation_is_chance(self):
        full = gen_synthetic(3, 2000, 2, 0.0, 0)
        train, test = holdout_split(full, 1000, 0)
        assert abs(self.centroid_accuracy(train, test) - 1 / 3) < 0.05

    def test_deterministic(self):
        a, b = gen_synthetic(3, 10, 4, 2.0, 5), gen_synthetic(3, 10, 4, 2.0, 5)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_mean_separation(self):
        d = gen_synthetic(3, 20000, 5, 4.0, 1)
        m = np.stack([d.features[d.labels == c].mean(0) for c in range(3)])
        for i in range(3):
            for j in range(i):
                assert np.linalg.norm(m[i] - m[j]) == pytest.approx(4.0, abs=0.1)

    def test_immutable_and_csv(self, tmp_path):
        d = gen_synthetic(2, 3, 2, 1.0, 0)
        with pytest.raises(ValueError):
            d.features[0, 0] = 1.0
        text = d.to_csv(tmp_path / "d.csv").read_text().splitlines()
        assert text[0] == "id,label,x0,x1" and len(text) == 7


class TestMnist:
    def test_load(self, tmp_path):
        imgs = np.arange(3 * 4 * 5).reshape(3, 4, 5) % 256
        ip, lp = write_idx(tmp_path, imgs, [1, 7, 0])
        d = load_mnist_idx(ip, lp)
        assert len(d) == 3 and d.input_dim == 20 and d.image_shape == (4, 5)
        np.testing.assert_allclose(d.features[1], imgs[1].ravel() / 255)
        assert d.labels.tolist() == [1, 7, 0]
        assert d.features.max() <= 1.0

    def test_empty(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((0, 28, 28)), [])
        d = load_mnist_idx(ip, lp)
        assert len(d) == 0 and d.input_dim == 784

    def test_truncated(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((2, 28, 28)), [0, 1], truncate=100)
        with pytest.raises(FormatError, match="expected 1568 pixel bytes, found 1468") as exc:
            load_mnist_idx(ip, lp)
        assert exc.value.offset == 16 + 1468

    def test_bad_magic(self, tmp_path):
        ip, lp = write_idx(tmp_path, np.zeros((1, 2, 2)), [0])
        with pytest.raises(FormatError, match="magic"):
            load_mnist_idx(lp, ip)

    def test_real_files_if_present(self):
        import os
        root = os.environ.get("FEDIL_MNIST_DIR")
        if not root:
            pytest.skip("FEDIL_MNIST_DIR not set")
        d = load_mnist_idx(f"{root}/train-images-idx3-ubyte", f"{root}/train-labels-idx1-ubyte")
        assert len(d) == 60000 and d.input_dim == 784
