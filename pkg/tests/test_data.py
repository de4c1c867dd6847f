import gzip
import struct

import numpy as np
import pytest

from feddiffuse.data import (Dataset, PartitionSpec, dirichlet_sample, find_idx_pair, largest_remainder, load_idx,
                             make_partition, partition_iid, partition_label_skew, partition_quantity_skew,
                             synthetic_fashion, write_idx)
from feddiffuse.errors import ConfigurationError, IngestionError


def two_image_fixture(tmp_path, compress=False):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    img = struct.pack(">IIII", 0x803, 2, 3, 4) + images.tobytes()
    lbl = struct.pack(">II", 0x801, 2) + bytes([7, 1])
    opener = gzip.compress if compress else (lambda b: b)
    (tmp_path / "img").write_bytes(opener(img))
    (tmp_path / "lbl").write_bytes(opener(lbl))
    return images


@pytest.mark.parametrize("compress", [False, True])
def test_load_idx_roundtrip(tmp_path, compress):
    images = two_image_fixture(tmp_path, compress)
    ds = load_idx(tmp_path / "img", tmp_path / "lbl")
    np.testing.assert_array_equal(ds.images, images)
    np.testing.assert_array_equal(ds.labels, [7, 1])


def test_write_idx_roundtrip(tmp_path):
    ds = synthetic_fashion(30, seed=1)
    write_idx(ds, tmp_path / "a.gz", tmp_path / "b.gz", compress=True)
    back = load_idx(tmp_path / "a.gz", tmp_path / "b.gz")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_load_idx_errors(tmp_path):
    two_image_fixture(tmp_path)
    (tmp_path / "lbl3").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(IngestionError, match="3 labels"):
        load_idx(tmp_path / "img", tmp_path / "lbl3")
    (tmp_path / "badmagic").write_bytes(struct.pack(">IIII", 0x802, 2, 3, 4) + bytes(24))
    with pytest.raises(IngestionError, match="magic"):
        load_idx(tmp_path / "badmagic", tmp_path / "lbl")
    (tmp_path / "short").write_bytes(struct.pack(">IIII", 0x803, 2, 3, 4) + bytes(20))
    with pytest.raises(IngestionError, match="offset 16"):
        load_idx(tmp_path / "short", tmp_path / "lbl")
    with pytest.raises(IngestionError):
        load_idx(tmp_path / "missing", tmp_path / "lbl")


def test_find_idx_pair(tmp_path):
    assert find_idx_pair(tmp_path) is None
    (tmp_path / "train-images-idx3-ubyte.gz").touch()
    (tmp_path / "train-labels-idx1-ubyte").touch()
    imgs, lbls = find_idx_pair(tmp_path)
    assert imgs.name == "train-images-idx3-ubyte.gz" and lbls.name == "train-labels-idx1-ubyte"


def test_as_float_range():
    ds = Dataset(np.array([[[0, 255]]], dtype=np.uint8), np.array([0]))
    np.testing.assert_array_equal(ds.as_float(), [[[[-1.0, 1.0]]]])


def test_dirichlet_sample(rng):
    for beta in (0.01, 0.5, 3.0):
        q = dirichlet_sample(beta, 7, rng)
        assert abs(q.sum() - 1) < 1e-12 and np.all(q >= 0)
    np.testing.assert_array_equal(dirichlet_sample(0.5, 1, rng), [1.0])
    q = dirichlet_sample(1e4, 5, np.random.default_rng(0))
    assert np.max(np.abs(q - 0.2)) < 0.05
    with pytest.raises(ConfigurationError):
        dirichlet_sample(0.0, 3, rng)


def test_dirichlet_mean_matches_uniform():
    rng = np.random.default_rng(5)
    draws = np.array([dirichlet_sample(0.5, 4, rng) for _ in range(4000)])
    # Var(q_k) = (1/4)(3/4) / (4*0.5 + 1) = 0.0625
    assert np.all(np.abs(draws.mean(axis=0) - 0.25) < 3 * np.sqrt(0.0625 / 4000))


def test_largest_remainder():
    np.testing.assert_array_equal(largest_remainder(np.array([0.5, 0.3, 0.2]), 7), [4, 2, 1])
    np.testing.assert_array_equal(largest_remainder(np.array([1 / 3] * 3), 10), [4, 3, 3])
    counts = largest_remainder(dirichlet_sample(0.3, 9, np.random.default_rng(1)), 1001)
    assert counts.sum() == 1001 and np.all(counts >= 0)


def assert_exact_cover(shards, n):
    allidx = np.concatenate(shards)
    assert len(allidx) == n
    assert np.array_equal(np.sort(allidx), np.arange(n))


def test_partition_iid():
    ds = synthetic_fashion(1003, seed=2)
    shards = partition_iid(ds, 4, np.random.default_rng(0))
    assert_exact_cover(shards, 1003)
    assert max(map(len, shards)) - min(map(len, shards)) <= 1
    single = partition_iid(ds, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(single[0], np.arange(1003))
    with pytest.raises(ConfigurationError):
        partition_iid(ds.subset(np.arange(3)), 4, np.random.default_rng(0))


def test_partition_label_skew_conserves_classes():
    ds = synthetic_fashion(2000, seed=2)
    shards, props = partition_label_skew(ds, 5, 0.5, np.random.default_rng(3))
    assert_exact_cover(shards, 2000)
    assert props.shape == (10, 5)
    for j in range(10):
        assert sum(np.sum(ds.labels[s] == j) for s in shards) == np.sum(ds.labels == j)


def test_partition_label_skew_major_minor_classes():
    ds = synthetic_fashion(6000, seed=2)
    shards, _ = partition_label_skew(ds, 5, 0.5, np.random.default_rng(0))
    for s in shards:
        counts = np.bincount(ds.labels[s], minlength=10)
        assert counts.max() > 2 * max(counts.min(), 1)


def test_partition_quantity_skew():
    ds = synthetic_fashion(3000, seed=2)
    shards, q = partition_quantity_skew(ds, 3, 0.5, np.random.default_rng(4))
    assert_exact_cover(shards, 3000)
    assert abs(q.sum() - 1) < 1e-12
    again, _ = partition_quantity_skew(ds, 3, 0.5, np.random.default_rng(4))
    assert [len(s) for s in shards] == [len(s) for s in again]
    # label mix within each shard stays close to the global one
    for s in shards:
        if len(s) < 100:
            continue
        freq = np.bincount(ds.labels[s], minlength=10) / len(s)
        assert np.all(np.abs(freq - 0.1) < 3 * np.sqrt(0.09 / len(s)) + 1e-9)


def test_make_partition_manifest(tmp_path):
    ds = synthetic_fashion(200, seed=2)
    part = make_partition(ds, PartitionSpec("label_skew", 3, 0.5, seed=9))
    part.write_manifest(tmp_path / "p.json")
    import json
    m = json.loads((tmp_path / "p.json").read_text())
    assert m["kind"] == "label_skew" and m["seed"] == 9 and sum(m["sizes"]) == 200
    assert len(m["proportions"]) == 10
    again = make_partition(ds, PartitionSpec("label_skew", 3, 0.5, seed=9))
    assert all(np.array_equal(a, b) for a, b in zip(part.shards, again.shards))
    with pytest.raises(ConfigurationError):
        PartitionSpec("feature_skew", 3)
    with pytest.raises(ConfigurationError):
        PartitionSpec("iid", 3, beta=0.0)


def test_synthetic_fashion_is_deterministic_and_balanced():
    a, b = synthetic_fashion(500, seed=1), synthetic_fashion(500, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.all(np.bincount(a.labels) == 50)
    assert a.images.dtype == np.uint8 and a.images.shape == (500, 28, 28)
    # classes differ in mean silhouette
    means = np.array([a.images[a.labels == c].mean(axis=0).ravel() for c in range(10)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[~np.eye(10, dtype=bool)].min() > 100
