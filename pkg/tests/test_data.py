import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapoison import data as D
from metapoison.perturbation import PoisonSet


def test_record_length():
    assert D.CIFAR_RECORD == 3073


def test_all_zero_record():
    x, y = D.parse_cifar_records(bytes(3073))
    assert y.tolist() == [0] and x.shape == (1, 32, 32, 3) and not x.any()


def test_truncated_record_rejected():
    with pytest.raises(ValueError, match="truncated"):
        D.parse_cifar_records(bytes(3072))


def test_bad_label_rejected():
    raw = bytearray(3073)
    raw[0] = 10
    with pytest.raises(ValueError, match="label"):
        D.parse_cifar_records(bytes(raw))


def test_channel_planar_layout():
    raw = bytearray(3073)
    raw[0] = 3
    raw[1 + 1024 * 2 + 32 * 5 + 7] = 255  # blue plane, row 5, col 7
    x, y = D.parse_cifar_records(bytes(raw))
    assert y[0] == 3 and x[0, 5, 7, 2] == 1.0 and x.sum() == 1.0


def test_file_of_many_records(tmp_path):
    rng = np.random.default_rng(0)
    n = 10000
    pix = rng.integers(0, 256, (n, 32, 32, 3)) / 255.0
    data = D.LabeledSet(pix, rng.integers(0, 10, n), "test", 10)
    path = tmp_path / "test_batch.bin"
    D.write_cifar_binary(data, path)
    back = D.load_cifar_binary(path, "test")
    assert len(back) == n
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_allclose(back.images, data.images, atol=1e-7)


def test_pixel_mean_warning(tmp_path, caplog):
    data = D.LabeledSet(np.zeros((2, 32, 32, 3)), [0, 1], "train", 10)
    path = tmp_path / "b.bin"
    D.write_cifar_binary(data, path)
    with caplog.at_level(logging.WARNING):
        D.load_cifar_binary([path], "train")
    assert "pixel mean" in caplog.text


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5), st.integers(1, 6))
def test_synthetic_round_trips_through_record_format(seed, n):
    data = D.synth_dataset(seed, n, 2, (32, 32, 3))
    x, y = D.parse_cifar_records(D.to_cifar_records(data))
    np.testing.assert_array_equal(y, data.labels)
    np.testing.assert_allclose(x, np.round(data.images * 255) / 255, atol=1e-6)


def test_synth_deterministic_and_sized():
    a = D.synth_dataset(3, 250)
    b = D.synth_dataset(3, 250)
    assert len(a) == 500
    assert a.fingerprint() == b.fingerprint()
    assert np.bincount(a.labels).tolist() == [250, 250]
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synth_class_means_differ():
    means = D.class_means(0, 2, (8, 8, 3))
    frac = np.mean(np.abs(means[0] - means[1]) >= 0.3)
    assert frac >= 0.25


def test_splits_differ_but_share_means():
    tr = D.synth_dataset(0, 50, split="train")
    va = D.synth_dataset(0, 50, split="validation")
    assert tr.fingerprint() != va.fingerprint()
    for c in (0, 1):
        gap = np.abs(tr.images[tr.labels == c].mean(0) - va.images[va.labels == c].mean(0)).mean()
        assert gap < 0.05


def test_labeled_set_immutable():
    data = D.synth_dataset(0, 2)
    with pytest.raises(ValueError):
        data.images[0, 0, 0, 0] = 1.0


@pytest.mark.parametrize("n,budget,count", [(50000, 0.0005, 25), (500, 0.1, 50), (500, 0.0, 0),
                                            (100, 0.005, 1), (100, 0.004, 0)])
def test_budget_rounding(n, budget, count):
    assert D.budget_count(budget, n) == count


def test_select_first_of_class():
    data = D.synth_dataset(0, 30)
    idx = D.select_poison_bases(data, 1, 0.1)
    assert idx.tolist() == data.class_indices(1)[:6].tolist()
    assert D.select_poison_bases(data, 1, 0.0).size == 0


def test_select_insufficient_class():
    data = D.synth_dataset(0, 30)
    with pytest.raises(D.InsufficientClassError):
        D.select_poison_bases(data, 1, 0.6)


def test_multiclass_spreads_evenly():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 100)
    data = D.LabeledSet(rng.uniform(size=(1000, 2, 2, 3)), rng.permutation(labels), num_classes=10)
    idx = D.select_poison_bases(data, None, 0.1, multiclass=True)
    assert len(idx) == 100
    assert np.bincount(data.labels[idx], minlength=10).tolist() == [10] * 10


def _ps(n):
    rng = np.random.default_rng(1)
    return PoisonSet.from_bases(np.arange(n), rng.uniform(size=(n, 2, 2, 3)))


def test_subsample_edges_and_links():
    ps = _ps(50)
    ps.meta["config_hash"] = "feed"
    full = D.subsample_poisons(ps, 50, 0)
    np.testing.assert_array_equal(full.base_indices, ps.base_indices)
    assert len(D.subsample_poisons(ps, 0, 0)) == 0
    sub = D.subsample_poisons(ps, 5, 3)
    assert len(sub) == 5 and sub.meta["parent_hash"] == "feed" and sub.meta["parent_size"] == 50
    assert set(sub.base_indices) <= set(ps.base_indices)
    np.testing.assert_array_equal(sub.base_indices, D.subsample_poisons(ps, 5, 3).base_indices)
    with pytest.raises(ValueError):
        D.subsample_poisons(ps, 51, 0)


def test_subsample_ten_percent():
    assert len(D.subsample_poisons(_ps(5000), 500, 0)) == 500
