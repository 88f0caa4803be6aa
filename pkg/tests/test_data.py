import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarlab import data
from polarlab.data import (Dataset, FormatError, PoisonSpec, Trigger, apply_trigger,
                           dataset_bytes, dataset_from_bytes, gen_shapes_dataset,
                           make_asr_eval_set, poison_dataset, stratified_subset, target_label)


@pytest.fixture(scope="module")
def desk():
    return gen_shapes_dataset(0)


def test_generation_is_deterministic():
    a, b = gen_shapes_dataset(3, 8, 64, 16), gen_shapes_dataset(3, 8, 64, 16)
    for x, y in zip(a, b):
        assert dataset_bytes(x) == dataset_bytes(y)
    assert dataset_bytes(gen_shapes_dataset(4, 8, 64, 16)[0]) != dataset_bytes(a[0])


def test_generation_is_balanced_and_valid(desk):
    train, test = desk
    assert np.bincount(train.labels).tolist() == [500] * 8
    assert np.bincount(test.labels).tolist() == [125] * 8
    train.validate()
    assert train.images.shape == (4000, 3, 16, 16)


@pytest.mark.parametrize("c", [1, 9])
def test_unsupported_class_count(c):
    with pytest.raises(ValueError):
        gen_shapes_dataset(0, c, 10, 10)


def test_patch_trigger():
    x = np.zeros((3, 16, 16), np.float32)
    out = apply_trigger(x, Trigger("patch", 3))
    assert np.all(out[:, 13:, 13:] == 1.0)
    assert out.sum() == 27
    assert x.sum() == 0  # input untouched


def test_patch_out_of_bounds():
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((3, 2, 2)), Trigger("patch", 3))


def test_blended_trigger():
    x = np.zeros((3, 4, 4), np.float32)
    out = apply_trigger(x, Trigger("blended", alpha=0.2, pattern=np.ones((3, 4, 4), np.float32)))
    np.testing.assert_allclose(out, 0.2, rtol=1e-7)


def test_target_labels():
    assert target_label(5, "all2one", 8, 0) == 0
    assert target_label(7, "all2all", 8) == 0
    assert target_label(3, "all2all", 8) == 4
    assert target_label(np.array([1, 7]), "all2all", 8).tolist() == [2, 0]


def test_poison_ratio_zero(desk):
    out = poison_dataset(desk[0], PoisonSpec(ratio=0.0), 0)
    assert not out.poison_mask.any()
    assert dataset_bytes(out) == dataset_bytes(desk[0])


def test_poison_count_and_relabel(desk):
    train = desk[0]
    out = poison_dataset(train, PoisonSpec(ratio=0.1), 0)
    assert out.poison_mask.sum() == 400
    assert np.all(out.labels[out.poison_mask] == 0)
    assert np.all(train.labels[out.poison_mask] != 0)
    assert np.all(out.images[out.poison_mask][:, :, 13:, 13:] == 1.0)
    clean = ~out.poison_mask
    np.testing.assert_array_equal(out.images[clean], train.images[clean])


def test_poison_all2all(desk):
    train = desk[0]
    out = poison_dataset(train, PoisonSpec(ratio=0.1, mode="all2all"), 1)
    m = out.poison_mask
    np.testing.assert_array_equal(out.labels[m], (train.labels[m] + 1) % 8)


def test_poison_ratio_too_small():
    train, _ = gen_shapes_dataset(0, 2, 10, 0)
    with pytest.raises(ValueError):
        poison_dataset(train, PoisonSpec(ratio=0.01), 0)


def test_asr_eval_set(desk):
    test = desk[1]
    aset = make_asr_eval_set(test, PoisonSpec())
    assert len(aset) == 875
    assert np.all(aset.labels != 0)
    all2all = make_asr_eval_set(test, PoisonSpec(mode="all2all"))
    assert len(all2all) == 1000


def test_stratified_subset(desk):
    idx = stratified_subset(desk[0], 0.05, 0)
    assert np.bincount(desk[0].labels[idx]).tolist() == [25] * 8
    np.testing.assert_array_equal(idx, stratified_subset(desk[0], 0.05, 0))


def test_dataset_round_trip(tmp_path):
    train, _ = gen_shapes_dataset(1, 4, 40, 0, 8, 8)
    ds = poison_dataset(train, PoisonSpec(ratio=0.25), 2)
    path = tmp_path / "d.npds"
    data.save_dataset(ds, path)
    back = data.load_dataset(path)
    assert dataset_bytes(back) == path.read_bytes()
    np.testing.assert_array_equal(back.poison_mask, ds.poison_mask)
    np.testing.assert_array_equal(back.images, ds.images)


def test_dataset_bad_files():
    buf = dataset_bytes(gen_shapes_dataset(1, 2, 4, 0, 4, 4)[0])
    with pytest.raises(FormatError):
        dataset_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:5])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:4] + b"\x09\x00" + buf[6:])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 40), st.integers(2, 5), st.integers(1, 6), st.integers(0, 2**31))
def test_dataset_bytes_round_trip_property(n, c, hw, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.random((n, 3, hw, hw)), rng.integers(0, c, n), c, rng.random(n) < 0.3)
    buf = dataset_bytes(ds)
    assert dataset_bytes(dataset_from_bytes(buf)) == buf
