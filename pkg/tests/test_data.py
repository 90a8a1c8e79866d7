import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tetsnn.data import (CIFAR_RECORD, EventStream, LabeledFrames, accumulate_event_frames, augment,
                         load_cifar10, load_event_fixture, nearest_template_accuracy, read_cifar_batch,
                         read_events, split, synthetic_patterns, write_cifar_batch, write_events)
from tetsnn.errors import DataError

# -- CIFAR ---------------------------------------------------------------------


def test_cifar_record_layout(tmp_path):
    img = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    img[0, 0, 0, 0] = 11    # red plane, first pixel
    img[0, 1, 0, 1] = 22    # green plane
    img[1, 2, 31, 31] = 33  # last blue pixel
    path = tmp_path / "data_batch_1.bin"
    write_cifar_batch(path, img, [7, 3])
    raw = path.read_bytes()
    assert len(raw) == 2 * CIFAR_RECORD
    assert raw[0] == 7 and raw[1] == 11 and raw[1 + 1024 + 1] == 22
    assert raw[CIFAR_RECORD] == 3 and raw[-1] == 33
    x, y = read_cifar_batch(path)
    assert np.array_equal(x, img) and y.tolist() == [7, 3]


def _fixture(tmp_path, n_train=20, n_test=10, seed=0):
    rng = np.random.default_rng(seed)
    tr = rng.integers(0, 256, (n_train, 3, 32, 32), dtype=np.uint8)
    te = rng.integers(0, 256, (n_test, 3, 32, 32), dtype=np.uint8)
    ytr, yte = np.arange(n_train) % 10, np.arange(n_test) % 10
    write_cifar_batch(tmp_path / "data_batch_1.bin", tr, ytr)
    write_cifar_batch(tmp_path / "test_batch.bin", te, yte)
    return tr, ytr, te, yte


def test_load_cifar_scaling_and_subset(tmp_path):
    tr, ytr, _, _ = _fixture(tmp_path)
    train, test = load_cifar10(tmp_path, normalize=False)
    assert len(train) == 20 and len(test) == 10
    assert train.frames.min() >= 0 and train.frames.max() <= 1
    assert np.allclose(train.frames * 255, tr)
    sub, _ = load_cifar10(tmp_path, class_subset=[3, 1])
    assert set(sub.labels.tolist()) == {0, 1} and sub.num_classes == 2
    assert len(sub) == int(np.isin(ytr, [3, 1]).sum())


def test_load_cifar_standardizes_per_channel(tmp_path):
    tr, *_ = _fixture(tmp_path)
    train, _ = load_cifar10(tmp_path)
    expect = (tr[:, 1] / 255.0 - 0.4822) / 0.2435
    assert np.allclose(train.frames[:, 1], expect)


def test_cifar_truncated_and_count_errors(tmp_path):
    _fixture(tmp_path)
    with pytest.raises(DataError, match="mismatch"):
        load_cifar10(tmp_path, expected_counts=(50000, 10000))
    bad = tmp_path / "test_batch.bin"
    bad.write_bytes(bad.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated"):
        load_cifar10(tmp_path)


@pytest.mark.skipif(not os.environ.get("CIFAR10_DIR"), reason="set CIFAR10_DIR to the real binary batches")
def test_real_cifar_counts():
    train, test = load_cifar10(os.environ["CIFAR10_DIR"], expected_counts=(50000, 10000))
    assert len(train) == 50000 and len(test) == 10000


# -- synthetic -----------------------------------------------------------------


def test_synthetic_noise_free_is_separable():
    d = synthetic_patterns(6, 5, (1, 6, 6), noise=0.0, seed=3)
    templates = d.frames[:6]
    assert nearest_template_accuracy(d, templates) == 1.0


def test_synthetic_reproducible_and_in_range():
    a = synthetic_patterns(4, 8, (2, 5, 5), noise=0.7, seed=9, shift=1)
    b = synthetic_patterns(4, 8, (2, 5, 5), noise=0.7, seed=9, shift=1)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.labels, b.labels)
    assert a.frames.min() >= 0 and a.frames.max() <= 1
    assert np.bincount(a.labels).tolist() == [8] * 4


def test_split_partitions():
    d = synthetic_patterns(3, 10, 4, seed=1)
    tr, te = split(d, 0.3, seed=2)
    assert len(tr) + len(te) == len(d) and len(te) == 9
    rows = {r.tobytes() for r in np.concatenate([tr.frames, te.frames])}
    assert rows == {r.tobytes() for r in d.frames}


def test_labels_validated():
    with pytest.raises(DataError):
        LabeledFrames(np.zeros((2, 1, 2, 2)), [0, 3], 3)


def test_batches_order_depends_on_seed_and_epoch():
    d = synthetic_patterns(2, 10, 3, seed=0)
    order = lambda s, e: np.concatenate([i for _, _, i in d.batches(4, shuffle=True, seed=s, epoch=e)])
    assert np.array_equal(order(1, 2), order(1, 2))
    assert not np.array_equal(order(1, 2), order(1, 3))
    assert sorted(order(5, 0).tolist()) == list(range(20))


# -- events --------------------------------------------------------------------


def test_single_event_lands_in_first_block():
    s = EventStream([0], [5], [7], [1], sensor_size=(16, 16), duration=1000)
    f = accumulate_event_frames(s, 10)
    assert f.shape == (10, 2, 16, 16)
    assert np.count_nonzero(f) == 1 and f[0, 1, 7, 5] == 1


def test_empty_stream_is_valid():
    s = EventStream([], [], [], [], sensor_size=(8, 8))
    assert not accumulate_event_frames(s, 3).any()


def _random_stream(seed, n=500, size=(128, 128), duration=100_000):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, duration, n))
    return EventStream(t, rng.integers(0, size[0], n), rng.integers(0, size[1], n), rng.integers(0, 2, n),
                       sensor_size=size, duration=duration)


def test_binning_matches_per_event_loop():
    s = _random_stream(4)
    f = accumulate_event_frames(s, 10)
    ref = np.zeros_like(f)
    for t, x, y, p in zip(s.t, s.x, s.y, s.p):
        ref[(t * 10) // 100_000, p, y, x] += 1
    assert np.array_equal(f, ref)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 12))
def test_downscale_conserves_counts_per_polarity(seed, T):
    s = _random_stream(seed, n=300)
    f = accumulate_event_frames(s, T, out_size=(48, 48))
    assert f.shape == (T, 2, 48, 48)
    for p in (0, 1):
        assert f[:, p].sum() == pytest.approx(int((s.p == p).sum()), abs=1e-9)


def test_event_file_round_trip(tmp_path):
    s = _random_stream(5, n=50, size=(32, 32), duration=5000)
    write_events(tmp_path / "a.txt", s)
    back = read_events(tmp_path / "a.txt")
    assert back.sensor_size == (32, 32) and back.duration == 5000
    assert all(np.array_equal(getattr(s, k), getattr(back, k)) for k in "txyp")


@pytest.mark.parametrize("line", ["1 2 3", "0 1 2 x", "0 40 1 0", "0 1 1 2"])
def test_event_file_errors(tmp_path, line):
    (tmp_path / "e.txt").write_text(f"# sensor 32 32\n{line}\n")
    with pytest.raises(DataError):
        read_events(tmp_path / "e.txt")


def test_decreasing_timestamps_rejected():
    with pytest.raises(DataError):
        EventStream([5, 3], [0, 0], [0, 0], [0, 0])


def test_event_fixture_directory(tmp_path):
    names = []
    for i in range(4):
        write_events(tmp_path / f"s{i}.txt", _random_stream(i, n=80, size=(32, 32), duration=2000))
        names.append(f"s{i}.txt {i % 2}")
    (tmp_path / "labels.txt").write_text("\n".join(names) + "\n")
    d = load_event_fixture(tmp_path, T=5, out_size=(12, 12))
    assert d.frames.shape == (4, 5, 2, 12, 12) and d.num_classes == 2
    x, _, _ = next(d.batches(4))
    assert x.shape == (5, 4, 2, 12, 12)


# -- augmentation --------------------------------------------------------------


def test_flip_p0_identity_and_involution():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(5, 3, 6, 6))
    idx = np.arange(5)
    assert np.array_equal(augment(x, [("horizontal_flip", 0.0)], 1, 0, idx), x)
    twice = augment(augment(x, [("horizontal_flip", 1.0)], 1, 0, idx), [("horizontal_flip", 1.0)], 1, 0, idx)
    assert np.array_equal(twice, x)


def _circular_shift(a, b):
    corr = np.real(np.fft.ifft2(np.fft.fft2(b) * np.conj(np.fft.fft2(a))))
    dy, dx = np.unravel_index(np.argmax(corr), corr.shape)
    h, w = a.shape
    return (dy + h // 2) % h - h // 2, (dx + w // 2) % w - w // 2


def test_roll_is_small_translation():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(30, 1, 24, 24))
    out = augment(x, [("roll", 5)], 3, 0, np.arange(30))
    for a, b in zip(x[:, 0], out[:, 0]):
        dy, dx = _circular_shift(a, b)
        assert abs(dy) <= 5 and abs(dx) <= 5
        assert np.array_equal(np.roll(a, (dy, dx), axis=(0, 1)), b)


def test_crop_pad_keeps_shape_and_content():
    x = np.arange(2 * 1 * 8 * 8, dtype=float).reshape(2, 1, 8, 8) + 1
    out = augment(x, [("crop_pad", 2)], 0, 0, [0, 1])
    assert out.shape == x.shape
    assert set(out[out > 0].tolist()) <= set(x.ravel().tolist())


def test_augment_depends_only_on_seed_epoch_index():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(6, 1, 8, 8))
    ops = [("horizontal_flip", 0.5), ("crop_pad", 2)]
    full = augment(x, ops, 7, 3, np.arange(6))
    part = augment(x[[4, 1]], ops, 7, 3, [4, 1])
    assert np.array_equal(full[[4, 1]], part)
    assert not np.array_equal(full, augment(x, ops, 7, 4, np.arange(6)))


@pytest.mark.parametrize("op", [("crop_pad", 8), ("roll", 9), ("roll", -1)])
def test_augment_bounds_rejected(op):
    with pytest.raises(ValueError):
        augment(np.zeros((1, 1, 8, 8)), [op], 0, 0, [0])
