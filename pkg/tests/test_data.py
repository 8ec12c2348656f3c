import os
import struct

import numpy as np
import pytest

from sbc import data as D
from sbc.errors import DomainError, FormatError

MNIST_ROOT = os.environ.get("SBC_DATA_DIR", "/root/data/mnist")
have_mnist = pytest.mark.skipif(not os.path.exists(os.path.join(MNIST_ROOT, "train-labels-idx1-ubyte")),
                                reason="MNIST files not available")


@pytest.fixture
def fixture_pair(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    D.write_idx(ip, imgs)
    D.write_idx(lp, labels)
    return ip, lp, imgs, labels


def test_fixture_round_trip(fixture_pair):
    ip, lp, imgs, labels = fixture_pair
    ds = D.load_mnist_idx(ip, lp)
    assert ds.images.shape == (2, 1, 28, 28)
    assert np.array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == [3, 7]
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_every_truncation_rejected(fixture_pair):
    ip, lp, _, _ = fixture_pair
    for path, magic in ((ip, D.IMAGE_MAGIC), (lp, D.LABEL_MAGIC)):
        buf = path.read_bytes()
        D.parse_idx(buf, magic)
        for cut in range(len(buf)):
            with pytest.raises(FormatError) as err:
                D.parse_idx(buf[:cut], magic)
            assert err.value.offset is not None


def test_bad_magic_and_trailing_bytes(fixture_pair):
    ip, _, _, _ = fixture_pair
    buf = ip.read_bytes()
    with pytest.raises(FormatError, match="magic"):
        D.parse_idx(buf, D.LABEL_MAGIC)
    with pytest.raises(FormatError, match="trailing"):
        D.parse_idx(buf + b"\x00", D.IMAGE_MAGIC)


def test_count_mismatch(tmp_path, fixture_pair):
    ip, _, _, _ = fixture_pair
    lp = tmp_path / "three"
    D.write_idx(lp, np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError):
        D.load_mnist_idx(ip, lp)


def test_header_is_big_endian(fixture_pair):
    _, lp, _, _ = fixture_pair
    buf = lp.read_bytes()
    assert struct.unpack(">II", buf[:8]) == (D.LABEL_MAGIC, 2)


@have_mnist
def test_mnist_split_sizes_and_label_histogram():
    train = D.load_mnist(MNIST_ROOT, "train")
    test = D.load_mnist(MNIST_ROOT, "test")
    assert len(train) == 60000 and len(test) == 10000
    counts = np.bincount(train.labels, minlength=10)
    assert counts.min() >= 5400 and counts.max() <= 7000
    assert train.images.shape[1:] == (1, 28, 28)


def test_blocksparse_least_squares_recovery():
    prob = D.synth_blocksparse(64, 8, 3, 200, noise=0.0, seed=1)
    w, *_ = np.linalg.lstsq(prob.X, prob.y, rcond=None)
    assert np.max(np.abs(w - prob.w)) <= 1e-8
    support = np.flatnonzero(prob.w)
    expect = np.concatenate([np.arange(o, o + 8) for o in prob.active_offsets])
    assert np.array_equal(support, expect)


def test_blocksparse_without_blocks_is_noise():
    prob = D.synth_blocksparse(32, 4, 0, 5000, noise=0.5, seed=2)
    assert not prob.w.any()
    assert abs(prob.y.std() - 0.5) < 0.03


def test_blocksparse_snr():
    prob = D.synth_blocksparse(256, 16, 3, 400, seed=3, snr_db=20)
    sig = prob.X @ prob.w
    assert abs(prob.noise - sig.std() / 10) < 1e-12


def test_blocksparse_infeasible():
    with pytest.raises(DomainError):
        D.synth_blocksparse(32, 16, 3, 10)


def test_synth_classification_deterministic_and_balanced():
    a = D.synth_classification(200, classes=4, seed=5)
    b = D.synth_classification(200, classes=4, seed=5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [50] * 4
    assert a.images.shape == (200, 1, 32, 32)
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(DomainError):
        D.synth_classification(201, classes=4)


def test_batches_partition_and_determinism():
    ds = D.Dataset(np.arange(50.0)[:, None], np.arange(50) % 10)
    got = [x[:, 0].astype(int) for x, _ in D.batches(ds, 16, seed=1)]
    assert [len(g) for g in got] == [16, 16, 16, 2]
    assert sorted(np.concatenate(got).tolist()) == list(range(50))
    again = [x[:, 0].astype(int) for x, _ in D.batches(ds, 16, seed=1)]
    assert all(np.array_equal(a, b) for a, b in zip(got, again))
    s0, s1 = D.epoch_seed(1, 0), D.epoch_seed(1, 1)
    o0 = np.concatenate([x[:, 0] for x, _ in D.batches(ds, 16, s0)])
    o1 = np.concatenate([x[:, 0] for x, _ in D.batches(ds, 16, s1)])
    assert not np.array_equal(o0, o1)


def test_single_full_batch_is_shuffled():
    ds = D.Dataset(np.arange(40.0)[:, None], np.zeros(40, int))
    (x, _), = list(D.batches(ds, 40, seed=0))
    assert sorted(x[:, 0]) == list(range(40)) and not np.array_equal(x[:, 0], np.arange(40))


def test_bad_batch_size():
    ds = D.Dataset(np.zeros((3, 1)), np.zeros(3, int))
    with pytest.raises(DomainError):
        list(D.batches(ds, 0, 0))
