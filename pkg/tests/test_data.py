import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from mfcap.data import (
    Dataset,
    IDXError,
    batch_iter,
    binarize,
    epoch_permutation,
    load_idx_dataset,
    parse_idx,
    read_idx_array,
    serialize_idx,
    synthetic_blobs,
    take_first,
)
from mfcap.special_math import Rng

# Two 2x3 images and their labels, written byte by byte.
IMAGE_FIXTURE = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                       0, 51, 102, 153, 204, 255,
                       255, 0, 255, 0, 255, 0])
LABEL_FIXTURE = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3])


class TestParseIdx:
    def test_image_fixture(self):
        out = parse_idx(IMAGE_FIXTURE)
        assert out.dtype == np.float64
        assert_array_equal(out, [[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], [1, 0, 1, 0, 1, 0]])

    def test_label_fixture(self):
        out = parse_idx(LABEL_FIXTURE)
        assert out.dtype == np.int64
        assert_array_equal(out, [7, 3])

    def test_empty_image_file(self):
        assert parse_idx(bytes([0, 0, 8, 3]) + struct.pack(">3I", 0, 28, 28)).shape == (0, 784)

    @pytest.mark.parametrize("buf,msg", [
        (b"", "truncated"),
        (bytes([1, 0, 8, 1, 0, 0, 0, 0]), "magic"),
        (bytes([0, 0, 9, 1, 0, 0, 0, 0]), "magic"),
        (bytes([0, 0, 8, 0]), "magic"),
        (bytes([0, 0, 8, 2, 0, 0]), "truncated"),
        (LABEL_FIXTURE[:-1], "truncated"),
        (LABEL_FIXTURE + b"\x00", "trailing"),
        (bytes([0, 0, 8, 2]) + struct.pack(">2I", 2**20, 2**20), "overflow"),
        (bytes([0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 5]), "magic"),
    ])
    def test_errors(self, buf, msg):
        with pytest.raises(IDXError, match=msg):
            parse_idx(buf)

    def test_read_raw_keeps_shape(self):
        assert read_idx_array(IMAGE_FIXTURE).shape == (2, 2, 3)

    @settings(max_examples=300)
    @given(st.binary(max_size=64))
    def test_fuzz_only_idx_errors(self, buf):
        try:
            parse_idx(buf)
        except IDXError:
            pass

    @settings(max_examples=200)
    @given(st.binary(max_size=40))
    def test_fuzz_valid_prefix(self, payload):
        buf = bytes([0, 0, 8, 1]) + struct.pack(">I", len(payload)) + payload
        assert_array_equal(parse_idx(buf), list(payload))


class TestSerialize:
    @given(arrays(np.uint8, st.tuples(st.integers(0, 5), st.integers(1, 4), st.integers(1, 4))))
    def test_image_round_trip(self, arr):
        raw = serialize_idx(arr)
        assert_array_equal(read_idx_array(raw), arr)
        assert_array_equal(np.rint(parse_idx(raw) * 255.0), arr.reshape(arr.shape[0], arr.shape[1] * arr.shape[2]))

    @given(arrays(np.int64, st.integers(0, 20), elements=st.integers(0, 255)))
    def test_label_round_trip(self, arr):
        assert_array_equal(parse_idx(serialize_idx(arr)), arr)

    def test_float_images_quantized(self):
        x = np.array([[0.0, 0.5, 1.0, 0.2]])
        assert_array_equal(read_idx_array(serialize_idx(x)), [[[0, 128], [255, 51]]])

    def test_fixture_bytes(self):
        assert serialize_idx(np.array([7, 3])) == LABEL_FIXTURE

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            serialize_idx(np.array([256]))


class TestDatasets:
    def test_load_bundled_subset(self, mnist_paths):
        train = load_idx_dataset(mnist_paths["train_images"], mnist_paths["train_labels"])
        test = load_idx_dataset(mnist_paths["test_images"], mnist_paths["test_labels"])
        assert train.images.shape == (4000, 784) and test.images.shape == (1000, 784)
        assert set(np.unique(train.labels)) == set(range(10))
        assert 0.0 <= train.images.min() and train.images.max() <= 1.0
        assert train.source_digest != test.source_digest

    def test_binarize_threshold_ties_up(self):
        d = Dataset(np.array([[0.2, 0.5, 0.7]]), None, "x", 0)
        assert_array_equal(binarize(d).images, [[0.0, 1.0, 1.0]])
        with pytest.raises(ValueError):
            binarize(d, 1.0)

    def test_take_first(self):
        d = Dataset(np.arange(6.0).reshape(3, 2), np.array([0, 1, 2]), "x", 0)
        assert_array_equal(take_first(d, 2).labels, [0, 1])
        with pytest.raises(ValueError):
            take_first(d, 4)

    def test_label_count_checked(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), np.zeros(3, dtype=np.int64), "x", 0)

    def test_blobs(self):
        d = synthetic_blobs(Rng(0), 500, 4, 3, 6.0)
        assert d.images.shape == (2000, 3)
        centers = np.array([d.images[d.labels == k].mean(axis=0) for k in range(4)])
        gaps = np.linalg.norm(centers - np.roll(centers, 1, axis=0), axis=1)
        assert_allclose(gaps, 6.0, atol=0.3)


class TestBatching:
    def test_covers_every_item_once(self):
        d = Dataset(np.arange(10.0)[:, None], np.arange(10), "x", 0)
        seen = np.concatenate([y for _, y in batch_iter(d, 3, Rng(0), shuffle=True, epoch=1)])
        assert sorted(seen) == list(range(10))

    def test_epochs_differ_and_repeat(self):
        r = Rng(4)
        assert not np.array_equal(epoch_permutation(r, 50, 1), epoch_permutation(r, 50, 2))
        assert_array_equal(epoch_permutation(r, 50, 1), epoch_permutation(Rng(4), 50, 1))

    def test_unshuffled_order(self):
        d = Dataset(np.arange(4.0)[:, None], None, "x", 0)
        batches = [x[:, 0].tolist() for x, _ in batch_iter(d, 3)]
        assert batches == [[0.0, 1.0, 2.0], [3.0]]

    def test_errors(self):
        d = Dataset(np.zeros((2, 1)), None, "x", 0)
        with pytest.raises(ValueError):
            list(batch_iter(d, 0))
        with pytest.raises(ValueError):
            list(batch_iter(d, 1, shuffle=True))
