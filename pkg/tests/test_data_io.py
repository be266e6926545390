import gzip
import struct

import numpy as np
import pytest

from rho_vae import data_io
from rho_vae.errors import IdxFormatError, InvalidParameterError


def _idx(count, rows, cols, pixels, magic=0x803):
    return struct.pack(">IIII", magic, count, rows, cols) + bytes(pixels)


def test_read_minimal_stream():
    dataset = data_io.read_idx_images(_idx(1, 1, 1, [0xFF]))
    assert dataset.count == 1
    assert dataset.n == 1
    assert dataset.images[0, 0] == 1.0


def test_read_rejects_wrong_magic():
    with pytest.raises(IdxFormatError, match="unexpected magic"):
        data_io.read_idx_images(_idx(1, 1, 1, [0], magic=0x801))


def test_read_rejects_truncation():
    with pytest.raises(IdxFormatError, match="truncated payload"):
        data_io.read_idx_images(_idx(2, 2, 2, []))
    with pytest.raises(IdxFormatError, match="truncated header"):
        data_io.read_idx_images(b"\x00\x00\x08")


def test_read_rejects_empty_image_dimensions():
    with pytest.raises(IdxFormatError, match="empty image dimensions"):
        data_io.read_idx_images(_idx(3, 0, 4, []))
    with pytest.raises(IdxFormatError, match="empty image dimensions"):
        data_io.read_idx_images(_idx(3, 4, 0, []))


def test_byte_streams_survive_read_then_write_unchanged():
    payload = _idx(4, 8, 8, list(range(256)))
    assert data_io.write_idx_images(data_io.read_idx_images(payload)) == payload


def test_dataset_is_read_only_and_validated():
    dataset = data_io.Dataset(images=np.zeros((2, 4)), rows=2, cols=2)
    with pytest.raises(ValueError):
        dataset.images[0, 0] = 1.0
    with pytest.raises(InvalidParameterError):
        data_io.Dataset(images=np.full((1, 4), 2.0), rows=2, cols=2)
    with pytest.raises(InvalidParameterError):
        data_io.Dataset(images=np.zeros((1, 5)), rows=2, cols=2)
    with pytest.raises(InvalidParameterError, match="finite"):
        data_io.Dataset(images=[[np.nan, 0.5]], rows=1, cols=2)


def test_written_idx_reads_back_quantised(tmp_path):
    train = data_io.synth_correlated(3, 4, 0.5, seed=1)
    test = data_io.synth_correlated(2, 4, 0.5, seed=2, split="test")
    data_io.save_idx_directory(tmp_path, train, test)
    loaded_train, loaded_test = data_io.load_idx_directory(tmp_path)
    assert loaded_test.split == "test"
    assert loaded_train.image_shape == (4, 4)
    assert np.max(np.abs(loaded_train.images - train.images)) <= 0.5 / 255.0 + 1e-12


def test_gzip_files_are_accepted(tmp_path):
    payload = _idx(1, 2, 2, [0, 51, 102, 255])
    (tmp_path / f"{data_io.TRAIN_IMAGES}.gz").write_bytes(gzip.compress(payload))
    (tmp_path / data_io.TEST_IMAGES).write_bytes(payload)
    train, test = data_io.load_idx_directory(tmp_path)
    np.testing.assert_allclose(train.images, [[0.0, 0.2, 0.4, 1.0]])
    assert np.array_equal(train.images, test.images)


def test_missing_split_file_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="t10k-images-idx3-ubyte"):
        (tmp_path / data_io.TRAIN_IMAGES).write_bytes(_idx(1, 1, 1, [1]))
        data_io.load_idx_directory(tmp_path)


def test_uncorrelated_synthetic_pixels():
    dataset = data_io.synth_correlated(400, 8, 0.0, seed=3)
    rows = dataset.images.reshape(-1, 8, 8)
    assert abs(data_io.lag1_autocorrelation(rows)) < 0.05


def test_correlated_field_has_requested_lag_one_correlation():
    field = data_io.correlated_field(400, 8, 0.9, seed=4)
    assert abs(data_io.lag1_autocorrelation(field) - 0.9) < 0.05


def test_correlated_field_rows_are_correlated_with_their_neighbours():
    field = data_io.correlated_field(400, 8, 0.9, seed=4)
    assert abs(data_io.lag1_autocorrelation(field.swapaxes(1, 2)) - 0.9) < 0.05


def test_correlated_field_variance_matches_the_requested_scale():
    field = data_io.correlated_field(2000, 8, 0.8, seed=6, variance=4.0)
    assert np.var(field) == pytest.approx(4.0, rel=0.1)
    with pytest.raises(InvalidParameterError):
        data_io.correlated_field(1, 8, 0.8, seed=6, variance=0.0)


def test_synthetic_pixels_are_far_from_uninformative_grey():
    dataset = data_io.synth_correlated(200, 8, 0.8, seed=5)
    assert np.mean(np.abs(dataset.images - 0.5)) > 0.25


def test_synthetic_images_are_deterministic_and_in_range():
    first = data_io.synth_correlated(10, 5, 0.8, seed=(7, 0))
    second = data_io.synth_correlated(10, 5, 0.8, seed=(7, 0))
    assert first.images.tobytes() == second.images.tobytes()
    assert first.images.min() > 0.0 and first.images.max() < 1.0


def test_synth_splits_use_distinct_streams():
    train, test = data_io.synth_splits(5, 5, 4, 0.8, seed=2)
    assert train.split == "train" and test.split == "test"
    assert not np.array_equal(train.images, test.images)


def test_batches_examples():
    dataset = data_io.Dataset(images=np.zeros((5, 1)), rows=1, cols=1)
    slices = data_io.batches(dataset, 2, epoch_seed=(0, 3, 1))
    assert [len(piece) for piece in slices] == [2, 2, 1]
    assert sorted(np.concatenate(slices).tolist()) == [0, 1, 2, 3, 4]

    assert len(data_io.batches(dataset, 5, epoch_seed=1)) == 1
    assert len(data_io.batches(dataset, 50, epoch_seed=1)) == 1

    again = data_io.batches(dataset, 2, epoch_seed=(0, 3, 1))
    assert all(np.array_equal(a, b) for a, b in zip(slices, again))


def test_batches_rejects_empty_batch_size():
    dataset = data_io.Dataset(images=np.zeros((2, 1)), rows=1, cols=1)
    with pytest.raises(InvalidParameterError):
        data_io.batches(dataset, 0, epoch_seed=0)
