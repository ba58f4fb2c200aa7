from fractions import Fraction

import numpy as np
import pytest

from dasrf import transforms as tf
from dasrf.cell import Genotype, chain_cell
from dasrf.errors import ConfigurationError, ContractError, DimensionError
from dasrf.temporal import (ShiftConfig, aggregate_classification, aggregate_segmentation, dump_video, gate_count,
                            make_video, replica_video, shift_channels, temporal_shift)
from dasrf.tensor import Tensor
from dasrf.imageio import read_image


def _translate_x(px, size=16):
    return Genotype("custom", 1, 2, [(0, 1, tf.TransformOp("TranslateX", px / size))])


def test_shift_moves_expected_channels():
    x = np.arange(1, 5, dtype=float).reshape(1, 4, 1, 1, 1) * np.ones((1, 4, 8, 1, 1))
    out = shift_channels(Tensor(x), 1).data[0, :, :, 0, 0]
    assert out[:, 0].tolist() == [0, 1, 2, 3]       # from t - 1
    assert out[:, 1].tolist() == [2, 3, 4, 0]       # from t + 1
    assert out[:, 2].tolist() == [1, 2, 3, 4]       # untouched


def test_single_frame_shift_is_identity():
    x = Tensor(np.random.default_rng(0).random((2, 1, 8, 3, 3)))
    assert shift_channels(x, 1) is x


def test_fold_and_gates():
    cfg = ShiftConfig("gated_shift", Fraction(1, 8))
    assert cfg.fold(16) == 2 and gate_count(cfg, 16) == 4
    with pytest.raises(ConfigurationError):
        cfg.fold(4)
    with pytest.raises(ConfigurationError):
        temporal_shift(Tensor(np.zeros((1, 2, 8, 1, 1))), cfg, None)
    assert ShiftConfig.from_dict(cfg.to_dict()) == cfg


def test_gated_shift_with_closed_gates_is_identity():
    x = Tensor(np.random.default_rng(0).random((1, 3, 8, 2, 2)))
    out = temporal_shift(x, ShiftConfig("gated_shift"), Tensor(np.full(2, -1e3)))
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_video_frames_accumulate_transforms():
    video = make_video(np.random.default_rng(0).random((1, 1, 16, 16)), _translate_x(1), 4)
    assert video.frames.shape == (1, 4, 1, 16, 16)
    step = tf.to_affine(tf.TransformOp("TranslateX", 1 / 16), (16, 16))
    for t, transform in enumerate(video.per_frame_transform):
        assert transform.allclose(tf.power(step, t + 1))


def test_replica_and_permutation():
    img = np.random.default_rng(0).random((2, 3, 8, 8))
    video = replica_video(img, 3)
    assert all(np.array_equal(video.frames.data[:, t], img.astype(np.float32)) for t in range(3))
    moved = make_video(img, _translate_x(1, 8), 3).permuted((2, 0, 1))
    assert moved.per_frame_transform[0].allclose(tf.power(tf.to_affine(tf.TransformOp("TranslateX", 1 / 8), (8, 8)), 3))


def test_aggregate_classification_means_frames():
    logits = Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
    np.testing.assert_allclose(aggregate_classification(logits).data, [[4, 5, 6, 7]])
    with pytest.raises(DimensionError):
        aggregate_classification(Tensor(np.zeros((2, 4))))


def test_segmentation_undo_restores_maps():
    size = 16
    maps = np.zeros((1, 1, 2, size, size))
    maps[0, 0, 1, :, 5:9] = 1.0
    video = make_video(np.zeros((1, 1, size, size)), _translate_x(2), 3)
    # each frame's prediction is the ground truth moved by that frame's transform
    framed = np.stack([tf.warp(t, Tensor(maps[:, 0])).data for t in video.per_frame_transform], axis=1)
    out, mask = aggregate_segmentation(Tensor(framed), video)
    assert mask[:, : size - 6].all() and not mask[:, -1].any()
    np.testing.assert_allclose(out.data[0, 1][mask > 0], maps[0, 0, 1][mask > 0], atol=1e-6)
    with pytest.raises(ContractError):
        aggregate_segmentation(Tensor(framed[:, :2]), video)


def test_dump_video(tmp_path):
    video = make_video(np.random.default_rng(0).random((1, 3, 8, 8)), _translate_x(1, 8), 2)
    dump_video(video, tmp_path)
    frame = read_image(tmp_path / "frame_001.ppm")
    np.testing.assert_allclose(frame, video.frames.data[0, 1], atol=1 / 255)
    assert (tmp_path / "transforms.json").exists()


def test_video_needs_frames():
    with pytest.raises(ConfigurationError):
        make_video(np.zeros((1, 1, 4, 4)), chain_cell([[tf.TransformOp("Identity")]]), 0)
