import numpy as np
import pytest

from dasrf import transforms as tf
from dasrf.errors import ConfigurationError, DimensionError, InversionError


def _dot(size=16, r=8, c=5):
    img = np.zeros((1, 1, size, size))
    img[0, 0, r, c] = 1.0
    return img


def test_registry_defaults_within_range():
    for kind, info in tf.REGISTRY.items():
        assert info.lo <= info.default <= info.hi
        assert tf.TransformOp(kind).magnitude == info.default


def test_search_spaces():
    assert len(tf.search_space_ops("full13")) == 13
    assert [op.kind for op in tf.search_space_ops("affine5")] == list(tf.AFFINE5_KINDS)
    with pytest.raises(ConfigurationError):
        tf.search_space_ops("nope")


def test_magnitude_out_of_range_rejected():
    with pytest.raises(ConfigurationError):
        tf.TransformOp("Rotate", 400)
    with pytest.raises(ConfigurationError):
        tf.TransformOp("Zoom")


def test_translate_directions():
    size = 16
    right = tf.apply(tf.TransformOp("TranslateX", 2 / size), _dot()).data[0, 0]
    assert np.argwhere(right > 0.5).tolist() == [[8, 7]]
    up = tf.apply(tf.TransformOp("TranslateY", 1 / size), _dot()).data[0, 0]
    assert np.argwhere(up > 0.5).tolist() == [[7, 5]]


def test_compose_matches_sequential_warps():
    rng = np.random.default_rng(0)
    img = rng.random((1, 1, 12, 12))
    a = tf.to_affine(tf.TransformOp("TranslateX", 1 / 12), (12, 12))
    b = tf.to_affine(tf.TransformOp("TranslateY", 2 / 12), (12, 12))
    seq = tf.warp(b, tf.warp(a, img)).data
    once = tf.warp(tf.compose(a, b), img).data
    np.testing.assert_allclose(seq, once, atol=1e-6)


def test_inverse_and_power():
    a = tf.to_affine(tf.TransformOp("Rotate", 20), (16, 16))
    assert tf.compose(a, tf.inverse(a)).allclose(tf.AffineTransform.identity())
    assert tf.power(a, 3).allclose(tf.compose(tf.compose(a, a), a))
    with pytest.raises(InversionError):
        tf.inverse(tf.AffineTransform(np.zeros((2, 3))))


def test_apply_rejects_bad_rank():
    with pytest.raises(DimensionError):
        tf.apply(tf.TransformOp("Invert"), np.zeros((4, 4)))


def test_pixel_ops():
    img = np.full((1, 3, 4, 4), 0.25)
    assert np.allclose(tf.apply(tf.TransformOp("Invert"), img).data, 0.75)
    assert np.allclose(tf.apply(tf.TransformOp("Brightness", 2.0), img).data, 0.5)
    assert np.allclose(tf.apply(tf.TransformOp("Solarize", 0.2), img).data, 0.75)
    cut = tf.apply(tf.TransformOp("Cutout", 0.5), np.ones((1, 1, 8, 8))).data[0, 0]
    assert cut[2:6, 2:6].sum() == 0 and cut.sum() == 48
    post = tf.apply(tf.TransformOp("Posterize", 1), np.linspace(0, 1, 16).reshape(1, 1, 4, 4)).data
    np.testing.assert_allclose(np.unique(post), [0.0, 128 / 255], atol=1e-6)


def test_validity_mask_shrinks_under_translation():
    a = tf.to_affine(tf.TransformOp("TranslateX", 0.25), (8, 8))
    mask = tf.validity_mask(a, (8, 8))
    assert mask[:, :2].sum() == 0 and mask[:, 2:].all()


def test_edge_fill_keeps_border_values():
    img = np.ones((1, 1, 8, 8))
    out = tf.apply(tf.TransformOp("TranslateX", 0.25), img, fill="edge").data
    assert np.allclose(out, 1.0)
