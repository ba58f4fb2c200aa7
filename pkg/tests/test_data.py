import json

import numpy as np
import pytest

from dasrf.data import (DatasetSpec, gen_synthetic_corner_cue, generate, load_cifar10_binary, load_cifar10_splits,
                        read_cifar10_records, write_cifar10_binary)
from dasrf.errors import ConfigurationError, FormatError
from dasrf.imageio import read_image, write_pgm, write_ppm


def test_generate_is_seeded_and_balanced():
    spec = DatasetSpec(size={"train": 40, "test": 20}, seed=5)
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a["train"].images, b["train"].images)
    assert np.bincount(a["train"].labels).tolist() == [20, 20]
    assert not np.array_equal(a["train"].images[:20], a["test"].images)
    assert a["train"].images.min() >= 0 and a["train"].images.max() <= 1


def test_corner_cue_glyph_positions():
    spec = DatasetSpec(noise=0.0, channels=1)
    ds = gen_synthetic_corner_cue(spec, 4, np.random.default_rng(0))
    for img, label in zip(ds.images[:, 0], ds.labels):
        r, c = np.argwhere(img == img.max()).mean(axis=0)
        assert (r < 8 and c < 8) if label == 0 else (r > 8 and c > 8)


@pytest.mark.parametrize("kind", ["synthetic_scale_cue", "synthetic_segmentation"])
def test_other_generators(kind):
    ds = generate(DatasetSpec(kind=kind, size={"train": 8}))["train"]
    assert len(ds) == 8
    if kind == "synthetic_segmentation":
        assert ds.task == "segmentation" and ds.labels.shape == (8, 16, 16)


def test_split_is_disjoint():
    ds = generate(DatasetSpec(size={"train": 30}))["train"]
    a, b = ds.split(0.5, np.random.default_rng(0))
    assert len(a) == 15 and len(b) == 15
    rows = {x.tobytes() for x in a.images}
    assert not any(x.tobytes() in rows for x in b.images)


def test_spec_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        DatasetSpec(kind="mnist")
    with pytest.raises(ConfigurationError):
        DatasetSpec.from_dict({"flavour": 1})
    with pytest.raises(ConfigurationError):
        generate(DatasetSpec(kind="cifar10_subset"))
    p = tmp_path / "d.json"
    p.write_text(json.dumps(DatasetSpec(seed=3).to_dict()))
    assert DatasetSpec.load(p).seed == 3


def test_cifar_binary_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.uint8)
    labels = np.array([0, 3, 9, 1, 2])
    write_cifar10_binary(tmp_path / "data_batch_1.bin", images, labels)
    write_cifar10_binary(tmp_path / "test_batch.bin", images[:2], labels[:2])
    ds = load_cifar10_binary(tmp_path / "data_batch_1.bin")
    assert ds.labels.tolist() == labels.tolist()
    np.testing.assert_allclose(ds.images * 255, images)
    splits = load_cifar10_splits(tmp_path, {"train": 3, "test": 2})
    assert len(splits["train"]) == 3 and len(splits["test"]) == 2
    with pytest.raises(FormatError):
        read_cifar10_records(b"\x00" * 100)
    with pytest.raises(ConfigurationError):
        load_cifar10_binary(tmp_path / "nope.bin")


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(0).random((3, 5, 7))
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), img, atol=0.5 / 255 + 1e-9)
    write_pgm(tmp_path / "a.pgm", img[0])
    assert read_image(tmp_path / "a.pgm").shape == (1, 5, 7)
    with pytest.raises(FormatError):
        write_ppm(tmp_path / "b.ppm", img[:2])
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError):
        read_image(tmp_path / "c.ppm")
