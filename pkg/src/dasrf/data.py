"""Synthetic datasets and the CIFAR-10 binary format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dasrf.errors import ConfigurationError, ContractError, FormatError

DATASET_KINDS = ("synthetic_corner_cue", "synthetic_scale_cue", "cifar10_subset", "synthetic_segmentation")
CIFAR_RECORD = 3073

GLYPH = np.array([[0.0, 1.0, 0.0],
                  [1.0, 1.0, 1.0],
                  [0.0, 1.0, 0.0]])


@dataclass
class Dataset:
    images: np.ndarray           # (N, C, H, W) in [0, 1]
    labels: np.ndarray           # (N,) or (N, H, W) ints
    num_classes: int
    task: str = "classification"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels disagree in length")
        if self.task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.task)

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Disjoint random split; the first part holds ``floor(fraction * N)`` samples."""
        order = rng.permutation(len(self))
        cut = int(len(self) * fraction)
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


@dataclass
class DatasetSpec:
    kind: str = "synthetic_corner_cue"
    size: dict = field(default_factory=lambda: {"train": 256, "test": 128})
    image_size: tuple[int, int] = (16, 16)
    classes: int = 2
    seed: int = 0
    channels: int = 3
    noise: float = 0.5
    margin: int = 3
    path: str | None = None      # cifar10_subset only

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}; known: {DATASET_KINDS}")
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.classes < 2:
            raise ConfigurationError("a dataset needs at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetSpec":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"dataset spec file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _corner_origin(label: int, h: int, w: int, g: int, margin: int) -> tuple[int, int]:
    top, left = margin, margin
    bottom, right = h - margin - g, w - margin - g
    return [(top, left), (bottom, right), (top, right), (bottom, left)][label]


def gen_synthetic_corner_cue(spec: DatasetSpec, n: int | None = None,
                             rng: np.random.Generator | None = None) -> Dataset:
    """One glyph per image in a class-specific corner, over uniform noise.

    The glyph keeps ``margin`` pixels from the border so a shallow network
    sees the same local evidence in every corner.
    """
    h, w = spec.image_size
    g = GLYPH.shape[0]
    if h < 16 or w < 16:
        raise ConfigurationError(f"corner-cue images must be at least 16x16, got {h}x{w}")
    if spec.classes > 4:
        raise ConfigurationError("corner cue supports at most four classes (one per corner)")
    if 2 * (spec.margin + g) > min(h, w):
        raise ConfigurationError(f"glyph with margin {spec.margin} does not fit in {h}x{w}")
    rng = rng or np.random.default_rng(spec.seed)
    n = n if n is not None else sum(spec.size.values())
    labels = _balanced_labels(n, spec.classes, rng)
    images = rng.random((n, spec.channels, h, w)) * spec.noise
    for i, y in enumerate(labels):
        r, c = _corner_origin(int(y), h, w, g, spec.margin)
        patch = images[i, :, r:r + g, c:c + g]
        images[i, :, r:r + g, c:c + g] = np.maximum(patch, GLYPH)
    return Dataset(images, labels, spec.classes)


def gen_synthetic_scale_cue(spec: DatasetSpec, n: int | None = None,
                            rng: np.random.Generator | None = None) -> Dataset:
    """A centred square outline whose side encodes the class."""
    h, w = spec.image_size
    sides = [3 + 2 * k for k in range(spec.classes)]
    if sides[-1] + 2 > min(h, w):
        raise ConfigurationError(f"{spec.classes} scale classes do not fit in {h}x{w}")
    rng = rng or np.random.default_rng(spec.seed)
    n = n if n is not None else sum(spec.size.values())
    labels = _balanced_labels(n, spec.classes, rng)
    images = rng.random((n, spec.channels, h, w)) * spec.noise
    for i, y in enumerate(labels):
        s = sides[int(y)]
        r0, c0 = (h - s) // 2, (w - s) // 2
        box = np.zeros((h, w), dtype=bool)
        box[r0:r0 + s, c0:c0 + s] = True
        box[r0 + 1:r0 + s - 1, c0 + 1:c0 + s - 1] = False
        images[i, :, box] = 1.0
    return Dataset(images, labels, spec.classes)


def gen_synthetic_segmentation(spec: DatasetSpec, n: int | None = None,
                               rng: np.random.Generator | None = None) -> Dataset:
    """Random axis-aligned blobs; class k is drawn with a class-specific colour."""
    h, w = spec.image_size
    rng = rng or np.random.default_rng(spec.seed)
    n = n if n is not None else sum(spec.size.values())
    colours = np.linspace(0.2, 1.0, spec.classes)
    images = np.empty((n, spec.channels, h, w))
    labels = np.zeros((n, h, w), dtype=np.int64)
    for i in range(n):
        for _ in range(3):
            k = int(rng.integers(1, spec.classes))
            bh, bw = rng.integers(3, max(4, h // 2)), rng.integers(3, max(4, w // 2))
            r, c = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
            labels[i, r:r + bh, c:c + bw] = k
        images[i] = colours[labels[i]][None] + rng.normal(0.0, spec.noise * 0.2, (spec.channels, h, w))
    return Dataset(np.clip(images, 0, 1), labels, spec.classes, "segmentation")


_GENERATORS = {
    "synthetic_corner_cue": gen_synthetic_corner_cue,
    "synthetic_scale_cue": gen_synthetic_scale_cue,
    "synthetic_segmentation": gen_synthetic_segmentation,
}


def generate(spec: DatasetSpec) -> dict[str, Dataset]:
    """All splits from one seeded stream, so splits never share a sample draw."""
    if spec.kind == "cifar10_subset":
        if not spec.path:
            raise ConfigurationError("cifar10_subset needs a 'path' to the binary batches")
        return load_cifar10_splits(spec.path, spec.size)
    rng = np.random.default_rng(spec.seed)
    fn = _GENERATORS[spec.kind]
    return {name: fn(spec, int(count), rng) for name, count in sorted(spec.size.items())}


# -- CIFAR-10 binary -----------------------------------------------------------

def read_cifar10_records(blob: bytes, take: int | None = None) -> Dataset:
    if len(blob) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 binary size {len(blob)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if take is not None:
        raw = raw[:take]
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10)


def load_cifar10_binary(path, take: int | None = None) -> Dataset:
    """One ``*.bin`` file, or every ``data_batch_*.bin`` in a directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"CIFAR-10 path not found: {path}")
    files = sorted(path.glob("data_batch_*.bin")) if path.is_dir() else [path]
    if not files:
        raise ConfigurationError(f"no data_batch_*.bin files under {path}")
    blob = b"".join(f.read_bytes() for f in files)
    return read_cifar10_records(blob, take)


def load_cifar10_splits(path, size: dict) -> dict[str, Dataset]:
    path = Path(path)
    out = {"train": load_cifar10_binary(path, size.get("train"))}
    test = path / "test_batch.bin" if path.is_dir() else None
    if test is not None and test.exists():
        out["test"] = load_cifar10_binary(test, size.get("test"))
    return out


def write_cifar10_binary(path, images, labels) -> None:
    """``images`` are (N, 3, 32, 32) uint8 or floats in [0, 1]."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255), 0, 255).astype(np.uint8)
    if images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR-10 images must be (N, 3, 32, 32), got {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images.reshape(len(images), -1)], axis=1).tobytes())
