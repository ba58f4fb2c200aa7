"""Image-to-video expansion, temporal channel shifting and frame aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from dasrf import transforms as tf
from dasrf.cell import CellSpec, Genotype, cell_affine, cell_forward
from dasrf.errors import ConfigurationError, ContractError, DimensionError
from dasrf.imageio import write_ppm
from dasrf.tensor import ops
from dasrf.tensor.core import Tensor, record
from dasrf.transforms import AffineTransform

DEFAULT_FRAMES = 5


@dataclass
class VideoBatch:
    frames: Tensor                      # (N, T, C, H, W)
    per_frame_transform: list[AffineTransform]
    source: Tensor

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise DimensionError(f"video frames must be (N, T, C, H, W), got {self.frames.shape}")
        if self.frames.shape[1] != len(self.per_frame_transform):
            raise ContractError("one cumulative transform per frame is required")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    def permuted(self, order) -> "VideoBatch":
        """Reorder frames (the re-shuffle ablation); per-frame content is untouched."""
        order = list(order)
        return VideoBatch(ops.getitem(self.frames, (slice(None), np.array(order))),
                          [self.per_frame_transform[i] for i in order], self.source)


@dataclass
class ShiftConfig:
    mode: str = "tsm_fixed"
    shift_fraction: Fraction = Fraction(1, 8)
    insertion_points: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in ("tsm_fixed", "gated_shift"):
            raise ConfigurationError(f"unknown shift mode {self.mode!r}")
        self.shift_fraction = Fraction(self.shift_fraction).limit_denominator(1 << 16)
        if not (0 < 2 * self.shift_fraction <= 1):
            raise ConfigurationError(f"shift fraction {self.shift_fraction} must satisfy 0 < 2f <= 1")
        self.insertion_points = tuple(int(p) for p in self.insertion_points)

    def fold(self, channels: int) -> int:
        fold = int(channels * self.shift_fraction)
        if fold < 1:
            raise ConfigurationError(
                f"shift fraction {self.shift_fraction} moves no channel out of {channels}")
        return fold

    def to_dict(self) -> dict:
        return {"mode": self.mode, "shift_fraction": str(self.shift_fraction),
                "insertion_points": list(self.insertion_points)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftConfig":
        return cls(d.get("mode", "tsm_fixed"), Fraction(str(d.get("shift_fraction", "1/8"))),
                   tuple(d.get("insertion_points", ())))


def make_video(image, source, T: int = DEFAULT_FRAMES, masks=None, overrides=None,
               fill: str | None = None) -> VideoBatch:
    """Frame t (t = 1..T) is the cell (or discrete genotype) applied t times.

    ``image`` is (N, C, H, W) or (C, H, W).  Masks/overrides only apply to a
    relaxed :class:`CellSpec` source.
    """
    if T < 1:
        raise ConfigurationError(f"video length must be >= 1, got {T}")
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 3:
        image = ops.reshape(image, (1, *image.shape))
    cell = source.to_cell() if isinstance(source, Genotype) else source
    if not isinstance(cell, CellSpec):
        raise ConfigurationError("make_video needs a Genotype or a CellSpec")
    if fill is not None:
        cell.fill = fill
    size = image.shape[-2:]
    step = cell_affine(cell, size, overrides)
    frames, transforms = [], []
    current = image
    for t in range(T):
        current = cell_forward(cell, current, masks, overrides)
        frames.append(current)
        transforms.append(tf.power(step, t + 1))
    return VideoBatch(ops.stack(frames, axis=1), transforms, image)


def replica_video(image, T: int = DEFAULT_FRAMES) -> VideoBatch:
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 3:
        image = ops.reshape(image, (1, *image.shape))
    return VideoBatch(ops.stack([image] * T, axis=1), [AffineTransform.identity()] * T, image)


# -- temporal shift --------------------------------------------------------------

def _shift_forward(x: np.ndarray, fold: int) -> np.ndarray:
    out = x.copy()
    out[:, 1:, :fold] = x[:, :-1, :fold]
    out[:, 0, :fold] = 0
    out[:, :-1, fold:2 * fold] = x[:, 1:, fold:2 * fold]
    out[:, -1, fold:2 * fold] = 0
    return out


def _shift_adjoint(g: np.ndarray, fold: int) -> np.ndarray:
    out = g.copy()
    out[:, :-1, :fold] = g[:, 1:, :fold]
    out[:, -1, :fold] = 0
    out[:, 1:, fold:2 * fold] = g[:, :-1, fold:2 * fold]
    out[:, 0, fold:2 * fold] = 0
    return out


def shift_channels(features: Tensor, fold: int) -> Tensor:
    """Channels [0, fold) read frame t-1, [fold, 2 fold) read frame t+1; zeros at the ends.

    A single-frame input is returned unchanged: there is no neighbour to mix.
    """
    if features.ndim != 5:
        raise DimensionError(f"temporal shift expects (N, T, C, H, W), got {features.shape}")
    if features.shape[1] == 1:
        return features
    return record(_shift_forward(features.data, fold), (features,),
                  lambda g: (_shift_adjoint(g, fold),))


def gate_count(cfg: ShiftConfig, channels: int) -> int:
    return 2 * cfg.fold(channels) if cfg.mode == "gated_shift" else 0


def temporal_shift(features: Tensor, cfg: ShiftConfig, gate_params: Tensor | None = None) -> Tensor:
    c = features.shape[2]
    fold = cfg.fold(c)
    shifted = shift_channels(features, fold)
    if cfg.mode == "tsm_fixed" or features.shape[1] == 1:
        return shifted
    if gate_params is None or gate_params.shape != (2 * fold,):
        raise ConfigurationError(f"gated shift needs {2 * fold} gate parameters")
    gates = ops.concat([ops.sigmoid(gate_params), Tensor(np.zeros(c - 2 * fold), dtype=features.dtype)])
    gates = ops.reshape(gates, (1, 1, c, 1, 1))
    return ops.add(features, ops.mul(gates, ops.sub(shifted, features)))


# -- aggregation -----------------------------------------------------------------

def aggregate_classification(logits: Tensor) -> Tensor:
    if logits.ndim != 3:
        raise DimensionError(f"expected (N, T, K) logits, got {logits.shape}")
    if logits.shape[1] == 1:
        return ops.reshape(logits, (logits.shape[0], logits.shape[2]))
    return ops.mean(logits, axis=1)


def aggregate_segmentation(maps: Tensor, video: VideoBatch) -> tuple[Tensor, np.ndarray]:
    """Undo each frame's transform on its logit map and average the valid frames.

    Returns the (N, K, H, W) logits and an (H, W) validity mask.
    """
    if maps.ndim != 5:
        raise DimensionError(f"expected (N, T, K, H, W) maps, got {maps.shape}")
    n, t, k, h, w = maps.shape
    if t != video.num_frames:
        raise ContractError("maps and video disagree on the number of frames")
    acc = None
    weight = np.zeros((h, w))
    for i, transform in enumerate(video.per_frame_transform):
        undo = tf.inverse(transform)
        frame_map = ops.getitem(maps, (slice(None), i))
        valid = np.asarray(tf.warp_matrix(undo, (h, w)) @ np.ones(h * w)).reshape(h, w)
        contrib = ops.mul(tf.warp(undo, frame_map), valid.astype(maps.dtype))
        acc = contrib if acc is None else ops.add(acc, contrib)
        weight += valid
    mask = (weight > 1e-6).astype(np.float64)
    out = ops.mul(acc, (mask / np.where(mask > 0, weight, 1.0)).astype(maps.dtype))
    return out, mask


def dump_video(video: VideoBatch, directory, index: int = 0) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = video.frames.data[index]
    for t in range(frames.shape[0]):
        write_ppm(directory / f"frame_{t:03}.ppm", frames[t])
    sidecar = {"frames": frames.shape[0],
               "cumulative_transforms": [tr.to_list() for tr in video.per_frame_transform]}
    (directory / "transforms.json").write_text(json.dumps(sidecar, indent=2))
    return directory
