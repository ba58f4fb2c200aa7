"""Candidate augmentations for both search spaces.

Geometry conventions
--------------------
An :class:`AffineTransform` holds a 2x3 matrix that maps *output* normalized
coordinates to *input* normalized coordinates (``x`` left to right, ``y`` top
to bottom, pixel centres at ``(2i + 1) / n - 1``).  Ops, on the other hand,
are described by how they move image *content*, in a centred pixel frame with
``y`` pointing up: TranslateX +m moves content right by ``m * W`` pixels,
TranslateY +m moves it up by ``m * H`` pixels, Rotate is counter-clockwise.
:func:`to_affine` converts one into the other.

Registry (magnitude in the op's canonical unit; default, legal range)

=============  ==================  ========  ================  ================
kind           unit                default   range             gradient
=============  ==================  ========  ================  ================
Identity       none                0         [0, 0]            smooth
TranslateX     fraction of width   0.0625    [-0.5, 0.5]       smooth
TranslateY     fraction of height  0.0625    [-0.5, 0.5]       smooth
Rotate         degrees             10        [-180, 180]       smooth
Scale          zoom factor         1.1       [0.5, 2.0]        smooth
ShearX         shear coefficient   0.1       [-0.5, 0.5]       smooth
ShearY         shear coefficient   0.1       [-0.5, 0.5]       smooth
AutoContrast   none                0         [0, 0]            straight-through
Invert         none                0         [0, 0]            smooth
Equalize       none                0         [0, 0]            straight-through
Solarize       threshold           0.5       [0, 1]            straight-through
Posterize      bits kept           4         [1, 8]            straight-through
Color          saturation factor   1.5       [0, 2]            smooth
Brightness     brightness factor   1.2       [0, 2]            smooth
Sharpness      sharpness factor    1.5       [0, 2]            smooth
Cutout         patch fraction      0.25      [0, 0.5]          smooth
=============  ==================  ========  ================  ================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from dasrf.errors import ConfigurationError, DimensionError, InversionError
from dasrf.tensor import ops
from dasrf.tensor.core import Tensor

FILL_POLICIES = ("zeros", "edge")
DEFAULT_FILL = "zeros"


class OpInfo(NamedTuple):
    default: float
    lo: float
    hi: float
    unit: str
    smooth: bool
    affine: bool


REGISTRY: dict[str, OpInfo] = {
    "Identity": OpInfo(0.0, 0.0, 0.0, "none", True, True),
    "TranslateX": OpInfo(0.0625, -0.5, 0.5, "fraction of width", True, True),
    "TranslateY": OpInfo(0.0625, -0.5, 0.5, "fraction of height", True, True),
    "Rotate": OpInfo(10.0, -180.0, 180.0, "degrees", True, True),
    "Scale": OpInfo(1.1, 0.5, 2.0, "zoom factor", True, True),
    "ShearX": OpInfo(0.1, -0.5, 0.5, "shear coefficient", True, True),
    "ShearY": OpInfo(0.1, -0.5, 0.5, "shear coefficient", True, True),
    "AutoContrast": OpInfo(0.0, 0.0, 0.0, "none", False, False),
    "Invert": OpInfo(0.0, 0.0, 0.0, "none", True, False),
    "Equalize": OpInfo(0.0, 0.0, 0.0, "none", False, False),
    "Solarize": OpInfo(0.5, 0.0, 1.0, "threshold", False, False),
    "Posterize": OpInfo(4.0, 1.0, 8.0, "bits kept", False, False),
    "Color": OpInfo(1.5, 0.0, 2.0, "saturation factor", True, False),
    "Brightness": OpInfo(1.2, 0.0, 2.0, "brightness factor", True, False),
    "Sharpness": OpInfo(1.5, 0.0, 2.0, "sharpness factor", True, False),
    "Cutout": OpInfo(0.25, 0.0, 0.5, "patch fraction", True, False),
}

AFFINE_KINDS = tuple(k for k, info in REGISTRY.items() if info.affine)

# One candidate per item of the 13-entry list; the "X/Y" items use their X kind.
FULL13_KINDS = ("Identity", "ShearX", "TranslateX", "Rotate", "AutoContrast", "Invert", "Equalize",
                "Solarize", "Posterize", "Color", "Brightness", "Sharpness", "Cutout")
AFFINE5_KINDS = ("Identity", "TranslateX", "TranslateY", "Scale", "Rotate")


@dataclass(frozen=True)
class TransformOp:
    kind: str
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in REGISTRY:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        info = REGISTRY[self.kind]
        if self.magnitude is None:
            object.__setattr__(self, "magnitude", info.default)
        mag = float(self.magnitude)
        object.__setattr__(self, "magnitude", mag)
        if not (info.lo <= mag <= info.hi):
            raise ConfigurationError(
                f"{self.kind} magnitude {mag} outside legal range [{info.lo}, {info.hi}]")

    @property
    def differentiability(self) -> str:
        return "smooth" if REGISTRY[self.kind].smooth else "straight-through"

    @property
    def is_affine(self) -> bool:
        return REGISTRY[self.kind].affine

    def __str__(self):
        if self.kind == "Identity" or REGISTRY[self.kind].unit == "none":
            return self.kind
        return f"{self.kind}({self.magnitude:g})"


def search_space_ops(name: str) -> list[TransformOp]:
    if name == "affine5":
        return [TransformOp(k) for k in AFFINE5_KINDS]
    if name == "full13":
        return [TransformOp(k) for k in FULL13_KINDS]
    raise ConfigurationError(f"unknown search space {name!r}")


# -- affine algebra ------------------------------------------------------------

@dataclass(frozen=True)
class AffineTransform:
    m: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise DimensionError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]), "Identity")

    @classmethod
    def from3x3(cls, mat, label: str = "") -> "AffineTransform":
        return cls(np.asarray(mat, dtype=np.float64)[:2], label)

    def as3x3(self) -> np.ndarray:
        return np.vstack([self.m, [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m[:, :2]))

    def allclose(self, other: "AffineTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.m, other.m, atol=atol, rtol=0))

    def to_list(self) -> list[list[float]]:
        return self.m.tolist()


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Sampling-map composition: ``warp(compose(a, b), x) == warp(b, warp(a, x))``."""
    label = "+".join(s for s in (a.label, b.label) if s)
    return AffineTransform.from3x3(a.as3x3() @ b.as3x3(), label)


def inverse(t: AffineTransform) -> AffineTransform:
    if abs(t.det) <= 1e-8:
        raise InversionError(f"cannot invert singular transform {t.label or t.m.tolist()}")
    return AffineTransform.from3x3(np.linalg.inv(t.as3x3()), f"inv({t.label})" if t.label else "")


def power(t: AffineTransform, n: int) -> AffineTransform:
    return AffineTransform.from3x3(np.linalg.matrix_power(t.as3x3(), n), t.label)


def content_motion(op: TransformOp, size: tuple[int, int]) -> np.ndarray:
    """3x3 content motion in centred pixel coordinates (y up)."""
    h, w = size
    mag = op.magnitude
    f = np.eye(3)
    if op.kind == "TranslateX":
        f[0, 2] = mag * w
    elif op.kind == "TranslateY":
        f[1, 2] = mag * h
    elif op.kind == "Rotate":
        c, s = math.cos(math.radians(mag)), math.sin(math.radians(mag))
        f[:2, :2] = [[c, -s], [s, c]]
    elif op.kind == "Scale":
        f[0, 0] = f[1, 1] = mag
    elif op.kind == "ShearX":
        f[0, 1] = mag
    elif op.kind == "ShearY":
        f[1, 0] = mag
    elif op.kind != "Identity":
        raise ConfigurationError(f"{op.kind} is not an affine transform")
    return f


def to_affine(op: TransformOp, size: tuple[int, int] = (32, 32)) -> AffineTransform:
    if op.kind == "Identity":
        return AffineTransform.identity()
    h, w = size
    to_norm = np.diag([2.0 / w, -2.0 / h, 1.0])
    f = content_motion(op, size)
    sampling = to_norm @ np.linalg.inv(f) @ np.linalg.inv(to_norm)
    return AffineTransform.from3x3(sampling, str(op))


# -- warping ------------------------------------------------------------------

def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


@lru_cache(maxsize=512)
def _warp_matrix(key: bytes, h: int, w: int, fill: str) -> sp.csr_matrix:
    m = np.frombuffer(key, dtype=np.float64).reshape(2, 3)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xn = (2 * cols + 1) / w - 1
    yn = (2 * rows + 1) / h - 1
    xi = m[0, 0] * xn + m[0, 1] * yn + m[0, 2]
    yi = m[1, 0] * xn + m[1, 1] * yn + m[1, 2]
    px = _snap(((xi + 1) * w - 1) / 2).ravel()
    py = _snap(((yi + 1) * h - 1) / 2).ravel()
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    out_idx = np.arange(h * w)
    r_list, c_list, v_list = [], [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xs, ys = x0 + dx, y0 + dy
        if fill == "edge":
            xs, ys = np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1)
            keep = wt > 0
        else:
            keep = (wt > 0) & (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        r_list.append(out_idx[keep])
        c_list.append((ys * w + xs)[keep])
        v_list.append(wt[keep])
    mat = sp.csr_matrix((np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))),
                        shape=(h * w, h * w))
    mat.sum_duplicates()
    return mat


def warp_matrix(t: AffineTransform, size: tuple[int, int], fill: str = DEFAULT_FILL) -> sp.csr_matrix:
    if fill not in FILL_POLICIES:
        raise ConfigurationError(f"unknown fill policy {fill!r}")
    return _warp_matrix(np.ascontiguousarray(t.m, dtype=np.float64).tobytes(), int(size[0]), int(size[1]), fill)


def warp(t: AffineTransform, image, fill: str = DEFAULT_FILL) -> Tensor:
    """Bilinear resampling of ``image[..., H, W]`` under the sampling map ``t``."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim < 2:
        raise DimensionError("warp needs at least two spatial axes")
    h, w = image.shape[-2:]
    return ops.apply_linear_map(image, warp_matrix(t, (h, w), fill), (h, w))


def validity_mask(t: AffineTransform, size: tuple[int, int]) -> np.ndarray:
    """1 where the sampling map lands inside the source image."""
    ones = np.ones((1, *size))
    return (np.asarray(warp_matrix(t, size, "zeros") @ ones.reshape(-1)).reshape(size) > 1 - 1e-6).astype(float)


# -- pixel-value operations ----------------------------------------------------

def _autocontrast(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, x)


def _equalize(x: np.ndarray) -> np.ndarray:
    levels = np.clip(np.round(x * 255), 0, 255).astype(np.int64)
    flat = levels.reshape(-1, levels.shape[-2] * levels.shape[-1])
    out = np.empty(flat.shape, dtype=x.dtype)
    for i, row in enumerate(flat):
        hist = np.bincount(row, minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[hist > 0][0]
        total = row.size
        if total == cdf_min:
            out[i] = row / 255.0
            continue
        lut = np.round((cdf - cdf_min) / (total - cdf_min) * 255)
        out[i] = lut[row] / 255.0
    return out.reshape(x.shape)


def _solarize(x: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(x < threshold, x, 1.0 - x)


def _posterize(x: np.ndarray, bits: float) -> np.ndarray:
    shift = 8 - int(bits)
    levels = np.clip(np.round(x * 255), 0, 255).astype(np.uint8)
    return ((levels >> shift) << shift).astype(x.dtype) / 255.0


@lru_cache(maxsize=64)
def _sharpness_matrix(h: int, w: int, factor: float) -> sp.csr_matrix:
    # interior pixels: blend with the 3x3 smoothing kernel (centre 5, ring 1) / 13; border untouched
    n = h * w
    rows, cols, vals = [], [], []
    for r in range(h):
        for c in range(w):
            i = r * w + c
            if 0 < r < h - 1 and 0 < c < w - 1:
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        kval = 5.0 if dr == dc == 0 else 1.0
                        rows.append(i)
                        cols.append((r + dr) * w + c + dc)
                        vals.append((1 - factor) * kval / 13.0)
                rows.append(i)
                cols.append(i)
                vals.append(factor)
            else:
                rows.append(i)
                cols.append(i)
                vals.append(1.0)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    return mat


def _cutout_mask(h: int, w: int, frac: float) -> np.ndarray:
    side = int(round(frac * min(h, w)))
    mask = np.ones((h, w))
    if side > 0:
        r0, c0 = (h - side) // 2, (w - side) // 2
        mask[r0:r0 + side, c0:c0 + side] = 0.0
    return mask


def _grayscale(x: Tensor) -> Tensor:
    c = x.shape[-3]
    if c != 3:
        return x
    weights = np.array([0.299, 0.587, 0.114], dtype=x.dtype).reshape(3, 1, 1)
    gray = ops.sum(ops.mul(x, weights), axis=-3, keepdims=True)
    return ops.mul(gray, np.ones((3, 1, 1), dtype=x.dtype))


def apply(op: TransformOp, image, fill: str = DEFAULT_FILL) -> Tensor:
    """Apply one candidate transform to ``image[..., C, H, W]`` with values in [0, 1]."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim < 3:
        raise DimensionError(f"apply expects [..., C, H, W], got shape {image.shape}")
    kind, mag = op.kind, op.magnitude
    h, w = image.shape[-2:]
    if kind == "Identity":
        return image
    if op.is_affine:
        out = warp(to_affine(op, (h, w)), image, fill)
    elif kind == "AutoContrast":
        out = ops.straight_through(image, _autocontrast)
    elif kind == "Equalize":
        out = ops.straight_through(image, _equalize)
    elif kind == "Solarize":
        out = ops.straight_through(image, lambda x: _solarize(x, mag))
    elif kind == "Posterize":
        out = ops.straight_through(image, lambda x: _posterize(x, mag))
    elif kind == "Invert":
        out = ops.sub(1.0, image)
    elif kind == "Brightness":
        out = ops.mul(image, mag)
    elif kind == "Color":
        gray = _grayscale(image)
        out = ops.add(gray, ops.mul(ops.sub(image, gray), mag))
    elif kind == "Sharpness":
        out = ops.apply_linear_map(image, _sharpness_matrix(h, w, float(mag)), (h, w))
    elif kind == "Cutout":
        out = ops.mul(image, _cutout_mask(h, w, mag).astype(image.dtype))
    else:  # pragma: no cover - registry and dispatch are kept in sync
        raise ConfigurationError(f"no implementation for {kind}")
    return ops.clamp(out, 0.0, 1.0)
