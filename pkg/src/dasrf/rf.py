"""Theoretical, fused and empirical receptive fields."""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dasrf.errors import ConfigurationError, ContractError
from dasrf.imageio import write_pgm
from dasrf.tensor.core import Tape, Tensor, backward
from dasrf.tensor.layers import LayerSpec

ROTATION_PIVOT = (0.5, 0.5)     # centre of the region's corner pixel


# -- theoretical ----------------------------------------------------------------

def theoretical_rf_per_layer(layers: Sequence[LayerSpec]) -> list[int]:
    sizes, r, jump = [], 1, 1
    for layer in layers:
        r += (layer.effective_kernel[0] - 1) * jump
        jump *= layer.stride[0]
        sizes.append(r)
    return sizes


def theoretical_rf(layers: Sequence[LayerSpec]) -> int:
    """r0 = sum_l (k_l - 1) prod_{j<l} s_j + 1; an empty stack sees one pixel."""
    sizes = theoretical_rf_per_layer(layers)
    return sizes[-1] if sizes else 1


def parse_layers(text: str) -> list[LayerSpec]:
    """``k3s1,k3s2d2`` -> conv LayerSpecs (stride and dilation default to 1)."""
    out = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        m = re.fullmatch(r"k(\d+)(?:s(\d+))?(?:d(\d+))?", tok)
        if not m:
            raise ConfigurationError(f"cannot parse layer token {tok!r}; expected e.g. k3s1")
        k, s, d = int(m.group(1)), int(m.group(2) or 1), int(m.group(3) or 1)
        out.append(LayerSpec.conv(k, s, 0, d))
    return out


# -- geometry ---------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ConfigurationError(f"rect corners out of order: {self}")

    @classmethod
    def square(cls, r: float, x: float = 0.0, y: float = 0.0) -> "Rect":
        return cls(x, y, x + r, y + r)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def intersect(self, other: "Rect") -> "Rect | None":
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x1 >= x2 or y1 >= y2:
            return None
        return Rect(x1, y1, x2, y2)


def rect_intersection_area(a: Rect, b: Rect) -> float:
    return max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1)) * max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))


def _shoelace(v: np.ndarray) -> float:
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class Poly:
    """Convex polygon, stored counter-clockwise."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        if _shoelace(v) < 0:
            v = v[::-1]
        self.vertices = v
        if len(v) >= 3:
            e = np.roll(v, -1, axis=0) - v
            cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
            if (cross < -1e-9).any():
                raise ConfigurationError("polygon is not convex")

    @classmethod
    def from_rect(cls, r: Rect) -> "Poly":
        return cls([(r.x1, r.y1), (r.x2, r.y1), (r.x2, r.y2), (r.x1, r.y2)])

    @property
    def area(self) -> float:
        return abs(_shoelace(self.vertices))

    def transformed(self, m: np.ndarray) -> "Poly":
        m = np.asarray(m, dtype=np.float64)
        return Poly(self.vertices @ m[:2, :2].T + m[:2, 2])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        inside = np.ones(len(pts), dtype=bool)
        v = self.vertices
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            inside &= (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]) >= 0
        return inside


def _clip(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by the CCW convex ``clipper``."""
    out = subject
    for a, b in zip(clipper, np.roll(clipper, -1, axis=0)):
        if len(out) == 0:
            break
        inp, out = out, []
        side = lambda p: (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        for p, q in zip(inp, np.roll(inp, -1, axis=0)):
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                out.append(p + (q - p) * (sp / (sp - sq)))
        out = np.asarray(out).reshape(-1, 2)
    return out


def poly_intersection(a: Poly, b: Poly) -> Poly | None:
    if a.area == 0 or b.area == 0:
        return None
    v = _clip(a.vertices, b.vertices)
    if len(v) < 3 or abs(_shoelace(v)) < 1e-15:
        return None
    return Poly(v)


def poly_clip_area(a: Poly, b: Poly) -> float:
    inter = poly_intersection(a, b)
    return 0.0 if inter is None else inter.area


def union_area_rects(rects: Sequence[Rect]) -> float:
    """Inclusion-exclusion; the intersection of rects is again a rect."""
    total = 0.0
    for k in range(1, len(rects) + 1):
        for combo in itertools.combinations(rects, k):
            inter = combo[0]
            for r in combo[1:]:
                inter = inter.intersect(r)
                if inter is None:
                    break
            if inter is not None:
                total += (-1) ** (k + 1) * inter.area
    return total


def union_area_polys(polys: Sequence[Poly]) -> float:
    """Inclusion-exclusion with convex clipping for the k-way intersections."""
    total = 0.0
    for k in range(1, len(polys) + 1):
        for combo in itertools.combinations(polys, k):
            inter = combo[0]
            for p in combo[1:]:
                inter = poly_intersection(inter, p)
                if inter is None:
                    break
            if inter is not None:
                total += (-1) ** (k + 1) * inter.area
    return total


def monte_carlo_union_area(polys: Sequence[Poly], samples: int = 10**7,
                           rng: np.random.Generator | int = 0, chunk: int = 10**6) -> tuple[float, float]:
    """Point-in-union estimate and its standard error."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    allv = np.concatenate([p.vertices for p in polys])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    box = float(np.prod(hi - lo))
    hits, done = 0, 0
    while done < samples:
        n = min(chunk, samples - done)
        pts = lo + rng.random((n, 2)) * (hi - lo)
        inside = np.zeros(n, dtype=bool)
        for p in polys:
            inside |= p.contains(pts)
        hits += int(inside.sum())
        done += n
    frac = hits / samples
    return box * frac, box * math.sqrt(frac * (1 - frac) / samples)


# -- fused receptive field -----------------------------------------------------

def _rotation(theta_deg: float, pivot) -> np.ndarray:
    c, s = math.cos(math.radians(theta_deg)), math.sin(math.radians(theta_deg))
    px, py = pivot
    return np.array([[c, -s, px - c * px + s * py], [s, c, py - s * px - c * py], [0, 0, 1]])


def frame_regions(kind: str, params: Sequence[float], r: float, n_frames: int,
                  pivot=ROTATION_PIVOT) -> list[Poly]:
    """The base r x r region mapped by each frame's cumulative transform."""
    if r < 1 or n_frames < 1:
        raise ConfigurationError("fused RF needs r >= 1 and at least one frame")
    base = Poly.from_rect(Rect.square(r))
    params = list(params)
    if kind == "translate":
        tx, ty = (params + [params[0]])[:2] if len(params) == 1 else params[:2]
        steps = [np.array([[1, 0, i * tx], [0, 1, i * ty], [0, 0, 1.0]]) for i in range(n_frames)]
    elif kind == "rotate":
        steps = [_rotation(i * params[0], pivot) for i in range(n_frames)]
    elif kind == "scale":
        steps = [np.diag([params[0] ** i, params[0] ** i, 1.0]) for i in range(n_frames)]
    else:
        raise ConfigurationError(f"unsupported fused-RF transform {kind!r}; use translate, rotate or scale")
    return [base.transformed(m) for m in steps]


def fused_rf_area(kind: str, params: Sequence[float], r: int = 3, n_frames: int = 3,
                  pivot=ROTATION_PIVOT) -> float:
    """Area of the union of the per-frame RF regions in the original image frame."""
    regions = frame_regions(kind, params, r, n_frames, pivot)
    if kind == "translate":
        rects = [Rect(*p.vertices.min(axis=0), *p.vertices.max(axis=0)) for p in regions]
        return float(union_area_rects(rects))
    if kind == "scale":
        gamma = float(params[0])
        return float((r * max(1.0, gamma) ** (n_frames - 1)) ** 2 if gamma >= 1 else r * r)
    return float(union_area_polys(regions))


# -- empirical receptive field ---------------------------------------------------

def empirical_rf(fn: Callable[[Tensor], Tensor], input_shape: Sequence[int], target: Sequence[int],
                 batch: int = 32, rng: np.random.Generator | int = 0) -> np.ndarray:
    """Mean |d fn(x)[b, *target] / d x[b]| over ``batch`` random inputs, max-normalised.

    ``input_shape`` is (C, H, W); the returned heatmap is (H, W), channel-averaged.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = Tensor(rng.random((batch, *input_shape)), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
        idx = (slice(None), *target)
        try:
            picked = out[idx]
        except IndexError as exc:
            raise ContractError(f"target {tuple(target)} is outside output shape {out.shape[1:]}") from exc
        if picked.size != batch:
            raise ContractError(f"target {tuple(target)} must select one scalar per sample")
        if any(t < 0 for t in target):
            raise ContractError(f"target {tuple(target)} has negative coordinates")
        loss = picked.sum()
    grad = backward(tape, loss)[x]
    heat = np.abs(grad).mean(axis=(0, 1))
    peak = heat.max()
    return heat / peak if peak > 0 else heat


def extent_box(heatmap: np.ndarray, center: Sequence[int], mass: float = 0.95) -> tuple[int, int, int, int]:
    """Smallest box centred on ``center`` holding ``mass`` of the heat; (i0, j0, i1, j1) inclusive."""
    total = heatmap.sum()
    h, w = heatmap.shape
    ci, cj = center
    for half in range(max(h, w)):
        i0, i1 = max(0, ci - half), min(h - 1, ci + half)
        j0, j1 = max(0, cj - half), min(w - 1, cj + half)
        if total == 0 or heatmap[i0:i1 + 1, j0:j1 + 1].sum() >= mass * total - 1e-12:
            return i0, j0, i1, j1
    return 0, 0, h - 1, w - 1


def support(heatmap: np.ndarray, tol: float = 0.0) -> np.ndarray:
    return heatmap > tol


def frame_coupling(model, frames: int, input_shape: Sequence[int], batch: int = 2,
                   rng: np.random.Generator | int = 0) -> np.ndarray:
    """(T, T) matrix: entry [t, u] is the mean |d output of frame t / d input frame u|.

    Each output frame's logits (or maps) are summed and back-propagated on
    their own tape, so exact zeros mean no path between the two frames.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    video = rng.random((batch, frames, *input_shape))
    coupling = np.zeros((frames, frames))
    for t in range(frames):
        x = Tensor(video, requires_grad=True)
        with Tape() as tape:
            out = model.forward_video(x)
            loss = out[:, t].sum()
        g = backward(tape, loss)[x]
        coupling[t] = np.abs(g).mean(axis=tuple(i for i in range(g.ndim) if i != 1))
    return coupling


@dataclass
class RFReport:
    per_layer: list[int] = field(default_factory=list)
    fused: dict | None = None
    erf: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def save_heatmap(path, heatmap: np.ndarray) -> None:
    write_pgm(path, heatmap)
