"""Desk-scale 2D backbones that accept frames folded into the batch axis.

A model is called on ``[N*T, C, H, W]`` with ``frames=T``; at each declared
shift point the batch is unfolded to ``[N, T, C, H, W]``, temporally shifted,
and folded back.  With ``T == 1`` the shift is the identity, so the model
equals its plain 2D network exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dasrf.errors import ConfigurationError, DimensionError
from dasrf.temporal import ShiftConfig, gate_count, temporal_shift
from dasrf.tensor import ops
from dasrf.tensor.core import Tensor
from dasrf.tensor.layers import LayerSpec

KINDS = ("plain_cnn", "mini_resnet")
HEADS = ("classifier", "dense_predictor")


@dataclass
class BackboneSpec:
    kind: str = "plain_cnn"
    depth: int = 3
    width: int = 8
    head: str = "classifier"
    num_classes: int = 10
    shift_points: tuple[int, ...] = ()    # plain_cnn: after the block; mini_resnet: residual branch input
    in_channels: int = 3
    kernel: int = 3
    downsample: tuple[int, ...] = ()       # blocks whose first conv has stride 2
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    norm: bool = False
    zero_init_residual: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}; known: {KINDS}")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; known: {HEADS}")
        if self.depth < 1 or self.width < 1 or self.num_classes < 1:
            raise ConfigurationError("depth, width and num_classes must be positive")
        if self.kind == "mini_resnet" and self.depth > 20:
            raise ConfigurationError("mini_resnet is limited to 20 blocks")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel size must be odd")
        self.shift_points = tuple(sorted(int(p) for p in self.shift_points))
        self.downsample = tuple(sorted(int(p) for p in self.downsample))
        for p in self.downsample:
            if not 0 <= p < self.depth:
                raise ConfigurationError(f"block id {p} does not exist in a depth-{self.depth} backbone")
        if isinstance(self.shift, dict):
            self.shift = ShiftConfig.from_dict(self.shift)
        declared = tuple(sorted(self.shift.insertion_points))
        if declared and not self.shift_points:
            self.shift_points = declared
        elif declared and declared != self.shift_points:
            raise ConfigurationError(f"shift insertion points {declared} disagree with shift_points {self.shift_points}")
        for p in self.shift_points:
            if not 0 <= p < self.depth:
                raise ConfigurationError(f"block id {p} does not exist in a depth-{self.depth} backbone")
        if self.shift_points:
            self.shift.fold(self.width)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "width": self.width, "head": self.head,
                "num_classes": self.num_classes, "shift_points": list(self.shift_points),
                "in_channels": self.in_channels, "kernel": self.kernel,
                "downsample": list(self.downsample), "shift": self.shift.to_dict(),
                "norm": self.norm, "zero_init_residual": self.zero_init_residual}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        head = d.get("head", "classifier")
        if isinstance(head, dict):          # {"classifier": K} style
            (head, k), = head.items()
            d["num_classes"] = k
        d["head"] = head
        if "shift" in d:
            d["shift"] = ShiftConfig.from_dict(d["shift"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown backbone spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "BackboneSpec":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"backbone spec file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def _conv_plan(spec: BackboneSpec) -> list[tuple[str, LayerSpec]]:
    """Named convs in forward order along the longest path."""
    k, p = spec.kernel, spec.kernel // 2
    plan = []
    if spec.kind == "plain_cnn":
        for b in range(spec.depth):
            c_in = spec.in_channels if b == 0 else spec.width
            s = 2 if b in spec.downsample else 1
            plan.append((f"block{b}.conv", LayerSpec.conv(k, s, p, 1, c_in, spec.width)))
    else:
        plan.append(("stem.conv", LayerSpec.conv(k, 1, p, 1, spec.in_channels, spec.width)))
        for b in range(spec.depth):
            s = 2 if b in spec.downsample else 1
            plan.append((f"block{b}.conv1", LayerSpec.conv(k, s, p, 1, spec.width, spec.width)))
            plan.append((f"block{b}.conv2", LayerSpec.conv(k, 1, p, 1, spec.width, spec.width)))
    return plan


def receptive_layers(spec: BackboneSpec) -> list[LayerSpec]:
    """Single-path conv list; for residual nets the longest path through every branch."""
    return [layer for _, layer in _conv_plan(spec)]


def parameter_count(spec: BackboneSpec) -> int:
    """Closed form: sum of k*k*c_in*c_out + c_out over convs, plus head, scales, gates."""
    total = sum(l.kernel[0] * l.kernel[1] * l.channels[0] * l.channels[1] + l.channels[1]
                for _, l in _conv_plan(spec))
    total += spec.width * spec.num_classes + spec.num_classes
    if spec.kind == "mini_resnet":
        total += spec.depth                                   # residual scales
    if spec.norm:
        total += 2 * spec.width * len(_conv_plan(spec))
    total += len(spec.shift_points) * gate_count(spec.shift, spec.width)
    return total


class Model:
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, gate_init: float = 0.0):
        self.spec = spec
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, tuple[np.ndarray, np.ndarray]] = {}   # norm statistics, not trained
        self._plan = _conv_plan(spec)
        for name, layer in self._plan:
            c_out, c_in = layer.channels[1], layer.channels[0]
            fan_in = c_in * layer.kernel[0] * layer.kernel[1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, *layer.kernel))
            self._add(f"{name}.w", w)
            self._add(f"{name}.b", np.zeros(c_out))
            if spec.norm:
                self._add(f"{name}.gamma", np.ones(c_out))
                self._add(f"{name}.beta", np.zeros(c_out))
                self.running[name] = (np.zeros(c_out), np.ones(c_out))
        if spec.kind == "mini_resnet":
            scale = 0.0 if spec.zero_init_residual else 1.0
            for b in range(spec.depth):
                self._add(f"block{b}.scale", np.full(1, scale))
        self._add("head.w", rng.normal(0.0, np.sqrt(1.0 / spec.width), (spec.num_classes, spec.width)))
        self._add("head.b", np.zeros(spec.num_classes))
        for p in spec.shift_points:
            n = gate_count(spec.shift, spec.width)
            if n:
                self._add(f"shift{p}.gate", np.full(n, gate_init))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    # -- modes ---------------------------------------------------------
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @property
    def head(self) -> str:
        return self.spec.head

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        for k, (mu, var) in self.running.items():
            out[f"{k}.running_mean"], out[f"{k}.running_var"] = mu.copy(), var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k.endswith(".running_mean"):
                name = k[:-len(".running_mean")]
                self.running[name] = (np.asarray(v).copy(), self.running[name][1])
            elif k.endswith(".running_var"):
                name = k[:-len(".running_var")]
                self.running[name] = (self.running[name][0], np.asarray(v).copy())
            else:
                self.params[k].data = np.asarray(v, dtype=self.params[k].dtype).copy()

    # -- forward -------------------------------------------------------
    def _conv(self, name: str, layer: LayerSpec, x: Tensor) -> Tensor:
        y = ops.conv2d_raw(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                           layer.stride, layer.padding, layer.dilation)
        if self.spec.norm:
            if self.training:
                mu, var = y.data.mean(axis=(0, 2, 3)), y.data.var(axis=(0, 2, 3))
                old_mu, old_var = self.running[name]
                self.running[name] = (0.9 * old_mu + 0.1 * mu, 0.9 * old_var + 0.1 * var)
                stats = None
            else:
                stats = self.running[name]
            y = ops.channel_norm(y, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], stats=stats)
        return y

    def _shift(self, block: int, x: Tensor, frames: int) -> Tensor:
        if block not in self.spec.shift_points:
            return x
        nt, c, h, w = x.shape
        video = ops.reshape(x, (nt // frames, frames, c, h, w))
        video = temporal_shift(video, self.spec.shift, self.params.get(f"shift{block}.gate"))
        return ops.reshape(video, (nt, c, h, w))

    def features(self, x, frames: int = 1) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"expected [N*T, {self.spec.in_channels}, H, W], got {x.shape}")
        if x.shape[0] % frames:
            raise DimensionError(f"batch {x.shape[0]} is not a multiple of T={frames}")
        plan = dict(self._plan)
        if self.spec.kind == "plain_cnn":
            for b in range(self.spec.depth):
                x = ops.relu(self._conv(f"block{b}.conv", plan[f"block{b}.conv"], x))
                x = self._shift(b, x, frames)
            return x
        x = ops.relu(self._conv("stem.conv", plan["stem.conv"], x))
        for b in range(self.spec.depth):
            branch = self._shift(b, x, frames)
            branch = ops.relu(self._conv(f"block{b}.conv1", plan[f"block{b}.conv1"], branch))
            branch = self._conv(f"block{b}.conv2", plan[f"block{b}.conv2"], branch)
            branch = ops.mul(branch, self.params[f"block{b}.scale"])
            skip = x
            if b in self.spec.downsample:
                skip = ops.getitem(x, (slice(None), slice(None), slice(None, None, 2), slice(None, None, 2)))
            x = ops.relu(ops.add(skip, branch))
        return x

    def __call__(self, x, frames: int = 1) -> Tensor:
        """Classifier: ``[N*T, K]`` logits.  Dense predictor: ``[N*T, K, H, W]``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        size = x.shape[-2:]
        f = self.features(x, frames)
        if self.spec.head == "classifier":
            return ops.dense(ops.global_avg_pool(f), self.params["head.w"], self.params["head.b"])
        k, c = self.params["head.w"].shape
        maps = ops.conv2d_raw(f, ops.reshape(self.params["head.w"], (k, c, 1, 1)), self.params["head.b"])
        if maps.shape[-2:] != tuple(size):
            maps = ops.resize_bilinear(maps, size)
        return maps

    def forward_video(self, frames: Tensor) -> Tensor:
        """``[N, T, C, H, W]`` -> ``[N, T, K]`` or ``[N, T, K, H, W]``."""
        n, t = frames.shape[:2]
        out = self(ops.reshape(frames, (n * t, *frames.shape[2:])), frames=t)
        return ops.reshape(out, (n, t, *out.shape[1:]))


def build(spec: BackboneSpec, rng: np.random.Generator | int = 0, gate_init: float = 0.0) -> Model:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Model(spec, rng, gate_init)
