from __future__ import annotations

from dataclasses import dataclass

from dasrf.errors import ConfigurationError, DimensionError
from dasrf.tensor import ops
from dasrf.tensor.core import Tensor

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "avgpool-global", "channel-norm", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    channels: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        for name in ("kernel", "stride", "dilation"):
            if min(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} extents must be >= 1, got {getattr(self, name)}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def conv(cls, k: int, s: int = 1, p: int = 0, d: int = 1, c_in: int = 0, c_out: int = 0) -> "LayerSpec":
        return cls("conv2d", (k, k), (s, s), (p, p), (d, d), (c_in, c_out))

    @property
    def effective_kernel(self) -> tuple[int, int]:
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kernel": list(self.kernel), "stride": list(self.stride),
                "padding": list(self.padding), "dilation": list(self.dilation),
                "channels": list(self.channels)}


def conv2d(x: Tensor, spec: LayerSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if spec.kind != "conv2d":
        raise ConfigurationError(f"conv2d called with a {spec.kind!r} layer spec")
    expected = (spec.channels[1], spec.channels[0], *spec.kernel)
    if spec.channels != (0, 0) and tuple(weights.shape) != expected:
        raise DimensionError(f"weight shape {weights.shape} does not match spec {expected}")
    if tuple(weights.shape[2:]) != tuple(spec.kernel):
        raise DimensionError(f"weight kernel {weights.shape[2:]} does not match spec {spec.kernel}")
    return ops.conv2d_raw(x, weights, bias, spec.stride, spec.padding, spec.dilation)
