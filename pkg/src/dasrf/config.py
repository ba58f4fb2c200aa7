"""Run configuration: one JSON file ties together space, cell, backbone, data and schedules."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from dasrf.backbones import BackboneSpec
from dasrf.cell import TOPOLOGIES
from dasrf.data import DatasetSpec
from dasrf.errors import ConfigurationError
from dasrf.search import ARMS, SearchConfig

SPACE_OF_TOPOLOGY = {"affine5": "affine5", "affine5-small": "affine5", "full13": "full13"}


def desk_search() -> SearchConfig:
    """Schedules that converge on the synthetic tasks within seconds."""
    return SearchConfig(epochs=6, batch_size=16, lr_w=0.05, lr_schedule="poly", lr_tau=0.03)


def desk_train() -> SearchConfig:
    return SearchConfig(epochs=8, batch_size=16, lr_w=0.05, lr_schedule="poly")


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc


def _section(value, base: Path | None) -> dict:
    """Inline dict, or a path (relative to the config file) to a JSON file."""
    if value is None:
        return {}
    if isinstance(value, str):
        path = Path(value)
        if base is not None and not path.is_absolute():
            path = base / path
        return _load_json(path)
    return dict(value)


@dataclass
class RunConfig:
    search_space: str = "affine5"
    topology: str = "affine5-small"
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec(num_classes=2, norm=True,
                                                                        shift_points=(1,)))
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(size={"train": 256, "test": 128}))
    search: SearchConfig = field(default_factory=desk_search)
    train: SearchConfig = field(default_factory=desk_train)
    arm: str = "das"
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigurationError(f"unknown cell topology {self.topology!r}; known: {sorted(TOPOLOGIES)}")
        if SPACE_OF_TOPOLOGY[self.topology] != self.search_space:
            raise ConfigurationError(
                f"topology {self.topology!r} builds the {SPACE_OF_TOPOLOGY[self.topology]!r} space, "
                f"not {self.search_space!r}")
        if self.arm not in ARMS:
            raise ConfigurationError(f"unknown ablation arm {self.arm!r}; known: {ARMS}")
        expected = "segmentation" if self.dataset.kind == "synthetic_segmentation" else "classification"
        if (self.backbone.head == "dense_predictor") != (expected == "segmentation"):
            raise ConfigurationError(f"{self.backbone.head} head does not fit dataset {self.dataset.kind!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        """Every random stream derives from ``seed``."""
        d = self.to_dict()
        d["seed"] = seed
        d["dataset"]["seed"] = seed
        d["search"]["seed"] = seed
        d["train"]["seed"] = seed
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {"search_space": self.search_space, "topology": self.topology,
                "backbone": self.backbone.to_dict(), "dataset": self.dataset.to_dict(),
                "search": dict(vars(self.search)), "train": dict(vars(self.train)),
                "arm": self.arm, "seed": self.seed, "out": self.out}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        """Sections given in ``d`` are merged over the desk-scale defaults."""
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__) - {"shift"}
        if unknown:
            raise ConfigurationError(f"unknown run config fields: {sorted(unknown)}")
        defaults = cls().to_dict()
        kwargs = {k: v for k, v in d.items() if k not in ("backbone", "dataset", "search", "train", "shift")}
        backbone = {**defaults["backbone"], **_section(d.get("backbone"), base)}
        if "shift" in d:
            backbone["shift"] = d["shift"]
        kwargs["backbone"] = BackboneSpec.from_dict(backbone)
        kwargs["dataset"] = DatasetSpec.from_dict({**defaults["dataset"], **_section(d.get("dataset"), base)})
        for key in ("search", "train"):
            kwargs[key] = SearchConfig.from_dict({**defaults[key], **_section(d.get(key), base)})
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(_load_json(path), path.parent)
