"""Experimental arms run from one RunConfig that differs only in ``arm``."""

from __future__ import annotations

import numpy as np

from dasrf.backbones import build
from dasrf.cell import Genotype, build_cell, random_genotype
from dasrf.config import RunConfig
from dasrf.data import generate
from dasrf.errors import ConfigurationError
from dasrf.search import ARMS, Pipeline, TrainReport, search, train
from dasrf.temporal import make_video


def _streams(seed: int):
    """(model init for search, model init for training, arm-specific sampling)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 17]).spawn(3)]


def frame_order(seed: int, frames: int) -> tuple[int, ...]:
    """A seeded permutation that is never the identity (for T > 1)."""
    rng = np.random.default_rng([seed, 23])
    if frames == 1:
        return (0,)
    while True:
        order = tuple(int(i) for i in rng.permutation(frames))
        if order != tuple(range(frames)):
            return order


def genotype_augmenter(genotype: Genotype, frames: int):
    """Replace each image by one randomly chosen frame of its video (or itself)."""
    def augment(images, rng):
        video = make_video(images, genotype, frames).frames.data
        pick = rng.integers(0, frames + 1, size=len(images))
        out = images.copy()
        for i, k in enumerate(pick):
            if k > 0:
                out[i] = video[i, k - 1]
        return out
    return augment


def run_arm(arm: str, run: RunConfig, genotype: Genotype | None = None) -> TrainReport:
    """Train one arm; arms that need a searched genotype run the search unless one is given."""
    if arm not in ARMS:
        raise ConfigurationError(f"unknown ablation arm {arm!r}; known: {ARMS}")
    splits = generate(run.dataset)
    train_set, test_set = splits["train"], splits["test"]
    search_rng, train_rng, arm_rng = _streams(run.seed)
    frames = run.train.frames
    searched = None
    if arm in ("das", "reshuffle", "augment_only") and genotype is None:
        cell = build_cell(run.topology)
        genotype, searched = search(cell, build(run.backbone, search_rng), train_set, run.search)
    model = build(run.backbone, train_rng)
    if arm == "baseline":
        report = train(Pipeline(None), model, train_set, test_set, run.train)
    elif arm == "augment_only":
        report = train(Pipeline(None), model, train_set, test_set, run.train,
                       augment=genotype_augmenter(genotype, frames))
    elif arm == "replica":
        report = train(Pipeline(None, frames, "replica"), model, train_set, test_set, run.train)
    elif arm == "random_genotype":
        genotype = random_genotype(build_cell(run.topology), arm_rng)
        report = train(Pipeline(genotype, frames), model, train_set, test_set, run.train)
    elif arm == "reshuffle":
        order = frame_order(run.seed, frames)
        report = train(Pipeline(genotype, frames, order=order), model, train_set, test_set, run.train)
    else:
        if not genotype.matches_space(run.search_space):
            raise ConfigurationError(f"genotype does not belong to the {run.search_space!r} space")
        report = train(Pipeline(genotype, frames), model, train_set, test_set, run.train)
    report.arm = arm
    report.genotype = genotype if arm not in ("baseline", "replica") else None
    if searched is not None:
        report.trajectory = searched.trajectory
        report.tau_steps = searched.tau_steps
    return report


def run_ablation(run: RunConfig, arms=ARMS, seeds=(0, 1, 2)) -> dict[str, list[float]]:
    """Final test metric per arm per seed; the searched genotype is shared across arms of a seed."""
    results = {arm: [] for arm in arms}
    for seed in seeds:
        cfg = run.with_seed(seed)
        shared = None
        if any(a in ("das", "reshuffle", "augment_only") for a in arms):
            search_rng = _streams(seed)[0]
            splits = generate(cfg.dataset)
            shared, _ = search(build_cell(cfg.topology), build(cfg.backbone, search_rng),
                               splits["train"], cfg.search)
        for arm in arms:
            results[arm].append(run_arm(arm, cfg, shared).final_metric)
    return results

