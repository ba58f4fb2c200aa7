"""Constructed problems with known answers for the selection rules.

``identity_bias``: a two-edge chain where the softmax mixture prefers the
Identity op but the translation alone is the better discrete choice.  The
centre column carries a weak, low-noise cue; the column ``delta`` pixels to
its left carries a strong, high-noise cue.  A probe reads the centre column,
so the mixture behaves like inverse-variance weighting (Identity dominant)
while the discrete comparison is decided by single-column SNR (translation
wins).

``small_cell_oracle``: a frozen linear teacher labels images passed through
a planted genotype; tau is trained against the frozen teacher and the
perturbation genotype is compared with brute-force enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dasrf.cell import (CellSpec, Edge, argmax_tau_baseline, cell_forward, discretize_by_perturbation,
                        exhaustive_best, one_hot_overrides)
from dasrf.data import Dataset
from dasrf.search import SearchConfig, metric_fn, search
from dasrf.tensor import ops
from dasrf.tensor.core import Tape, Tensor, backward, no_grad
from dasrf.tensor.optim import Adam
from dasrf.transforms import TransformOp

SIZE = 16


class ColumnProbe:
    """Mean of one image column, batch-standardised, then a 2-way dense layer.

    Standardising removes the feature scale, so the tau gradient responds to
    the mixture's signal-to-noise ratio rather than to raw signal magnitude
    while the dense weights are still small.
    """

    head = "classifier"

    def __init__(self, column: int, rng: np.random.Generator):
        self.column = column
        self.params = {"w": Tensor(rng.normal(0, 0.1, (2, 1)), requires_grad=True, name="w"),
                       "b": Tensor(np.zeros(2), requires_grad=True, name="b")}

    def train(self):
        return self

    def eval(self):
        return self

    def __call__(self, x, frames: int = 1) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        col = ops.getitem(x, (slice(None), 0, slice(None), self.column))
        m = ops.mean(col, axis=1, keepdims=True)
        centred = ops.sub(m, ops.mean(m, axis=0, keepdims=True))
        var = ops.mean(ops.mul(centred, centred), axis=0, keepdims=True)
        feat = ops.div(centred, ops.power(ops.add(var, 1e-12), 0.5))
        return ops.dense(feat, self.params["w"], self.params["b"])

    def forward_video(self, frames: Tensor) -> Tensor:
        n, t = frames.shape[:2]
        out = self(ops.reshape(frames, (n * t, *frames.shape[2:])), frames=t)
        return ops.reshape(out, (n, t, out.shape[-1]))


@dataclass
class IdentityBiasSetup:
    delta: int = 2              # planted translation, pixels
    weak: float = 0.05          # centre-column cue
    weak_noise: float = 0.05
    strong: float = 1.0         # off-centre cue
    strong_noise: float = 0.5
    scale: float = 0.1          # keeps pixel values well inside [0, 1]
    samples: int = 4000

    @property
    def column(self) -> int:
        return SIZE // 2

    def translate_op(self) -> TransformOp:
        return TransformOp("TranslateX", self.delta / SIZE)

    def cell(self) -> CellSpec:
        edges = [Edge(0, 1, (TransformOp("Identity"), TransformOp("TranslateY"))),
                 Edge(1, 2, (TransformOp("Identity"), self.translate_op()))]
        return CellSpec(1, 2, edges, output="last", search_space="custom")

    def data(self, rng: np.random.Generator) -> Dataset:
        n, c = self.samples, self.column
        labels = rng.permutation(np.arange(n) % 2)
        sign = 2.0 * labels - 1.0
        images = np.full((n, 1, SIZE, SIZE), 0.5)
        weak = self.weak * sign + self.weak_noise * rng.normal(size=n)
        strong = self.strong * sign + self.strong_noise * rng.normal(size=n)
        images[:, 0, :, c] += self.scale * weak[:, None]
        images[:, 0, :, c - self.delta] += self.scale * strong[:, None]
        return Dataset(images, labels, 2)


def identity_bias_trial(seed: int, setup: IdentityBiasSetup | None = None,
                        cfg: SearchConfig | None = None) -> dict:
    """Bilevel search on the constructed task; returns both selections for the planted edge."""
    setup = setup or IdentityBiasSetup()
    rng = np.random.default_rng([seed, 41])
    cfg = cfg or SearchConfig(epochs=4, batch_size=200, lr_w=0.1, lr_schedule="poly", lr_tau=0.05,
                              frames=1, seed=seed)
    cell = setup.cell()
    model = ColumnProbe(setup.column, rng)
    perturbed, report = search(cell, model, setup.data(rng), cfg)
    argmax = argmax_tau_baseline(cell)
    return {"argmax": argmax.edges[1][2].kind, "perturbation": perturbed.edges[1][2].kind,
            "weights": cell.weights()[1].tolist(), "drops": perturbed.meta["drops"][1]}


# -- discretisation oracle ---------------------------------------------------------

ORACLE_OPS = ("TranslateX", "TranslateY", "Rotate", "Scale")


class LinearTeacher:
    """Frozen linear classifier over flattened pixels."""

    head = "classifier"

    def __init__(self, rng: np.random.Generator, classes: int = 4, size: int = SIZE, gain: float = 4.0):
        w = rng.normal(size=(classes, size * size))
        self.w = Tensor(gain * w / np.linalg.norm(w, axis=1, keepdims=True))

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = ops.reshape(ops.sub(x, 0.5), (x.shape[0], -1))
        return ops.dense(flat, self.w)


def random_small_cell(rng: np.random.Generator) -> CellSpec:
    """A chain of 1-3 edges or the 3-edge two-node DAG; 2-3 candidates per edge incl. Identity."""
    def candidates():
        extra = rng.choice(ORACLE_OPS, size=int(rng.integers(1, 3)), replace=False)
        return (TransformOp("Identity"), *[TransformOp(str(k)) for k in extra])

    if rng.random() < 0.25:
        edges = [Edge(0, 1, candidates()), Edge(0, 2, candidates()), Edge(1, 2, candidates())]
        return CellSpec(1, 2, edges, output="last")
    n = int(rng.integers(1, 4))
    return CellSpec(1, n, [Edge(i, i + 1, candidates()) for i in range(n)], output="last")


def small_cell_trial(seed: int, samples: int = 256, steps: int = 150, lr: float = 0.1) -> dict:
    rng = np.random.default_rng([seed, 43])
    cell = random_small_cell(rng)
    teacher = LinearTeacher(rng)
    images = rng.random((samples, 1, SIZE, SIZE))
    planted = [int(rng.integers(len(e.candidates))) for e in cell.edges]
    with no_grad():
        labels = teacher(cell_forward(cell, images, overrides=one_hot_overrides(cell, planted))).data.argmax(axis=1)
    for t in cell.tau:
        t.data = rng.normal(0.0, 1.0, t.shape).astype(t.dtype)
    opt = Adam(cell.tau_params(), lr)
    for _ in range(steps):
        with Tape() as tape:
            loss = ops.cross_entropy(teacher(cell_forward(cell, images)), labels)
        grads = backward(tape, loss)
        for t in cell.tau:
            t.grad = grads.get(t, np.zeros_like(t.data))
        opt.step()
    val = (images, labels)
    chosen = discretize_by_perturbation(cell, teacher, val, metric_fn)
    best, best_score, scored = exhaustive_best(cell, teacher, val, metric_fn)
    choice = [next(k for k, op in enumerate(e.candidates) if op == g[2])
              for e, g in zip(cell.edges, chosen.edges)]
    chosen_score = dict((c, s) for s, c in scored)[tuple(choice)]
    return {"match": chosen_score == best_score, "chosen": [op.kind for op in chosen.ops()],
            "best": [op.kind for op in best.ops()], "planted": planted,
            "edges": len(cell.edges), "chosen_score": chosen_score, "best_score": best_score}

