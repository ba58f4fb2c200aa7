"""Softmax-relaxed transformation cells and their discretisation."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dasrf import transforms as tf
from dasrf.errors import ConfigurationError, ContractError, DegenerateInputError
from dasrf.tensor import ops
from dasrf.tensor.core import Tensor, no_grad
from dasrf.transforms import AffineTransform, TransformOp


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    candidates: tuple[TransformOp, ...]


@dataclass
class CellSpec:
    num_input_nodes: int
    num_intermediate: int
    edges: list[Edge]
    tau: list[Tensor] = field(default_factory=list)
    output: str = "last"
    search_space: str = "custom"
    fill: str = tf.DEFAULT_FILL

    def __post_init__(self):
        if self.num_input_nodes not in (1, 2):
            raise ConfigurationError("a cell has one or two input nodes")
        if self.num_intermediate < 1:
            raise ConfigurationError("a cell needs at least one intermediate node")
        if self.output not in ("last", "mean"):
            raise ConfigurationError(f"unknown output rule {self.output!r}")
        n = self.num_nodes
        for e in self.edges:
            if not e.candidates:
                raise ConfigurationError(f"edge {e.src}->{e.dst} has an empty candidate list")
            if not (0 <= e.src < e.dst < n) or e.dst < self.num_input_nodes:
                raise ConfigurationError(f"edge {e.src}->{e.dst} violates the node ordering")
            if not any(op.kind == "Identity" for op in e.candidates):
                raise ConfigurationError(f"edge {e.src}->{e.dst} lacks the Identity candidate")
        if not self.tau:
            self.tau = [Tensor(np.zeros(len(e.candidates)), requires_grad=True, name=f"tau{i}")
                        for i, e in enumerate(self.edges)]
        if len(self.tau) != len(self.edges):
            raise ConfigurationError("one tau vector per edge is required")
        for e, t in zip(self.edges, self.tau):
            if t.shape != (len(e.candidates),):
                raise ConfigurationError(f"tau for edge {e.src}->{e.dst} has shape {t.shape}")
        self._check_reachable()

    @property
    def num_nodes(self) -> int:
        return self.num_input_nodes + self.num_intermediate

    @property
    def intermediate_nodes(self) -> range:
        return range(self.num_input_nodes, self.num_nodes)

    def incoming(self, node: int) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.dst == node]

    def _check_reachable(self):
        reach = set(range(self.num_input_nodes))
        for node in self.intermediate_nodes:
            srcs = [self.edges[i].src for i in self.incoming(node)]
            if not srcs:
                raise ConfigurationError(f"node {node} has no incoming edge")
            if any(s in reach for s in srcs):
                reach.add(node)
        targets = [self.num_nodes - 1] if self.output == "last" else list(self.intermediate_nodes)
        if not all(t in reach for t in targets):
            raise ConfigurationError("output node is unreachable from the inputs")

    # -- search-space bookkeeping -------------------------------------------
    def log_space_size(self) -> float:
        return float(sum(math.log(len(e.candidates)) for e in self.edges))

    def discrete_count(self) -> int:
        return math.prod(len(e.candidates) for e in self.edges)

    def tau_params(self) -> dict[str, Tensor]:
        return {f"tau{i}": t for i, t in enumerate(self.tau)}

    def weights(self) -> list[np.ndarray]:
        return [ops.softmax(Tensor(t.data, dtype=np.float64)).data for t in self.tau]


def dag_edges(num_inputs: int, num_intermediate: int, candidates) -> list[Edge]:
    """Every earlier node feeds every intermediate node."""
    cands = tuple(candidates)
    return [Edge(src, dst, cands)
            for dst in range(num_inputs, num_inputs + num_intermediate)
            for src in range(dst)]


def affine5_cell(num_intermediate: int = 4, fill: str = tf.DEFAULT_FILL) -> CellSpec:
    ops_ = tf.search_space_ops("affine5")
    return CellSpec(1, num_intermediate, dag_edges(1, num_intermediate, ops_),
                    output="last", search_space="affine5", fill=fill)


def full13_cell(num_intermediate: int = 4, fill: str = tf.DEFAULT_FILL) -> CellSpec:
    ops_ = tf.search_space_ops("full13")
    edges = [e for e in dag_edges(2, num_intermediate, ops_) if not (e.src == 0 and e.dst == 1)]
    return CellSpec(2, num_intermediate, edges, output="mean", search_space="full13", fill=fill)


def chain_cell(candidate_lists: Sequence[Sequence[TransformOp]], search_space: str = "custom") -> CellSpec:
    edges = [Edge(i, i + 1, tuple(c)) for i, c in enumerate(candidate_lists)]
    return CellSpec(1, len(edges), edges, output="last", search_space=search_space)


TOPOLOGIES = {
    "affine5": affine5_cell,
    "affine5-small": lambda fill=tf.DEFAULT_FILL: affine5_cell(2, fill),
    "full13": full13_cell,
}


def build_cell(topology: str, fill: str = tf.DEFAULT_FILL) -> CellSpec:
    if topology not in TOPOLOGIES:
        raise ConfigurationError(f"unknown cell topology {topology!r}; known: {sorted(TOPOLOGIES)}")
    return TOPOLOGIES[topology](fill=fill)


# -- forward passes -------------------------------------------------------------

def edge_weights(tau_edge: Tensor, mask: int | None = None) -> Tensor:
    """Softmax weights of one edge; ``mask`` zeroes one op and renormalises the rest."""
    w = ops.softmax(tau_edge)
    if mask is None:
        return w
    keep = np.ones(tau_edge.shape, dtype=w.dtype)
    keep[mask] = 0.0
    kept = ops.mul(w, keep)
    return ops.div(kept, ops.sum(kept))


def mixed_edge_forward(edge: Edge, x: Tensor, tau_edge: Tensor, mask: int | None = None,
                       weights: np.ndarray | None = None, fill: str = tf.DEFAULT_FILL) -> Tensor:
    """Softmax-weighted sum of every candidate applied to ``x``.

    ``weights`` overrides the softmax with fixed numpy weights (used for
    one-hot enumeration); ops whose weight is exactly zero are skipped.
    """
    if not edge.candidates:
        raise ConfigurationError("mixed edge with no candidates")
    if len(edge.candidates) == 1 and mask is None:
        return tf.apply(edge.candidates[0], x, fill)
    w = Tensor(weights, dtype=x.dtype) if weights is not None else edge_weights(tau_edge, mask)
    active = [k for k in range(len(edge.candidates)) if w.data[k] != 0.0]
    if len(active) == 1 and w.data[active[0]] == 1.0 and weights is not None:
        return tf.apply(edge.candidates[active[0]], x, fill)
    outs = ops.stack([tf.apply(edge.candidates[k], x, fill) for k in active], axis=0)
    w_sel = ops.reshape(ops.getitem(w, np.array(active)), (len(active),) + (1,) * x.ndim)
    return ops.sum(ops.mul(outs, w_sel), axis=0)


def cell_forward(cell: CellSpec, x, masks: dict[int, int] | None = None,
                 overrides: dict[int, np.ndarray] | None = None) -> Tensor:
    """Evaluate the cell on an image batch; every input node is bound to ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    masks = masks or {}
    overrides = overrides or {}
    values: dict[int, Tensor] = {i: x for i in range(cell.num_input_nodes)}
    for node in cell.intermediate_nodes:
        incoming = cell.incoming(node)
        outs = [mixed_edge_forward(cell.edges[i], values[cell.edges[i].src], cell.tau[i],
                                   masks.get(i), overrides.get(i), cell.fill)
                for i in incoming]
        if len(outs) == 1:
            values[node] = outs[0]
        else:
            values[node] = ops.mul(ops.sum(ops.stack(outs, axis=0), axis=0), 1.0 / len(outs))
    if cell.output == "last":
        return values[cell.num_nodes - 1]
    mids = [values[n] for n in cell.intermediate_nodes]
    if len(mids) == 1:
        return mids[0]
    return ops.mul(ops.sum(ops.stack(mids, axis=0), axis=0), 1.0 / len(mids))


def cell_affine(cell: CellSpec, size: tuple[int, int],
                overrides: dict[int, np.ndarray] | None = None) -> AffineTransform:
    """Affine linearisation of the cell: weight-averaged sampling maps.

    Exact for chains of affine ops with one-hot weights; pixel-value ops
    count as the identity.
    """
    overrides = overrides or {}
    maps = {i: np.eye(3) for i in range(cell.num_input_nodes)}
    weights = cell.weights()
    for node in cell.intermediate_nodes:
        acc = np.zeros((3, 3))
        incoming = cell.incoming(node)
        for i in incoming:
            e = cell.edges[i]
            w = overrides.get(i, weights[i])
            edge_map = np.zeros((3, 3))
            for k, op in enumerate(e.candidates):
                a = tf.to_affine(op, size).as3x3() if op.is_affine else np.eye(3)
                edge_map += w[k] * a
            acc += maps[e.src] @ edge_map
        maps[node] = acc / len(incoming)
    if cell.output == "last":
        final = maps[cell.num_nodes - 1]
    else:
        final = sum(maps[n] for n in cell.intermediate_nodes) / cell.num_intermediate
    return AffineTransform.from3x3(final, "cell")


# -- genotypes ---------------------------------------------------------------

@dataclass
class Genotype:
    search_space: str
    num_input_nodes: int
    num_nodes: int
    edges: list[tuple[int, int, TransformOp]]
    output: str = "last"
    meta: dict = field(default_factory=dict)

    def ops(self) -> list[TransformOp]:
        return [op for _, _, op in self.edges]

    def to_cell(self, fill: str = tf.DEFAULT_FILL) -> CellSpec:
        edges = [Edge(s, d, (op,) if op.kind == "Identity" else (op, TransformOp("Identity")))
                 for s, d, op in self.edges]
        tau = [Tensor(np.array([0.0]) if len(e.candidates) == 1 else np.array([0.0, -np.inf]))
               for e in edges]
        cell = CellSpec(self.num_input_nodes, self.num_nodes - self.num_input_nodes, edges, tau,
                        self.output, self.search_space, fill)
        return cell

    def to_dict(self) -> dict:
        return {
            "cell": {
                "nodes": self.num_nodes,
                "input_nodes": self.num_input_nodes,
                "output": self.output,
                "edges": [{"from": s, "to": d, "op": op.kind, "magnitude": op.magnitude}
                          for s, d, op in self.edges],
            },
            "search_space": self.search_space,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        c = d["cell"]
        edges = [(int(e["from"]), int(e["to"]), TransformOp(e["op"], e["magnitude"])) for e in c["edges"]]
        return cls(d["search_space"], int(c.get("input_nodes", 1)), int(c["nodes"]), edges,
                   c.get("output", "last"), dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def matches_space(self, space: str) -> bool:
        if space == "custom":
            return True
        allowed = {op.kind for op in tf.search_space_ops(space)}
        return self.search_space == space and all(op.kind in allowed for op in self.ops())


def genotype_from_choice(cell: CellSpec, choice: Sequence[int], meta: dict | None = None) -> Genotype:
    edges = [(e.src, e.dst, e.candidates[k]) for e, k in zip(cell.edges, choice)]
    return Genotype(cell.search_space, cell.num_input_nodes, cell.num_nodes, edges, cell.output, meta or {})


def identity_genotype(cell: CellSpec) -> Genotype:
    choice = [next(k for k, op in enumerate(e.candidates) if op.kind == "Identity") for e in cell.edges]
    return genotype_from_choice(cell, choice)


def random_genotype(cell: CellSpec, rng: np.random.Generator) -> Genotype:
    choice = [int(rng.integers(len(e.candidates))) for e in cell.edges]
    return genotype_from_choice(cell, choice, {"sampler": "uniform"})


def one_hot_overrides(cell: CellSpec, choice: Sequence[int]) -> dict[int, np.ndarray]:
    out = {}
    for i, (e, k) in enumerate(zip(cell.edges, choice)):
        w = np.zeros(len(e.candidates))
        w[k] = 1.0
        out[i] = w
    return out


def argmax_tau_baseline(cell: CellSpec) -> Genotype:
    choice = [int(np.argmax(t.data)) for t in cell.tau]
    return genotype_from_choice(cell, choice, {"selection": "argmax_tau"})


Evaluator = Callable[[dict[int, int] | None, dict[int, np.ndarray] | None], float]


def _default_evaluator(cell, model, val_set, metric, forward) -> Evaluator:
    images, labels = val_set
    if len(images) == 0:
        raise ContractError("perturbation needs a non-empty validation set")

    def evaluate(masks=None, overrides=None):
        with no_grad():
            if forward is not None:
                out = forward(cell, model, images, masks, overrides)
            else:
                out = model(cell_forward(cell, images, masks, overrides))
        return float(metric(out, labels))

    return evaluate


def discretize_by_perturbation(cell: CellSpec, model, val_set, metric, forward=None) -> Genotype:
    """Per edge, keep the op whose masking lowers the validation metric the most.

    ``metric(outputs, labels)`` is higher-is-better.  ``forward(cell, model,
    images, masks, overrides)`` replaces the default ``model(cell(x))`` path.
    Edges are probed independently against the same relaxed cell.
    """
    evaluate = _default_evaluator(cell, model, val_set, metric, forward)
    base = evaluate()
    choice, drops = [], []
    for i, e in enumerate(cell.edges):
        if len(e.candidates) == 1:
            choice.append(0)
            drops.append([0.0])
            continue
        edge_drops = [base - evaluate({i: k}) for k in range(len(e.candidates))]
        choice.append(int(np.argmax(edge_drops)))
        drops.append(edge_drops)
    return genotype_from_choice(cell, choice, {"selection": "perturbation", "base_metric": base,
                                               "drops": drops})


def exhaustive_best(cell: CellSpec, model, val_set, metric, forward=None) -> tuple[Genotype, float, list]:
    """Brute-force top-1 over every discrete cell (ties -> first in product order)."""
    evaluate = _default_evaluator(cell, model, val_set, metric, forward)
    scored = []
    for choice in itertools.product(*[range(len(e.candidates)) for e in cell.edges]):
        scored.append((evaluate(None, one_hot_overrides(cell, choice)), choice))
    best_score, best_choice = max(scored, key=lambda sc: sc[0])
    return genotype_from_choice(cell, best_choice, {"selection": "exhaustive"}), best_score, scored


# -- closed-form mixture weights -----------------------------------------------

@dataclass
class ThetaOracle:
    samples_x_I: list
    samples_x_T: list
    m_star: object

    def __post_init__(self):
        shapes = {np.shape(getattr(a, "data", a)) for a in self.samples_x_I + self.samples_x_T}
        shapes.add(np.shape(getattr(self.m_star, "data", self.m_star)))
        if len(shapes) != 1:
            raise ContractError(f"oracle tensors must share one shape, got {shapes}")


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def residual_moments(oracle: ThetaOracle) -> tuple[float, float, float]:
    """(var(x_I - m*), var(x_T - m*), cov(x_T - m*, x_I - m*)) pooled over samples."""
    m = _as_array(oracle.m_star)
    d_i = np.stack([_as_array(x) - m for x in oracle.samples_x_I]).ravel()
    d_t = np.stack([_as_array(x) - m for x in oracle.samples_x_T]).ravel()
    if d_i.size != d_t.size:
        raise ContractError("x_I and x_T must have the same number of samples")
    var_i = float(np.var(d_i))
    var_t = float(np.var(d_t))
    cov = float(np.mean((d_t - d_t.mean()) * (d_i - d_i.mean())))
    return var_i, var_t, cov


def theta_star(oracle: ThetaOracle) -> tuple[float, float]:
    """Variance-minimising mixture weights (theta_I, theta_T) with theta_I + theta_T = 1."""
    var_i, var_t, cov = residual_moments(oracle)
    z = var_t + var_i - 2 * cov
    if z <= 1e-12:
        raise DegenerateInputError(f"x_I and x_T are affinely identical around m* (z={z:.3e})")
    theta_t = (var_i - cov) / z
    theta_i = 1.0 - theta_t
    while theta_i + theta_t != 1.0:
        theta_i = np.nextafter(theta_i, 1.0 if theta_i + theta_t < 1.0 else -np.inf)
    return float(theta_i), float(theta_t)


# -- visualisation ----------------------------------------------------------------

def to_dot(cell: CellSpec, genotype: Genotype | None = None) -> str:
    weights = cell.weights()
    lines = ["digraph cell {", "  rankdir=LR;"]
    for n in range(cell.num_nodes):
        shape = "box" if n < cell.num_input_nodes else "ellipse"
        lines.append(f'  n{n} [label="x{n}", shape={shape}];')
    chosen = {(s, d): op for s, d, op in genotype.edges} if genotype else {}
    for i, e in enumerate(cell.edges):
        for k, op in enumerate(e.candidates):
            bold = chosen.get((e.src, e.dst)) == op
            style = ', style=bold, color=black' if bold else ', color=gray'
            lines.append(f'  n{e.src} -> n{e.dst} [label="{op} {weights[i][k]:.3f}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
