import numpy as np
import pytest

from dasrf import transforms as tf
from dasrf.cell import (CellSpec, Edge, Genotype, ThetaOracle, affine5_cell, argmax_tau_baseline, build_cell,
                        cell_affine, cell_forward, chain_cell, discretize_by_perturbation, edge_weights,
                        exhaustive_best, genotype_from_choice, identity_genotype, one_hot_overrides,
                        random_genotype, theta_star, to_dot)
from dasrf.errors import ConfigurationError, ContractError, DegenerateInputError
from dasrf.search import metric_fn
from dasrf.tensor import Tensor


def test_topologies():
    assert len(build_cell("affine5").edges) == 10
    assert len(build_cell("full13").edges) == 14
    with pytest.raises(ConfigurationError):
        build_cell("hexagon")


def test_edge_without_identity_rejected():
    with pytest.raises(ConfigurationError):
        CellSpec(1, 1, [Edge(0, 1, (tf.TransformOp("Rotate"),))])
    with pytest.raises(ConfigurationError):
        CellSpec(1, 1, [Edge(1, 0, (tf.TransformOp("Identity"),))])


def test_masked_weights_renormalise():
    w = edge_weights(Tensor(np.log([1.0, 2.0, 1.0])), mask=1).data
    np.testing.assert_allclose(w, [0.5, 0.0, 0.5], atol=1e-6)


def test_one_hot_forward_equals_single_op():
    cell = affine5_cell(1)
    img = np.random.default_rng(0).random((2, 3, 8, 8))
    out = cell_forward(cell, img, overrides=one_hot_overrides(cell, [1])).data
    ref = tf.apply(tf.TransformOp("TranslateX"), img).data
    np.testing.assert_array_equal(out, ref)


def test_genotype_json_round_trip():
    cell = build_cell("affine5-small")
    g = random_genotype(cell, np.random.default_rng(3))
    back = Genotype.from_json(g.to_json())
    assert back.to_json() == g.to_json()
    assert back.matches_space("affine5")
    assert not back.matches_space("full13")


def test_genotype_to_cell_reproduces_discrete_forward():
    cell = build_cell("affine5-small")
    g = genotype_from_choice(cell, [1, 3, 4])
    img = np.random.default_rng(1).random((1, 3, 8, 8))
    a = cell_forward(g.to_cell(), img).data
    b = cell_forward(cell, img, overrides=one_hot_overrides(cell, [1, 3, 4])).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_identity_genotype_affine_is_identity():
    cell = build_cell("affine5")
    assert cell_affine(identity_genotype(cell).to_cell(), (8, 8)).allclose(tf.AffineTransform.identity())


def test_argmax_baseline():
    cell = chain_cell([[tf.TransformOp("Identity"), tf.TransformOp("Rotate")]])
    cell.tau[0].data[:] = [0.0, 1.0]
    assert argmax_tau_baseline(cell).ops()[0].kind == "Rotate"


class _Probe:
    head = "classifier"

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        col = x.data[:, 0, :, 5].mean(axis=1) - 0.5
        return Tensor(np.stack([-col, col], axis=1))


def test_perturbation_and_exhaustive_agree_on_planted_shift():
    rng = np.random.default_rng(0)
    labels = np.arange(40) % 2
    images = np.full((40, 1, 8, 8), 0.5)
    images[:, 0, :, 4] += np.where(labels, 0.3, -0.3)[:, None]
    cell = chain_cell([[tf.TransformOp("Identity"), tf.TransformOp("TranslateX", 1 / 8)]])
    cell.tau[0].data[:] = rng.normal(size=2)
    g = discretize_by_perturbation(cell, _Probe(), (images, labels), metric_fn)
    best, score, scored = exhaustive_best(cell, _Probe(), (images, labels), metric_fn)
    assert g.ops()[0].kind == best.ops()[0].kind == "TranslateX"
    assert score == 1.0 and len(scored) == 2
    assert g.meta["selection"] == "perturbation"


def test_theta_star_contracts():
    m = np.zeros(4)
    with pytest.raises(ContractError):
        ThetaOracle([np.zeros(4)], [np.zeros(3)], m)
    with pytest.raises(DegenerateInputError):
        theta_star(ThetaOracle([np.ones(4)], [np.ones(4)], m))
    th_i, th_t = theta_star(ThetaOracle([np.array([1.0, -1, 1, -1])], [np.array([2.0, -2, 2, -2])], m))
    assert th_i + th_t == 1.0 and th_i > th_t


def test_dot_mentions_every_edge():
    cell = build_cell("affine5-small")
    dot = to_dot(cell, identity_genotype(cell))
    assert dot.startswith("digraph")
    assert dot.count("->") == sum(len(e.candidates) for e in cell.edges)
