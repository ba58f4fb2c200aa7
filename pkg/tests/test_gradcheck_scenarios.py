import numpy as np

from dasrf.gradcheck import CASES, GradCase, probe, run_case
from dasrf.scenarios import IdentityBiasSetup, LinearTeacher, random_small_cell
from dasrf.tensor import Tensor, ops, record
from dasrf.transforms import REGISTRY


def _wrong_square(a):
    return record(a.data ** 2, (a,), lambda g: (g * 2.1 * a.data,))


def test_probe_detects_a_wrong_gradient():
    case = GradCase("wrong", lambda rng: (_wrong_square, [rng.normal(size=5)]))
    assert not run_case(case, probes=5).passed


def test_smooth_check_does_not_hide_wrong_gradients():
    rng = np.random.default_rng(0)
    assert probe(_wrong_square, [rng.normal(size=5)], rng, smooth_check=True) > 1e-2


def test_registry_covers_every_smooth_transform():
    names = {c.name for c in CASES}
    smooth = {k for k, info in REGISTRY.items() if info.smooth and k != "Identity"}
    assert smooth <= names


def test_probe_on_exact_linear_map():
    rng = np.random.default_rng(1)
    assert probe(lambda a: ops.mul(a, 3.0), [rng.normal(size=4)], rng) < 1e-8


def test_identity_bias_data_planted_columns():
    setup = IdentityBiasSetup(samples=200)
    ds = setup.data(np.random.default_rng(0))
    col = setup.column
    centre = ds.images[:, 0, 0, col] - 0.5
    left = ds.images[:, 0, 0, col - setup.delta] - 0.5
    sign = 2 * ds.labels - 1
    assert (np.sign(left) == sign).mean() > 0.9
    assert np.corrcoef(centre, sign)[0, 1] > 0.5
    cell = setup.cell()
    assert [e.candidates[1].kind for e in cell.edges] == ["TranslateY", "TranslateX"]


def test_random_small_cells_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(30):
        cell = random_small_cell(rng)
        assert len(cell.edges) <= 3
        assert all(2 <= len(e.candidates) <= 3 for e in cell.edges)


def test_teacher_is_frozen_linear():
    t = LinearTeacher(np.random.default_rng(0))
    x = np.random.default_rng(1).random((3, 1, 16, 16))
    a = t(Tensor(x)).data
    b = t(Tensor(x)).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 4)
