import numpy as np
import pytest

from dasrf.errors import ContractError, DimensionError, FormatError, TapeError
from dasrf.tensor import SGD, Adam, LayerSpec, Tape, Tensor, backward, conv2d, grad_of, no_grad, precision
from dasrf.tensor import io as tio
from dasrf.tensor import ops


def test_precision_switch_restores_default():
    assert Tensor([1.0]).dtype == np.float32
    with precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_backward_accumulates_reused_inputs():
    with precision("f64"):
        x = Tensor([2.0, 3.0], requires_grad=True)
        (g,) = grad_of(lambda: ops.sum(ops.mul(x, x)), [x])
    np.testing.assert_allclose(g, [4.0, 6.0])


def test_unreachable_leaf_gets_zero_grad():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, 2.0))
        ops.mul(b, 3.0)
    grads = backward(tape, loss)
    assert grads[b].tolist() == [0.0]
    assert grads[a].tolist() == [2.0]


def test_backward_contracts():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(a, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)
    with Tape() as other:
        pass
    with Tape() as tape2:
        z = ops.sum(a)
    with pytest.raises(TapeError):
        backward(other, z)
    assert z.grad_handle is not None and tape2.handle_of(z) == 0


def test_no_grad_skips_recording():
    a = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.mul(a, 2.0)
    assert tape.nodes == []


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d_raw(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    with precision("f64"):
        y = ops.conv2d_raw(x, w, None, 1, 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.einsum("ocij,cij->o", w, xp[0, :, 1:4, 2:5])
    np.testing.assert_allclose(y[0, :, 1, 2], ref)


def test_conv_layer_spec_checks_weights():
    spec = LayerSpec.conv(3, c_in=2, c_out=4)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 5, 5))), spec, Tensor(np.ones((4, 3, 3, 3))))
    assert conv2d(Tensor(np.ones((1, 2, 5, 5))), spec, Tensor(np.ones((4, 2, 3, 3)))).shape == (1, 4, 3, 3)


def test_softmax_rows_sum_to_one():
    p = ops.softmax(Tensor(np.random.default_rng(1).normal(size=(4, 6)))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)


def test_straight_through_backward_is_identity():
    a = Tensor([0.2, 0.7], requires_grad=True)
    (g,) = grad_of(lambda: ops.sum(ops.mul(ops.straight_through(a, np.round), [3.0, 5.0])), [a])
    np.testing.assert_allclose(g, [3.0, 5.0])


def test_sgd_and_adam_reduce_quadratic():
    for make in (lambda p: SGD(p, 0.1, momentum=0.9), lambda p: Adam(p, 0.1)):
        w = Tensor([3.0, -2.0], requires_grad=True)
        opt = make({"w": w})
        for _ in range(200):
            grads = backward(*_quadratic(w))
            w.grad = grads[w]
            opt.step() if isinstance(opt, Adam) else opt.step({"w": grads[w]})
        assert np.abs(w.data).max() < 0.05


def _quadratic(w):
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, w))
    return tape, loss


def test_dast_round_trip(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    tio.save(tmp_path / "a.dast", arr)
    np.testing.assert_array_equal(tio.load(tmp_path / "a.dast"), arr)
    with pytest.raises(FormatError):
        tio.loads(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        tio.loads(tio.dumps(arr)[:-4])
    tio.save_checkpoint(tmp_path / "ck", {"w": arr}, {"step": 3})
    tensors, meta = tio.load_checkpoint(tmp_path / "ck")
    np.testing.assert_array_equal(tensors["w"], arr)
    assert meta == {"step": 3}
