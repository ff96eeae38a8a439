import numpy as np
import pytest

from gtvseg import ops
from gtvseg.autograd import GradTape, Tensor, active_tape, backward, grad_check


def test_float32_default_and_float64_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with GradTape() as tape:
        y = ops.add(ops.mul(x, x), x)
        loss = ops.sum(y)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_clears_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(ops.scale(x, 3.0))
    backward(loss, tape)
    assert tape.records == []


def test_backward_requires_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ValueError):
        backward(y, tape)


def test_tapes_nest_and_unwind():
    assert active_tape() is None
    with GradTape() as outer:
        with GradTape() as inner:
            assert active_tape() is inner
        assert active_tape() is outer
    assert active_tape() is None


def test_frozen_inputs_get_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.full(2, 5.0))
    with GradTape() as tape:
        loss = ops.sum(ops.mul(x, c))
    backward(loss, tape)
    assert c.grad is None
    np.testing.assert_allclose(x.grad, 5.0)


def test_grad_check_flags_wrong_gradient():
    from gtvseg.autograd import record

    def bad_square(x):
        out = Tensor(x.data**2)
        return record(out, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = Tensor(np.array([0.5, -1.5, 2.0]))
    assert grad_check(lambda x: ops.sum(bad_square(x)), x) > 0.1


def test_grad_check_restores_inputs():
    x = Tensor(np.array([1.0, 2.0], np.float32))
    before = x.data.copy()
    grad_check(lambda x: ops.sum(ops.mul(x, x)), x)
    assert x.dtype == np.float32 and np.array_equal(x.data, before) and x.grad is None
