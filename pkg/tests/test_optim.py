import numpy as np
import pytest

from pifenet.optim import LrSchedule, adamw_step, one_cycle_lr
from pifenet.tensor import NonFiniteError, Parameter, precision


def param(values, grad):
    with precision(np.float64):
        p = Parameter(np.array(values, dtype=np.float64))
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_zero_gradient_without_decay_is_fixed_point():
    p = param([1.0, -2.0], [0.0, 0.0])
    adamw_step([p], lr=0.1, weight_decay=0.0)
    assert p.data.tolist() == [1.0, -2.0]


def test_decay_is_decoupled():
    p = param([1.0, -2.0], [0.0, 0.0])
    adamw_step([p], lr=0.1, weight_decay=0.1)
    assert p.data == pytest.approx([0.99, -1.98], abs=1e-12)


def test_first_step_moves_by_lr():
    p = param([1.0], [3.0])
    adamw_step([p], lr=0.01, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.99, abs=1e-8)


def test_nonfinite_gradient_raises():
    p = param([1.0], [np.inf])
    with pytest.raises(NonFiniteError):
        adamw_step([p], lr=0.01)


def test_one_cycle_shape():
    s = LrSchedule(total_steps=100, max_lr=0.003, warmup_frac=0.4)
    assert one_cycle_lr(0, s) == pytest.approx(0.003 / 25)
    assert one_cycle_lr(40, s) == 0.003
    assert one_cycle_lr(100, s) == pytest.approx(0.003 / 1e4, rel=1e-12)
    lrs = [one_cycle_lr(t, s) for t in range(101)]
    assert all(a <= b for a, b in zip(lrs[:40], lrs[1:41]))
    assert all(a >= b for a, b in zip(lrs[40:], lrs[41:]))
    assert min(lrs) > 0


@pytest.mark.parametrize("t", [-1, 101])
def test_one_cycle_out_of_range(t):
    with pytest.raises(ValueError):
        one_cycle_lr(t, LrSchedule(100))


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(0)
    with pytest.raises(ValueError):
        LrSchedule(10, warmup_frac=1.0)
