import numpy as np
import pytest

from flowcast.autodiff import Tensor
from flowcast.errors import ConfigError, FlowcastError
from flowcast.optim import AdamState, adam_step, clip_grad_norm


def test_zero_grad_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    p.grad = np.zeros(3)
    st = AdamState({"p": p}, lr=0.1)
    before = p.data.copy()
    adam_step({"p": p}, st)
    np.testing.assert_allclose(p.data, before, atol=1e-12)


def test_first_step_closed_form():
    # constant unit gradient, first step: bias-corrected update is -lr/(1+eps)
    p = Tensor(np.array([0.0]))
    p.grad = np.ones(1)
    lr = 0.01
    st = AdamState({"p": p}, lr=lr)
    adam_step({"p": p}, st)
    assert float(p.data[0]) == pytest.approx(-lr, rel=1e-6)
    assert st.step == 1


def test_hundred_steps_on_quadratic_converges():
    # expected trajectory computed by running the update rule directly
    def run_rule():
        p, m, v, t = 1.0, 0.0, 0.0, 0
        for _ in range(100):
            g = 2.0 * p
            t += 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        return p

    expected = run_rule()
    p = Tensor(np.array([1.0]))
    st = AdamState({"p": p}, lr=0.1)
    for _ in range(100):
        p.grad = 2.0 * p.data
        adam_step({"p": p}, st)
    assert float(p.data[0]) == pytest.approx(expected, abs=1e-12)
    assert abs(float(p.data[0])) < 0.1


def test_missing_grad_names_parameter():
    p = Tensor(np.ones(2))
    st = AdamState({"w_out": p})
    with pytest.raises(FlowcastError, match="w_out"):
        adam_step({"w_out": p}, st)


def test_lr_must_be_positive():
    with pytest.raises(ConfigError):
        AdamState({"p": Tensor(np.ones(1))}, lr=0.0)


def test_clip_grad_norm():
    p = Tensor(np.zeros(3))
    p.grad = np.array([3.0, 4.0, 0.0])
    norm = clip_grad_norm({"p": p}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-9)
    # below the threshold: untouched
    p.grad = np.array([0.1, 0.0, 0.0])
    clip_grad_norm({"p": p}, max_norm=1.0)
    np.testing.assert_array_equal(p.grad, [0.1, 0.0, 0.0])
