import math

import numpy as np
import pytest

from error_handler import NumericError, ValidationError
from optimizer import OptimizerState, sgd_step


def test_plain_gradient_step():
    state = OptimizerState({'default': 1.0}, total_steps=10, momentum=0.0)
    params = {'w': np.zeros(3)}
    sgd_step(state, params, {'w': np.ones(3)}, step=0)
    np.testing.assert_array_equal(params['w'], -np.ones(3))


def test_momentum_recursion_by_hand():
    state = OptimizerState({'default': 1.0}, total_steps=10 ** 9, momentum=0.9)
    params = {'w': np.zeros(1)}
    sgd_step(state, params, {'w': np.ones(1)}, step=0)
    sgd_step(state, params, {'w': np.ones(1)}, step=1)
    assert params['w'][0] == pytest.approx(-2.9, abs=1e-12)


def test_cosine_schedule():
    state = OptimizerState({'local': 0.2}, total_steps=100)
    assert state.lr('local', 0) == pytest.approx(0.2)
    assert state.lr('local', 50) == pytest.approx(0.1)
    assert state.lr('local', 25) == pytest.approx(0.2 * 0.5 * (1 + math.cos(math.pi / 4)))


def test_last_step_barely_moves_parameters():
    state = OptimizerState({'default': 1.0}, total_steps=1000, momentum=0.0)
    params = {'w': np.full(2, 5.0)}
    sgd_step(state, params, {'w': np.ones(2)}, step=999)
    assert state.lr('default', 999) < 1e-5
    np.testing.assert_allclose(params['w'], 5.0, atol=1e-5)


def test_groups_follow_parameter_prefix():
    state = OptimizerState({'policy': 0.01, 'local': 1.0}, total_steps=10, momentum=0.0)
    params = {'policy.w': np.zeros(1), 'local.w': np.zeros(1)}
    sgd_step(state, params, {'policy.w': np.ones(1), 'local.w': np.ones(1)}, step=0)
    assert params['policy.w'][0] == pytest.approx(-0.01)
    assert params['local.w'][0] == pytest.approx(-1.0)


def test_weight_decay_adds_to_gradient():
    state = OptimizerState({'default': 1.0}, total_steps=10, momentum=0.0, weight_decay=0.1)
    params = {'w': np.full(1, 2.0)}
    sgd_step(state, params, {'w': np.zeros(1)}, step=0)
    assert params['w'][0] == pytest.approx(1.8)


def test_frozen_parameters_are_untouched():
    state = OptimizerState({'default': 1.0}, total_steps=10)
    params = {'a': np.zeros(1), 'b': np.zeros(1)}
    sgd_step(state, params, {'a': np.ones(1), 'b': np.ones(1)}, step=0, frozen={'b'})
    assert params['b'][0] == 0.0
    assert params['a'][0] == pytest.approx(-1.0)


def test_non_finite_gradient_names_parameter():
    state = OptimizerState({'default': 1.0}, total_steps=10)
    params = {'local.conv0.w': np.zeros(2)}
    with pytest.raises(NumericError) as info:
        sgd_step(state, params, {'local.conv0.w': np.array([0.0, np.nan])}, step=0)
    assert info.value.name == 'local.conv0.w'
    assert params['local.conv0.w'].tolist() == [0.0, 0.0]


def test_step_outside_schedule_is_rejected():
    state = OptimizerState({'default': 1.0}, total_steps=3)
    with pytest.raises(ValidationError):
        sgd_step(state, {'w': np.zeros(1)}, {'w': np.zeros(1)}, step=3)


def test_unknown_group_is_rejected():
    state = OptimizerState({'local': 1.0}, total_steps=3)
    with pytest.raises(ValidationError):
        sgd_step(state, {'policy.w': np.zeros(1)}, {'policy.w': np.zeros(1)}, step=0)
