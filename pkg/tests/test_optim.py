import numpy as np
import pytest

from nowcast.errors import ConfigurationError, NumericError
from nowcast.optim import Optimizer, OptimizerConfig, OptimizerState, adabelief_step, adam_step


def first_step(method, g=1.0, **kw):
    params = {"p": np.array([0.0])}
    Optimizer(method=method, **kw).step(params, {"p": np.array([g])})
    return params["p"][0]


def test_adabelief_first_step_hand_value():
    # m = 0.1, m_hat = 1, s_hat = 0.81 -> -lr / 0.9
    assert first_step("adabelief") == pytest.approx(-1.1111e-3, abs=1e-7)
    assert first_step("adabelief") == pytest.approx(-1e-3 / 0.9, rel=1e-9)


def test_adam_first_step_hand_value():
    assert abs(first_step("adam") - (-1e-3 / (1 + 1e-7))) <= 1e-9


@pytest.mark.parametrize("method", ["adam", "adabelief"])
def test_zero_gradient_is_a_no_op(method):
    params = {"p": np.array([0.3, -2.0])}
    opt = Optimizer(method=method)
    for _ in range(50):
        opt.step(params, {"p": np.zeros(2)})
    np.testing.assert_array_equal(params["p"], [0.3, -2.0])


def test_adabelief_step_grows_on_constant_gradient():
    params = {"p": np.array([0.0])}
    opt = Optimizer(method="adabelief")
    steps = []
    for _ in range(500):
        before = params["p"][0]
        opt.step(params, {"p": np.array([0.5])})
        steps.append(abs(params["p"][0] - before))
    assert steps[-1] > steps[0]


def test_adam_quadratic_descends_monotonically():
    params = {"p": np.array([1.0])}
    opt = Optimizer(method="adam", lr=1e-2)
    prev = 1.0
    for _ in range(100):
        opt.step(params, {"p": 2 * params["p"]})
        assert abs(params["p"][0]) < prev
        prev = abs(params["p"][0])


@pytest.mark.parametrize("step", [adam_step, adabelief_step])
def test_first_moment_is_a_convex_combination(step):
    rng = np.random.default_rng(0)
    cfg = OptimizerConfig(method="adam" if step is adam_step else "adabelief")
    state = OptimizerState()
    params = {"p": np.zeros(5)}
    seen = np.zeros(5)
    for _ in range(30):
        g = rng.normal(size=5)
        seen = np.maximum(seen, np.abs(g))
        step(params, {"p": g}, state, cfg)
        assert np.all(np.abs(state.m["p"]) <= seen + 1e-15)
    assert state.t == 30


def test_both_rules_move_against_the_gradient():
    for method in ("adam", "adabelief"):
        assert first_step(method, g=2.0) < 0
        assert first_step(method, g=-2.0) > 0


def test_decoupled_weight_decay():
    params = {"p": np.array([2.0])}
    Optimizer(method="adabelief", lr=0.1, weight_decay=0.5).step(params, {"p": np.array([0.0])})
    assert params["p"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_non_finite_gradient_raises():
    params = {"p": np.array([1.0])}
    with pytest.raises(NumericError):
        Optimizer().step(params, {"p": np.array([np.nan])})
    assert params["p"][0] == 1.0


def test_config_defaults_and_validation():
    assert OptimizerConfig().eps == 1e-14
    assert OptimizerConfig(method="adam").eps == 1e-7
    for bad in ({"method": "sgd"}, {"lr": 0.0}, {"beta1": 1.0}, {"weight_decay": -1.0}):
        with pytest.raises(ConfigurationError):
            OptimizerConfig(**bad)


def test_lr_property_is_adjustable():
    opt = Optimizer(lr=0.01)
    opt.lr = 0.005
    assert opt.cfg.lr == 0.005
