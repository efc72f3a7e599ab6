import numpy as np

from surfel_slam.optim import Adam


def test_first_step_has_learning_rate_magnitude():
    """Test that the bias-corrected first step moves by lr against the gradient."""
    params = {"x": np.array([1.0, -2.0, 3.0])}
    opt = Adam({"x": 0.1})
    opt.step(params, {"x": np.array([5.0, -0.01, 0.0])})
    np.testing.assert_allclose(params["x"], [0.9, -1.9, 3.0], atol=1e-9)


def test_per_element_learning_rates():
    """Test array-valued learning rates as used for the pose twist."""
    opt = Adam({"xi": np.array([1e-3] * 3 + [2e-3] * 3)})
    update = opt.direction({"xi": np.ones(6)})["xi"]
    np.testing.assert_allclose(update, [-1e-3] * 3 + [-2e-3] * 3)


def test_minimizes_quadratic():
    """Test convergence on a separable quadratic."""
    target = np.array([[0.5, -1.5], [2.0, 0.25]])
    params = {"w": np.zeros((2, 2))}
    opt = Adam({"w": 0.05})
    for _ in range(2000):
        opt.step(params, {"w": 2.0 * (params["w"] - target)})
    np.testing.assert_allclose(params["w"], target, atol=1e-3)


def test_reset_clears_moments():
    """Test that reset restarts bias correction."""
    opt = Adam({"x": 0.1})
    for _ in range(5):
        opt.direction({"x": np.array([1.0])})
    opt.reset()
    assert opt.t == 0 and not opt.m
    np.testing.assert_allclose(opt.direction({"x": np.array([-3.0])})["x"], [0.1])


def test_step_updates_in_place():
    """Test that parameter arrays are modified in place."""
    x = np.zeros(3)
    Adam({"x": 0.5}).step({"x": x}, {"x": np.ones(3)})
    np.testing.assert_allclose(x, -0.5)
