import math

import numpy as np
import pytest

from src.errors import StructuralError
from src.tensornet import AdamState, PlateauSchedule, adam_step


def _reference_adam(x: float, steps: int, lr: float) -> list[float]:
    """Scalar Adam on f(x) = x**2, written out longhand."""
    m = v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9**t)
        v_hat = v / (1.0 - 0.999**t)
        x -= lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        trajectory.append(x)
    return trajectory


def test_adam_matches_scalar_reference():
    params = {"w": np.array([1.5])}
    state = AdamState.create(params, lr=0.05)
    ours = []
    for _ in range(100):
        params = adam_step(state, params, {"w": 2.0 * params["w"]})
        ours.append(float(params["w"][0]))
    np.testing.assert_allclose(ours, _reference_adam(1.5, 100, 0.05), atol=1e-6)
    assert state.step == 100


def test_adam_first_step_moves_by_lr():
    params = {"a": np.array([0.0, 0.0]), "b": np.ones((2, 2), dtype=np.float32)}
    state = AdamState.create(params, lr=0.01)
    out = adam_step(state, params, {"a": np.array([3.0, -0.2]), "b": np.full((2, 2), 5.0)})
    np.testing.assert_allclose(out["a"], [-0.01, 0.01], rtol=1e-6)
    np.testing.assert_allclose(out["b"], 0.99, rtol=1e-6)
    assert out["b"].dtype == np.float32
    # inputs are left untouched
    np.testing.assert_array_equal(params["a"], 0.0)


def test_adam_rejects_mismatched_gradients():
    params = {"w": np.zeros(3)}
    state = AdamState.create(params)
    with pytest.raises(StructuralError):
        adam_step(state, params, {"w": np.zeros(2)})
    with pytest.raises(StructuralError):
        adam_step(state, params, {})
    with pytest.raises(StructuralError):
        adam_step(state, {"w": np.zeros(4)}, {"w": np.zeros(4)})


def test_plateau_schedule_tracks_best_and_stops():
    schedule = PlateauSchedule(lr=1e-3, stop_after=3)
    assert schedule.update(0, 1.0)
    assert schedule.update(1, 0.5)
    assert not schedule.update(2, 0.6)
    assert not schedule.update(3, 0.5)
    assert not schedule.should_stop
    assert not schedule.update(4, 0.7)
    assert schedule.should_stop
    assert (schedule.best, schedule.best_epoch) == (0.5, 1)
    assert schedule.lr == 1e-3


def test_plateau_schedule_cuts_learning_rate():
    schedule = PlateauSchedule(lr=1e-3, stop_after=10, reduce_after=2, factor=0.1)
    schedule.update(0, 1.0)
    for epoch in range(1, 5):
        schedule.update(epoch, 2.0)
    assert schedule.lr == pytest.approx(1e-5)
    schedule.update(5, 0.1)
    schedule.update(6, 0.2)
    assert schedule.lr == pytest.approx(1e-5)
    assert schedule.stale == 1


def test_plateau_min_delta():
    schedule = PlateauSchedule(lr=1.0, stop_after=1, min_delta=0.1)
    schedule.update(0, 1.0)
    assert not schedule.update(1, 0.95)
    assert schedule.should_stop
