import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentctl.errors import ContractError, ShapeError
from latentctl.schedule import add_noise, ddim_step, make_schedule, predict_x0


class Fixed:
    """Stand-in schedule with a chosen alpha-bar at every step."""

    def __init__(self, ab, T=8):
        self.T, self._ab = T, ab

    def abar(self, t):
        return 1.0 if t == 0 else self._ab


def test_linear_single_step():
    assert make_schedule("linear", 1).alpha_bar == (1 - 1e-4,)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_strictly_decreasing_inside_unit_interval(kind):
    ab = np.array(make_schedule(kind, 8).alpha_bar)
    assert np.all((ab > 0) & (ab < 1)) and np.all(np.diff(ab) < 0)


def test_cosine_matches_closed_form():
    T = 8
    f = lambda t: math.cos((t / T * math.pi / 2) * 0.995 + 0.0025 * math.pi / 2) ** 2
    expected = [f(t) / f(0) for t in range(1, T + 1)]
    assert np.max(np.abs(np.array(make_schedule("cosine", T).alpha_bar) - expected)) <= 1e-15


def test_bad_schedule_arguments():
    with pytest.raises(ContractError):
        make_schedule("cosine", 0)
    with pytest.raises(ContractError):
        make_schedule("quadratic", 4)


def test_schedule_json_dump():
    s = make_schedule("cosine", 4)
    assert tuple(np.array(__import__("json").loads(s.to_json()))) == s.alpha_bar


def test_add_noise_cases():
    s = make_schedule("cosine", 8)
    x0 = np.array([0.5, -1.0])
    assert np.allclose(add_noise(x0, np.zeros(2), 3, s).data, math.sqrt(s.abar(3)) * x0, atol=0, rtol=0)
    assert np.allclose(add_noise(x0, np.ones(2), 1, make_schedule("cosine", 1000)).data, x0, atol=5e-3)
    assert add_noise([1.0], [1.0], 1, Fixed(0.25)).data[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-15)
    with pytest.raises(ContractError):
        add_noise(x0, x0, 9, s)
    with pytest.raises(ShapeError):
        add_noise(x0, np.ones(3), 1, s)


def test_predict_x0_modes():
    s = Fixed(0.25)
    assert predict_x0([1.0], [1.0], 1, s, "paper-eq2").data[0] == pytest.approx(5.0, abs=1e-15)
    assert predict_x0([1.0], [0.0], 1, s).data[0] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ContractError):
        predict_x0([1.0], [0.0], 1, s, "other")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32))
def test_predict_x0_inverts_add_noise(t, seed):
    rng = np.random.default_rng(seed)
    s = make_schedule("cosine", 8)
    x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    back = predict_x0(add_noise(x0, eps, t, s), eps, t, s).data
    assert np.max(np.abs(back - x0)) <= 1e-12 * max(1.0, 1.0 / math.sqrt(s.abar(t))) * 10


def test_ddim_terminal_step_returns_estimate():
    s = make_schedule("cosine", 8)
    x0 = np.array([0.3, 0.1])
    assert np.array_equal(ddim_step(x0, np.array([2.0, -1.0]), 1, s).data, x0)


@pytest.mark.parametrize("t", range(2, 9))
def test_ddim_step_consistent_with_forward_process(t):
    s = make_schedule("cosine", 8)
    rng = np.random.default_rng(t)
    x0, eps = rng.normal(size=5), rng.normal(size=5)
    prev = ddim_step(x0, add_noise(x0, eps, t, s), t, s).data
    assert np.max(np.abs(prev - add_noise(x0, eps, t - 1, s).data)) <= 1e-12


def test_two_step_trajectory_by_hand():
    s = make_schedule("linear", 2)
    a1, a2 = s.alpha_bar
    x2, x0_2, x0_1 = 0.7, 0.2, 0.25
    e2 = (x2 - math.sqrt(a2) * x0_2) / math.sqrt(1 - a2)
    x1 = math.sqrt(a1) * x0_2 + math.sqrt(1 - a1) * e2
    e1 = (x1 - math.sqrt(a1) * x0_1) / math.sqrt(1 - a1)
    x_final = 1.0 * x0_1 + 0.0 * e1
    got1 = ddim_step([x0_2], [x2], 2, s).data
    got0 = ddim_step([x0_1], got1, 1, s).data
    assert abs(got1[0] - x1) <= 1e-12 and abs(got0[0] - x_final) <= 1e-12


def test_oracle_sampling_loop_recovers_x0():
    s = make_schedule("cosine", 8)
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 16, 16)), rng.normal(size=(4, 16, 16))
    x = add_noise(x0, eps, 8, s)
    for t in range(8, 0, -1):
        x = ddim_step(predict_x0(x, eps, t, s), x, t, s)
    assert np.max(np.abs(x.data - x0)) <= 1e-9


def test_ddim_is_deterministic():
    s = make_schedule("cosine", 8)
    a = ddim_step([0.1, 0.2], [1.0, 2.0], 5, s).data
    assert np.array_equal(a, ddim_step([0.1, 0.2], [1.0, 2.0], 5, s).data)
