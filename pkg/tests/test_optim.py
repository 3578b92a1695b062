import numpy as np
import pytest

from latentctl import autodiff as ad
from latentctl.autodiff import Tensor
from latentctl.errors import ContractError
from latentctl.optim import AdamState, adam_step


def test_zero_gradient_is_fixed_point_and_moments_decay():
    p = {"w": Tensor([1.0, -2.0])}
    state = AdamState()
    p, state = adam_step(p, {"w": np.array([1.0, 1.0])}, state, 0.1)
    m1, v1 = state.m["w"].copy(), state.v["w"].copy()
    before = p["w"].data.copy()
    p, state = adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    assert np.all(np.abs(state.m["w"]) < np.abs(m1)) and np.all(state.v["w"] < v1)
    q, _ = adam_step({"w": Tensor(before)}, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(q["w"].data, before)


def test_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3, 0.0])
    lr = 0.01
    p, state = adam_step({"z": Tensor(np.ones(4))}, {"z": g}, AdamState(), lr)
    expected = 1.0 - lr * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(p["z"].data - expected)) <= 1e-15
    assert state.step == 1


def test_converges_on_quadratic():
    rng = np.random.default_rng(1)
    c = rng.normal(size=16)
    z = {"z": Tensor(np.zeros(16), requires_grad=True)}
    state = AdamState()
    for _ in range(200):
        loss = ad.sq_l2_distance(z["z"], Tensor(c))
        z, state = adam_step(z, ad.backward(loss), state, 0.05)
    assert np.linalg.norm(z["z"].data - c) < 1e-2


def test_accepts_gradient_map_and_keeps_flag():
    w = Tensor(np.ones(3), requires_grad=True)
    grads = ad.backward((w * w).sum())
    out, _ = adam_step({"w": w}, grads, AdamState(), 0.1)
    assert out["w"].requires_grad


def test_missing_gradient_and_bad_shape():
    with pytest.raises(ContractError):
        adam_step({"a": Tensor([1.0])}, {}, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step({"a": Tensor([1.0])}, {"a": np.ones(2)}, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step({"a": Tensor([1.0])}, {"a": np.ones(1)}, AdamState(), -1.0)


def test_zero_learning_rate_leaves_parameters():
    p = {"a": Tensor([0.3, 0.7])}
    out, _ = adam_step(p, {"a": np.array([5.0, -5.0])}, AdamState(), 0.0)
    assert np.array_equal(out["a"].data, p["a"].data)
