import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from golden_inputs import golden_case
from latentctl.autodiff import Tensor
from latentctl.conditioning import embed_text
from latentctl.denoiser import (AggregationState, ConditioningBundle, Decoder, aggregate_ota, cross_attention,
                                decode, denoise, init_denoiser, orthogonal_reject, update_style_weight)
from latentctl.diagnostics import check_gradient
from latentctl.errors import ShapeError

GOLDEN = Path(__file__).parent / "data" / "denoise_golden.npy"
# two-decimal features keep products clear of underflow, zeros included
FEATURE = st.integers(-1000, 1000).map(lambda k: k / 100)


# -- attention ---------------------------------------------------------------------
def test_single_key_attention_is_value_broadcast():
    rng = np.random.default_rng(0)
    q, kv = rng.normal(size=(5, 4)), rng.normal(size=(1, 3))
    w_k, w_v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = cross_attention(Tensor(q), Tensor(kv), Tensor(w_k), Tensor(w_v)).data
    assert np.max(np.abs(out - np.tile(kv @ w_v, (5, 1)))) <= 1e-15


def test_zero_value_projection_gives_zero():
    rng = np.random.default_rng(1)
    out = cross_attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(2, 3))),
                          Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros((3, 4)))).data
    assert not np.any(out)


def test_two_queries_three_keys_hand_unrolled():
    rng = np.random.default_rng(2)
    q, kv = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
    w_k, w_v = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    k = [[kv[j, 0] * w_k[0, c] + kv[j, 1] * w_k[1, c] for c in range(2)] for j in range(3)]
    v = [[kv[j, 0] * w_v[0, c] + kv[j, 1] * w_v[1, c] for c in range(2)] for j in range(3)]
    expected = np.zeros((2, 2))
    for i in range(2):
        s = [(q[i, 0] * k[j][0] + q[i, 1] * k[j][1]) / math.sqrt(2) for j in range(3)]
        e = [math.exp(x - max(s)) for x in s]
        a = [x / sum(e) for x in e]
        for c in range(2):
            expected[i, c] = a[0] * v[0][c] + a[1] * v[1][c] + a[2] * v[2][c]
    out = cross_attention(Tensor(q), Tensor(kv), Tensor(w_k), Tensor(w_v)).data
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 5))), Tensor(np.ones((3, 4))),
                        Tensor(np.ones((3, 4))))


# -- rejection and aggregation ------------------------------------------------------------
def test_rejection_cases():
    assert np.allclose(orthogonal_reject(Tensor([[2.0, 4.0]]), Tensor([[1.0, 2.0]])).data, 0.0, atol=1e-15)
    f = Tensor([[0.0, 3.0]])
    assert np.max(np.abs(orthogonal_reject(f, Tensor([[1.0, 0.0]])).data - f.data)) <= 1e-12
    assert np.array_equal(orthogonal_reject(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]])).data, [[0.0, 1.0]])
    assert np.array_equal(orthogonal_reject(Tensor([[1.0, 1.0]]), Tensor([[0.0, 0.0]])).data, [[1.0, 1.0]])


def test_rejection_modes():
    fs, ft = Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]])
    assert np.array_equal(orthogonal_reject(fs, ft, mode="project").data, [[1.0, 0.0]])
    assert np.array_equal(orthogonal_reject(fs, ft, mode="none").data, [[1.0, 1.0]])
    with pytest.raises(ShapeError):
        orthogonal_reject(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 8), elements=FEATURE), arrays(np.float64, (6, 8), elements=FEATURE))
def test_rejected_features_orthogonal_to_text(fs, ft):
    hat = orthogonal_reject(Tensor(fs), Tensor(ft)).data
    dots = np.abs(np.sum(hat * ft, axis=-1))
    bound = 1e-6 * np.linalg.norm(fs, axis=-1) * np.linalg.norm(ft, axis=-1)
    assert np.all(dots <= bound)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2), st.floats(0, 3), st.integers(0, 2**32))
def test_text_component_preserved(mu_s, mu_c, seed):
    rng = np.random.default_rng(seed)
    ft, fsty, fsub = (Tensor(rng.normal(size=(4, 6))) for _ in range(3))
    agg = aggregate_ota(ft, fsty, orthogonal_reject(fsub, ft), AggregationState(mu_s=mu_s, mu_c=mu_c)).data
    lhs = np.sum((agg - mu_s * fsty.data) * ft.data, axis=-1)
    rhs = np.sum(ft.data * ft.data, axis=-1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


def test_aggregation_arithmetic():
    e = np.eye(3)
    ft, fs, fc = (Tensor(e[i:i + 1]) for i in range(3))
    assert np.array_equal(aggregate_ota(ft, fs, fc, AggregationState(mu_s=0.0, mu_c=0.0)).data, ft.data)
    zero = Tensor(np.zeros((1, 3)))
    assert np.array_equal(aggregate_ota(ft, zero, zero, AggregationState(mu_s=1.0, mu_c=1.0)).data, ft.data)
    out = aggregate_ota(ft, fs, fc, AggregationState(mu_s=0.6, mu_c=1.0)).data
    assert np.array_equal(out, [[1.0, 0.6, 1.0]])


# -- temporal weighting --------------------------------------------------------------------
def test_style_weight_update_cases():
    st0 = AggregationState(mu_s=0.6, zeta=0.4)
    assert update_style_weight(st0, 0.5, 0.2).mu_s == pytest.approx(0.76, abs=1e-15)
    assert update_style_weight(AggregationState(mu_s=0.6, zeta=0.0), 2.0, 0.0).mu_s == 0.6
    assert update_style_weight(AggregationState(mu_s=1.5, zeta=0.4), 2.0, 0.0).mu_s == 1.5
    assert st0.mu_s == 0.6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 4), st.floats(0, 1)), min_size=1, max_size=12), st.floats(0, 1))
def test_style_weight_monotone_and_capped(costs, zeta):
    state = AggregationState.initial(zeta=zeta)
    traj = [state.mu_s]
    for L_s, L_nc in costs:
        state = update_style_weight(state, L_s, L_nc)
        traj.append(state.mu_s)
    assert all(b >= a for a, b in zip(traj, traj[1:]))
    assert max(traj) <= 1.5 and traj[0] == 0.6


# -- denoiser ---------------------------------------------------------------------------------
def test_golden_output():
    x, t, bundle, state, weights, T = golden_case()
    assert np.max(np.abs(denoise(x, t, bundle, state, weights, T).data - np.load(GOLDEN))) <= 1e-12


def test_dead_conditioning_ignores_prompt():
    weights = init_denoiser(seed=1, zero_conditioning=True)
    x, t, bundle, state, _, T = golden_case()
    a = denoise(x, t, ConditioningBundle(bundle.text), state, weights, T).data
    b = denoise(x, t, ConditioningBundle(embed_text("something else entirely").embeddings), state, weights, T).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_style_token_permutation_invariance():
    x, t, bundle, state, weights, T = golden_case()
    perm = ConditioningBundle(bundle.text, Tensor(bundle.style.data[::-1].copy()), bundle.subject,
                              bundle.style_proj, bundle.subject_proj)
    a = denoise(x, t, bundle, state, weights, T).data
    assert np.max(np.abs(a - denoise(x, t, perm, state, weights, T).data)) <= 1e-12


def test_denoise_deterministic_and_batched():
    x, t, bundle, state, weights, T = golden_case()
    a = denoise(x, t, bundle, state, weights, T).data
    assert np.array_equal(a, denoise(x, t, bundle, state, weights, T).data)
    text = Tensor(np.stack([bundle.text.data] * 2))
    b2 = ConditioningBundle(text)
    single = denoise(x, t, ConditioningBundle(bundle.text), state, weights, T).data
    batch = denoise(Tensor(np.stack([x.data] * 2)), t, b2, state, weights, T).data
    assert np.max(np.abs(batch[1] - single)) <= 1e-12


def test_trace_satisfies_orthogonality():
    x, t, bundle, state, weights, T = golden_case()
    trace = []
    denoise(x, t, bundle, state, weights, T, trace=trace)
    assert len(trace) == weights.blocks
    for feats in trace:
        dots = np.abs(np.sum(feats.f_sub_hat * feats.f_text, axis=-1))
        bound = 1e-6 * np.linalg.norm(feats.f_sub, axis=-1) * np.linalg.norm(feats.f_text, axis=-1)
        assert np.all(dots <= bound)


def test_denoise_shape_mismatch():
    x, t, bundle, state, weights, T = golden_case()
    with pytest.raises(ShapeError):
        denoise(Tensor(np.zeros((4, 8, 8))), t, bundle, state, weights, T)


def test_weight_digest_tracks_values():
    w = init_denoiser(seed=0)
    assert w.digest() == init_denoiser(seed=0).digest() != init_denoiser(seed=1).digest()


# -- decoder --------------------------------------------------------------------------------
def test_identity_decoder_constant_latent():
    out = decode(np.full((4, 8, 8), 0.5), Decoder(profile="identity")).data
    assert out.shape == (3, 8, 8) and np.all(out == 0.5)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 4, 4), elements=st.floats(-50, 50)))
def test_decoder_range(z):
    out = decode(z, Decoder()).data
    assert out.shape == (3, 8, 8) and np.all((out >= 0) & (out <= 1))


def test_decoder_gradient_and_shape_errors():
    assert check_gradient(lambda z: (decode(z, Decoder()) ** 2).sum(), np.random.default_rng(0).normal(size=(4, 4, 4))) <= 1e-5
    with pytest.raises(ShapeError):
        decode(np.zeros((3, 4, 4)), Decoder())
    with pytest.raises(ShapeError):
        decode(np.zeros((2, 4, 4)), Decoder(profile="identity"))


def test_encoder_inverts_decoder_inside_range():
    dec = Decoder()
    img = np.random.default_rng(3).uniform(0.05, 0.95, size=(3, 8, 8))
    img = np.repeat(np.repeat(img[:, ::2, ::2], 2, axis=1), 2, axis=2)
    assert np.max(np.abs(decode(dec.encode(img), dec).data - img)) <= 1e-9
