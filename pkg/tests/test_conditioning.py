import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentctl import autodiff as ad
from latentctl.autodiff import Tensor
from latentctl.conditioning import (DescriptorEmbedding, ReferencePair, StyleDescriptor, SubjectDescriptor,
                                    SubjectProfile, embed_text, fnv1a64, get_descriptor, init_projector,
                                    project_condition, style_descriptor, subject_descriptor)
from latentctl.diagnostics import check_gradient
from latentctl.errors import ContractError
from latentctl.rng import Rng
from latentctl.training import render


def rand_image(seed, size=16):
    return np.random.default_rng(seed).uniform(size=(3, size, size))


def swap_patches(img, a, b, p=4):
    out = img.copy()
    (ya, xa), (yb, xb) = a, b
    pa = img[:, ya * p:(ya + 1) * p, xa * p:(xa + 1) * p].copy()
    out[:, ya * p:(ya + 1) * p, xa * p:(xa + 1) * p] = img[:, yb * p:(yb + 1) * p, xb * p:(xb + 1) * p]
    out[:, yb * p:(yb + 1) * p, xb * p:(xb + 1) * p] = pa
    return out


# -- text -----------------------------------------------------------------------------
def test_text_is_deterministic_and_local():
    a1, a2 = embed_text("a dog").embeddings.data, embed_text("a dog").embeddings.data
    assert np.array_equal(a1, a2)
    cat = embed_text("a cat").embeddings.data
    assert np.array_equal(a1[0], cat[0]) and not np.array_equal(a1[1], cat[1])


def test_text_rows_come_from_seeded_table():
    vocab, d, seed = 64, 8, 99
    table = Rng(seed).normal((vocab, d)) / math.sqrt(d)
    emb = embed_text("red square", vocab_dim=vocab, d_cond=d, seed=seed).embeddings.data
    for row, tok in zip(emb, ["red", "square"]):
        assert np.array_equal(row, table[fnv1a64(tok) % vocab])
        assert np.linalg.norm(row) == np.linalg.norm(table[fnv1a64(tok) % vocab])


def test_empty_prompt_rejected():
    with pytest.raises(ContractError):
        embed_text("   ")


# -- style descriptor ------------------------------------------------------------------
def naive_gram(img, patch=4, gain=6.0):
    c, h, w = img.shape
    total = np.zeros((2 * c, 2 * c))
    count = 0
    for py in range(h // patch):
        for px in range(w // patch):
            block = img[:, py * patch:(py + 1) * patch, px * patch:(px + 1) * patch].reshape(c, -1)
            feats = np.concatenate([block, (block - block.mean(axis=1, keepdims=True)) * gain])
            g = np.zeros((2 * c, 2 * c))
            for i in range(2 * c):
                for j in range(2 * c):
                    g[i, j] = sum(feats[i, k] * feats[j, k] for k in range(patch * patch)) / patch**2
            total += g
            count += 1
    total /= count
    vec = np.array([total[i, j] for i in range(2 * c) for j in range(i, 2 * c)])
    return vec / np.linalg.norm(vec)


def test_style_matches_naive_gram():
    img = rand_image(0)
    assert np.max(np.abs(style_descriptor(img).vector.data - naive_gram(img))) <= 1e-12


def test_style_constant_gray_is_outer_product():
    col = np.array([0.2, 0.5, 0.7])
    img = np.broadcast_to(col[:, None, None], (3, 8, 8)).copy()
    outer = np.zeros((6, 6))
    outer[:3, :3] = np.outer(col, col)
    vec = outer[np.triu_indices(6)]
    assert np.max(np.abs(style_descriptor(img).vector.data - vec / np.linalg.norm(vec))) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.permutations(range(16)))
def test_style_is_patch_permutation_invariant(seed, perm):
    img = rand_image(seed)
    blocks = [img[:, (i // 4) * 4:(i // 4 + 1) * 4, (i % 4) * 4:(i % 4 + 1) * 4] for i in range(16)]
    shuffled = np.zeros_like(img)
    for dst, src in enumerate(perm):
        shuffled[:, (dst // 4) * 4:(dst // 4 + 1) * 4, (dst % 4) * 4:(dst % 4 + 1) * 4] = blocks[src]
    diff = style_descriptor(img).vector.data - style_descriptor(shuffled).vector.data
    assert np.max(np.abs(diff)) <= 1e-12


def test_style_ignores_texture_phase():
    a = style_descriptor(render("mint", "stripes", "disc", "upperleft", 0)).vector.data
    b = style_descriptor(render("mint", "stripes", "disc", "upperleft", 2)).vector.data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_non_divisible_image_rejected():
    with pytest.raises(ContractError):
        style_descriptor(np.zeros((3, 10, 10)))
    with pytest.raises(ContractError):
        subject_descriptor(np.zeros((3, 10, 10)))


# -- subject descriptor --------------------------------------------------------------------
def brute_force_subject(img, desc: SubjectDescriptor):
    p = desc.profile.patch
    c, h, w = img.shape
    means = [img[ch].mean() for ch in range(c)]
    energy = []
    for py in range(h // p):
        for px in range(w // p):
            e = 0.0
            for ch in range(c):
                s = 0.0
                for y in range(py * p, (py + 1) * p):
                    for x in range(px * p, (px + 1) * p):
                        s += img[ch, y, x] - means[ch]
                e += (s / (p * p)) ** 2
            energy.append(e)
    energy = np.array(energy) - np.mean(energy)
    pos = (energy + np.sqrt(energy**2 + desc.profile.softness)) / 2
    pos = pos / np.linalg.norm(pos)
    w_map, b = desc.frozen_map(len(pos))
    out = pos @ w_map.data + b.data
    return out / np.linalg.norm(out)


def test_subject_matches_brute_force_pooling():
    img = rand_image(4, size=8)
    desc = SubjectDescriptor()
    assert np.max(np.abs(desc.embed(Tensor(img)).data - brute_force_subject(img, desc))) <= 1e-12


def test_subject_layout_sensitive():
    img = render("plain", "flat", "square", "upperleft")
    swapped = swap_patches(img, (2, 2), (7, 7))
    diff = subject_descriptor(img).vector.data - subject_descriptor(swapped).vector.data
    assert np.linalg.norm(diff) >= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_swapping_distinct_patches_changes_subject_embedding(seed):
    img = rand_image(seed)
    swapped = swap_patches(img, (0, 0), (3, 3))
    assert np.linalg.norm(subject_descriptor(img).vector.data - subject_descriptor(swapped).vector.data) >= 1e-6


def test_subject_ignores_channel_shift():
    img = rand_image(5) * 0.5
    shifted = img + np.array([0.3, -0.1, 0.2])[:, None, None] + 0.1
    diff = subject_descriptor(img).vector.data - subject_descriptor(shifted).vector.data
    assert np.max(np.abs(diff)) <= 1e-9


def test_frozen_map_is_isometry_with_orthogonal_bias():
    desc = SubjectDescriptor()
    w, b = desc.frozen_map(64)
    w, b = w.data, b.data
    assert np.max(np.abs(w @ w.T - np.eye(64))) <= 1e-12
    assert np.max(np.abs(w @ b)) <= 1e-12
    assert np.linalg.norm(b) == pytest.approx(desc.profile.bias_scale, abs=1e-12)
    with pytest.raises(ContractError):
        SubjectDescriptor(SubjectProfile(d_desc=32)).embed(Tensor(rand_image(0, 32)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_subject_cosines_have_a_floor(s1, s2):
    desc = SubjectDescriptor()
    a = desc.embed(Tensor(rand_image(s1, 32))).data
    b = desc.embed(Tensor(rand_image(s2, 32))).data
    k = desc.profile.bias_scale**2
    assert a @ b >= k / (k + 1) - 1e-12


@pytest.mark.parametrize("kind", ["style", "subject"])
def test_descriptors_unit_norm_and_differentiable(kind):
    d = get_descriptor(kind)
    img = rand_image(7)
    assert abs(np.linalg.norm(d.embed(Tensor(img)).data) - 1.0) <= 1e-9
    target = d.embed(Tensor(rand_image(8)))
    assert check_gradient(lambda x: ad.sq_l2_distance(d.embed(x), target), img) <= 1e-5


def test_face_profile_registered():
    d = get_descriptor("subject", "face")
    assert d.profile.patch == 8
    assert abs(np.linalg.norm(d.embed(Tensor(rand_image(1, 32))).data) - 1.0) <= 1e-9


def test_batched_embedding_matches_single():
    imgs = np.stack([rand_image(i) for i in range(3)])
    for d in (StyleDescriptor(), SubjectDescriptor()):
        batch = d.embed(Tensor(imgs)).data
        for i in range(3):
            assert np.max(np.abs(batch[i] - d.embed(Tensor(imgs[i])).data)) <= 1e-12


# -- references and projectors ------------------------------------------------------------
def test_reference_pair_validation():
    ok = ReferencePair(np.zeros((3, 8, 8)), np.ones((3, 8, 8)))
    assert ok.r_sub.dtype == np.float64
    with pytest.raises(ContractError):
        ReferencePair(np.zeros((8, 8)), np.zeros((3, 8, 8)))
    with pytest.raises(ContractError):
        ReferencePair(np.full((3, 8, 8), 1.5), np.zeros((3, 8, 8)))


def test_untrained_projector_emits_zero_tokens():
    proj = init_projector("style", 21)
    out = project_condition(np.zeros(21), proj)
    assert out.shape == (4, 32) and not np.any(out.data)


@pytest.mark.parametrize("d_desc", [5, 21, 80])
def test_projector_output_shape(d_desc):
    proj = init_projector("object", d_desc)
    assert project_condition(np.ones(d_desc), proj).shape == (proj.n_tok, proj.d_cond)


def test_projector_kind_mismatch():
    emb = DescriptorEmbedding(Tensor(np.ones(21) / math.sqrt(21)), "style")
    with pytest.raises(ContractError):
        project_condition(emb, init_projector("object", 21))
    with pytest.raises(ContractError):
        project_condition(np.ones(7), init_projector("style", 21))
    with pytest.raises(ContractError):
        init_projector("face", 21)


def test_projector_gradient_matches_finite_differences():
    proj = init_projector("style", 21, seed=3)
    rng = np.random.default_rng(2)
    proj = proj.with_params({**proj.params, "w2": Tensor(rng.normal(size=proj.params["w2"].shape) * 0.1)})
    assert check_gradient(lambda x: (project_condition(x, proj) ** 2).sum(), rng.normal(size=21)) <= 1e-5
