"""Conditioning streams: hashed text embeddings, toy descriptors, projectors.

The two descriptors are built to measure disjoint things.  The style
descriptor is a patch-averaged channel Gram matrix (raw colour plus
high-passed texture channels), so it ignores where anything is.  The
subject descriptor pools mean-centred colour per patch in raster order,
keeps where each patch's contrast energy exceeds the patch average and
passes that map through a frozen affine map, so it sees layout but not
palette.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .rng import Rng, derive_seed

TEXT_SEED = 0x5EED_7E47


# -- text ------------------------------------------------------------------------
def fnv1a64(token: str) -> int:
    h = 0xCBF29CE484222325
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & ((1 << 64) - 1)
    return h


@functools.lru_cache(maxsize=8)
def text_table(vocab_dim: int, d_cond: int, seed: int) -> np.ndarray:
    """Frozen ``vocab_dim x d_cond`` table of N(0, 1/d_cond) rows."""
    table = Rng(seed).normal((vocab_dim, d_cond)) / math.sqrt(d_cond)
    table.flags.writeable = False
    return table


@dataclass(frozen=True)
class TextStream:
    prompt: str
    tokens: tuple
    embeddings: Tensor  # L x d_cond


def embed_text(prompt: str, vocab_dim: int = 1024, d_cond: int = 32, seed: int = TEXT_SEED) -> TextStream:
    tokens = tuple(prompt.split())
    if not tokens:
        raise ContractError("prompt must contain at least one token")
    table = text_table(vocab_dim, d_cond, seed)
    rows = [fnv1a64(tok) % vocab_dim for tok in tokens]
    return TextStream(prompt, tokens, Tensor(table[rows]))


# -- references ------------------------------------------------------------------
@dataclass(frozen=True)
class ReferencePair:
    """Subject and style reference images, each ``3 x H x W`` in [0, 1]."""

    r_sub: np.ndarray
    r_sty: np.ndarray

    def __post_init__(self):
        for name in ("r_sub", "r_sty"):
            img = getattr(self, name)
            img = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
            if img.ndim != 3 or img.shape[0] != 3:
                raise ContractError(f"{name} must be 3 x H x W, got {img.shape}")
            if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
                raise ContractError(f"{name} pixel values must lie in [0, 1]")
            object.__setattr__(self, name, img)


# -- descriptors ------------------------------------------------------------------
@dataclass(frozen=True)
class DescriptorEmbedding:
    vector: Tensor
    kind: str  # "style" or "subject"


def _patches(image: Tensor, patch: int) -> Tensor:
    """``C x H x W`` (or ``N x C x H x W``) -> ``[N x] n_patches x C x patch**2``."""
    *lead, c, h, w = image.shape
    if h % patch or w % patch:
        raise ContractError(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = image.reshape(*lead, c, hp, patch, wp, patch)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return x.reshape(*lead, hp * wp, c, patch * patch)


def _unit(x: Tensor) -> Tensor:
    scale = np.max(np.abs(x.data), axis=-1, keepdims=True)
    if np.any(scale == 0.0):
        raise ContractError("descriptor produced a zero vector")
    # rescaling first keeps the squared norm from underflowing; the result is scale-invariant
    x = x * Tensor(1.0 / scale)
    return x / ad.sqrt((x * x).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class StyleProfile:
    name: str = "gram"
    patch: int = 4
    texture_gain: float = 6.0


@dataclass(frozen=True)
class SubjectProfile:
    name: str = "layout"
    patch: int = 4
    d_desc: int = 80
    seed: int = 0xD1_0000
    bias_scale: float = 1.0
    softness: float = 1e-6


class StyleDescriptor:
    """Patch-averaged Gram of raw and high-passed channels, upper triangle, unit norm."""

    kind = "style"

    def __init__(self, profile: StyleProfile = StyleProfile()):
        self.profile = profile
        self.name = profile.name

    def dim(self, channels: int = 3) -> int:
        f = 2 * channels
        return f * (f + 1) // 2

    def embed(self, image: Tensor) -> Tensor:
        p = self.profile
        x = _patches(image, p.patch)
        hp = (x - x.mean(axis=-1, keepdims=True)) * p.texture_gain
        feats = ad.concat([x, hp], axis=-2)  # [N x] nP x 2C x P^2
        gram = ad.matmul(feats, feats.swap_last()) * (1.0 / (p.patch * p.patch))
        gram = gram.mean(axis=-3)
        f = gram.shape[-1]
        iu = np.triu_indices(f)
        flat = gram.reshape(*gram.shape[:-2], f * f)[..., iu[0] * f + iu[1]]
        return _unit(flat)

    def __call__(self, image) -> DescriptorEmbedding:
        return DescriptorEmbedding(self.embed(ad._as_tensor(image)), self.kind)


class SubjectDescriptor:
    """Mean-centred patch pooling in raster order, frozen affine map, unit norm.

    Pooled channel vectors are reduced to their squared norm per patch, so
    a shape reads the same whether it is darker or brighter than its
    background.  The energy map is centred over patches, its soft positive
    part kept and scaled to unit length.  The affine map is an isometry plus
    a bias orthogonal to its range, so the embedding is exactly affine in the
    unit layout map and any two embeddings have cosine at least
    ``bias_scale**2 / (bias_scale**2 + 1)``.
    """

    kind = "subject"

    def __init__(self, profile: SubjectProfile = SubjectProfile()):
        self.profile = profile
        self.name = profile.name

    def dim(self, channels: int = 3) -> int:
        return self.profile.d_desc

    def frozen_map(self, n_in: int):
        return _subject_map(n_in, self.profile.d_desc, self.profile.seed, self.profile.bias_scale)

    def pooled(self, image: Tensor) -> Tensor:
        """Unit-norm, nonnegative map of per-patch contrast energy, raster order."""
        p = self.profile.patch
        centred = image - image.mean(axis=(-2, -1), keepdims=True)
        x = _patches(centred, p).mean(axis=-1)  # [N x] nP x C
        energy = (x * x).sum(axis=-1)
        energy = energy - energy.mean(axis=-1, keepdims=True)
        positive = (energy + ad.sqrt(energy * energy + self.profile.softness)) * 0.5
        return positive / ad.sqrt((positive * positive).sum(axis=-1, keepdims=True))

    def embed(self, image: Tensor) -> Tensor:
        feats = self.pooled(image)
        w, b = self.frozen_map(feats.shape[-1])
        return _unit(ad.matmul(feats.reshape(*feats.shape[:-1], 1, feats.shape[-1]), w).reshape(
            *feats.shape[:-1], w.shape[-1]) + b)

    def __call__(self, image) -> DescriptorEmbedding:
        return DescriptorEmbedding(self.embed(ad._as_tensor(image)), self.kind)


@functools.lru_cache(maxsize=32)
def _subject_map(n_in: int, d_desc: int, seed: int, bias_scale: float):
    """Orthonormal-row ``n_in x d_desc`` map and a bias of norm ``bias_scale`` orthogonal to its rows."""
    if d_desc <= n_in:
        raise ContractError(f"subject descriptor needs d_desc > {n_in} patches, got {d_desc}")
    rng = Rng(derive_seed(seed, n_in, d_desc))
    q, _ = np.linalg.qr(rng.normal((d_desc, n_in + 1)))
    return Tensor(q[:, :n_in].T.copy()), Tensor(q[:, n_in] * bias_scale)


STYLE_PROFILES = {"gram": StyleProfile()}
SUBJECT_PROFILES = {
    "layout": SubjectProfile(),
    # second registered subject profile, standing in for a facial descriptor
    "face": SubjectProfile(name="face", patch=8, seed=0xFACE_0000),
}


def get_descriptor(kind: str, name: str | None = None):
    if kind == "style":
        return StyleDescriptor(STYLE_PROFILES[name or "gram"])
    if kind == "subject":
        return SubjectDescriptor(SUBJECT_PROFILES[name or "layout"])
    raise ContractError(f"unknown descriptor kind {kind!r}")


def style_descriptor(image) -> DescriptorEmbedding:
    return StyleDescriptor()(image)


def subject_descriptor(image) -> DescriptorEmbedding:
    return SubjectDescriptor()(image)


# -- projectors ---------------------------------------------------------------------
@dataclass
class ProjectorWeights:
    """Descriptor -> pseudo-token MLP plus per-block key/value matrices.

    The final MLP layer starts at zero so an untrained projector emits zero
    tokens and the conditioned model behaves like the text-only one.
    """

    kind: str
    d_desc: int
    n_tok: int
    d_cond: int
    d_attn: int
    blocks: int
    params: dict = field(default_factory=dict)

    @property
    def descriptor_kind(self) -> str:
        return "style" if self.kind == "style" else "subject"

    def kv(self, block: int):
        return self.params[f"k{block}"], self.params[f"v{block}"]

    def with_params(self, params: dict) -> "ProjectorWeights":
        return ProjectorWeights(self.kind, self.d_desc, self.n_tok, self.d_cond, self.d_attn, self.blocks, dict(params))

    def frozen(self) -> "ProjectorWeights":
        return self.with_params({k: Tensor(v.data) for k, v in self.params.items()})

    def trainable(self) -> "ProjectorWeights":
        return self.with_params({k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})


def init_projector(kind: str, d_desc: int, *, n_tok: int = 4, d_cond: int = 32, d_attn: int = 32,
                   hidden: int = 64, blocks: int = 4, seed: int = 0) -> ProjectorWeights:
    if kind not in ("style", "object"):
        raise ContractError(f"projector kind must be 'style' or 'object', got {kind!r}")
    rng = Rng(derive_seed(seed, 0x9807, 1 if kind == "style" else 2))
    params = {
        "w1": Tensor(rng.normal((d_desc, hidden)) / math.sqrt(d_desc)),
        "b1": Tensor(np.zeros(hidden)),
        "w2": Tensor(np.zeros((hidden, n_tok * d_cond))),
        "b2": Tensor(np.zeros(n_tok * d_cond)),
    }
    for b in range(blocks):
        params[f"k{b}"] = Tensor(rng.normal((d_cond, d_attn)) / math.sqrt(d_cond))
        params[f"v{b}"] = Tensor(rng.normal((d_cond, d_attn)) / math.sqrt(d_cond))
    return ProjectorWeights(kind, d_desc, n_tok, d_cond, d_attn, blocks, params)


def project_condition(embedding, weights: ProjectorWeights) -> Tensor:
    """Map a descriptor embedding (``[N x] d_desc``) to ``[N x] n_tok x d_cond`` tokens."""
    if isinstance(embedding, DescriptorEmbedding):
        if embedding.kind != weights.descriptor_kind:
            raise ContractError(f"{embedding.kind} embedding fed to a {weights.kind} projector")
        vec = embedding.vector
    else:
        vec = ad._as_tensor(embedding)
    if vec.shape[-1] != weights.d_desc:
        raise ContractError(f"embedding dim {vec.shape[-1]} != projector input {weights.d_desc}")
    p = weights.params
    lead = vec.shape[:-1]
    x = vec.reshape(*lead, 1, weights.d_desc)
    h = ad.silu(ad.linear(x, p["w1"], p["b1"]))
    out = ad.linear(h, p["w2"], p["b2"])
    return out.reshape(*lead, weights.n_tok, weights.d_cond)
