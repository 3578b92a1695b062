"""Cross-attention noise predictor with orthogonal temporal aggregation, and the toy decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import ProjectorWeights
from .errors import ContractError, ShapeError
from .rng import Rng, derive_seed

REJECTION_MODES = ("reject", "project", "none")
UPDATE_SOURCES = ("L_nc", "L_ns")


# -- aggregation primitives ----------------------------------------------------
def cross_attention(queries: Tensor, kv: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Scaled dot-product attention of projected queries over one conditioning stream."""
    if queries.shape[-1] != w_k.shape[-1] or kv.shape[-1] != w_k.shape[0] or w_k.shape != w_v.shape:
        raise ShapeError(f"attention shapes disagree: q {queries.shape}, kv {kv.shape}, w_k {w_k.shape}")
    k = ad.linear(kv, w_k)
    v = ad.linear(kv, w_v)
    scores = ad.matmul(queries, k.swap_last()) * (1.0 / math.sqrt(queries.shape[-1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def orthogonal_reject(f_sub: Tensor, f_text: Tensor, eps_den: float = 1e-12, mode: str = "reject") -> Tensor:
    """Per-token removal of the component of ``f_sub`` along ``f_text``.

    ``mode="project"`` keeps only the parallel component instead (ablation);
    ``mode="none"`` returns ``f_sub`` untouched.
    """
    if f_sub.shape != f_text.shape:
        raise ShapeError(f"feature shapes differ: {f_sub.shape} vs {f_text.shape}")
    if mode == "none":
        return f_sub
    dot = (f_sub * f_text).sum(axis=-1, keepdims=True)
    den = np.maximum((f_text.data * f_text.data).sum(axis=-1, keepdims=True), eps_den)
    # the clamp only matters for zero text features, where the numerator is zero too
    tt = (f_text * f_text).sum(axis=-1, keepdims=True)
    den_t = tt + Tensor(den - tt.data)
    parallel = (dot / den_t) * f_text
    if mode == "reject":
        return f_sub - parallel
    if mode == "project":
        return parallel
    raise ContractError(f"unknown rejection mode {mode!r}")


@dataclass
class AggregationState:
    mu_s: float = 0.6
    mu_c: float = 0.5
    zeta: float = 0.4
    mu_cap: float = 1.5
    mu_s0: float = 0.6
    rejection: str = "reject"
    update_source: str = "L_nc"

    @classmethod
    def initial(cls, **kw) -> "AggregationState":
        st = cls(**kw)
        if "mu_s" not in kw:
            st.mu_s = st.mu_s0
        return st

    def copy(self, **changes) -> "AggregationState":
        return AggregationState(**{**self.__dict__, **changes})


def aggregate_ota(f_text: Tensor, f_style, f_sub_hat, state: AggregationState) -> Tensor:
    out = f_text
    if f_style is not None:
        out = out + state.mu_s * f_style
    if f_sub_hat is not None:
        out = out + state.mu_c * f_sub_hat
    return out


def update_style_weight(state: AggregationState, L_s: float, L_nc: float) -> AggregationState:
    """``mu_s <- min(mu_s + zeta * L_s * (1 - L_nc), cap)``; returns a new state."""
    mu = min(state.mu_s + state.zeta * L_s * (1.0 - L_nc), state.mu_cap)
    return state.copy(mu_s=mu)


# -- network weights ------------------------------------------------------------
@dataclass
class DenoiserWeights:
    channels: int = 4
    height: int = 16
    width: int = 16
    d_attn: int = 32
    d_cond: int = 32
    blocks: int = 4
    hidden: int = 64
    params: dict = field(default_factory=dict)

    @property
    def n_q(self) -> int:
        return self.height * self.width

    def with_params(self, params) -> "DenoiserWeights":
        return DenoiserWeights(self.channels, self.height, self.width, self.d_attn, self.d_cond,
                               self.blocks, self.hidden, dict(params))

    def frozen(self) -> "DenoiserWeights":
        return self.with_params({k: Tensor(v.data) for k, v in self.params.items()})

    def trainable(self) -> "DenoiserWeights":
        return self.with_params({k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


def init_denoiser(seed: int = 0, *, channels=4, height=16, width=16, d_attn=32, d_cond=32,
                  blocks=4, hidden=64, zero_conditioning: bool = False) -> DenoiserWeights:
    rng = Rng(derive_seed(seed, 0xDE0))
    d = d_attn

    def dense(n_in, n_out, scale=1.0):
        return Tensor(rng.normal((n_in, n_out)) * (scale / math.sqrt(n_in)))

    p = {
        "in_w": dense(channels, d),
        "in_b": Tensor(np.zeros(d)),
        "time_w": dense(d, d, 0.5),
        "out_g": Tensor(np.ones(d)),
        "out_w": dense(d, channels, 0.1),
        "out_b": Tensor(np.zeros(channels)),
    }
    for b in range(blocks):
        p[f"b{b}.g1"] = Tensor(np.ones(d))
        p[f"b{b}.q"] = dense(d, d)
        p[f"b{b}.k"] = dense(d_cond, d)
        p[f"b{b}.v"] = Tensor(np.zeros((d_cond, d))) if zero_conditioning else dense(d_cond, d)
        p[f"b{b}.o"] = dense(d, d, 0.5)
        p[f"b{b}.g2"] = Tensor(np.ones(d))
        p[f"b{b}.m1"] = dense(d, hidden)
        p[f"b{b}.mb1"] = Tensor(np.zeros(hidden))
        p[f"b{b}.m2"] = dense(hidden, d, 0.5)
        p[f"b{b}.mb2"] = Tensor(np.zeros(d))
    return DenoiserWeights(channels, height, width, d_attn, d_cond, blocks, hidden, p)


def timestep_embedding(t: float, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of ``t`` rescaled to a 0..1000 clock."""
    half = dim // 2
    tt = 1000.0 * t / T
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(tt * freqs), np.cos(tt * freqs)])


def position_embedding(height: int, width: int, dim: int) -> np.ndarray:
    """Fixed 2D sinusoidal table, ``height*width x dim``, raster order."""
    quarter = dim // 4
    freqs = np.exp(-math.log(100.0) * np.arange(quarter) / quarter) * math.pi
    ys, xs = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    ys, xs = ys.ravel()[:, None], xs.ravel()[:, None]
    return np.concatenate([np.sin(ys * freqs), np.cos(ys * freqs), np.sin(xs * freqs), np.cos(xs * freqs)], axis=1)


def _rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    return ad.rms_norm(x, gain, 1e-6)


@dataclass
class ConditioningBundle:
    """Text tokens plus optional style/subject pseudo-tokens and their projectors."""

    text: Tensor  # [N x] L x d_cond
    style: Tensor | None = None  # [N x] n_tok x d_cond
    subject: Tensor | None = None
    style_proj: ProjectorWeights | None = None
    subject_proj: ProjectorWeights | None = None


@dataclass
class AttentionFeatures:
    block: int
    f_text: np.ndarray
    f_style: np.ndarray | None
    f_sub: np.ndarray | None
    f_sub_hat: np.ndarray | None
    f_agg: np.ndarray


def denoise(x_t, t: int, bundle: ConditioningBundle, state: AggregationState, weights: DenoiserWeights,
            T: int, trace: list | None = None) -> Tensor:
    """Predict the noise in ``x_t`` (``C x H x W`` or ``N x C x H x W``)."""
    x_t = ad._as_tensor(x_t)
    w = weights.params
    c, h, wd = weights.channels, weights.height, weights.width
    if x_t.shape[-3:] != (c, h, wd):
        raise ShapeError(f"latent {x_t.shape} does not match denoiser ({c}, {h}, {wd})")
    lead = x_t.shape[:-3]
    d = weights.d_attn
    tokens = x_t.reshape(*lead, c, h * wd).swap_last()  # [N x] n_q x C
    temb = Tensor(timestep_embedding(t, d, T)[None, :])
    hdn = ad.linear(tokens, w["in_w"], w["in_b"]) + Tensor(position_embedding(h, wd, d)) \
        + ad.linear(temb, w["time_w"])
    for b in range(weights.blocks):
        n = _rms_norm(hdn, w[f"b{b}.g1"])
        q = ad.linear(n, w[f"b{b}.q"])
        f_text = cross_attention(q, bundle.text, w[f"b{b}.k"], w[f"b{b}.v"])
        f_style = f_sub = f_hat = None
        if bundle.style is not None and bundle.style_proj is not None:
            f_style = cross_attention(q, bundle.style, *bundle.style_proj.kv(b))
        if bundle.subject is not None and bundle.subject_proj is not None:
            f_sub = cross_attention(q, bundle.subject, *bundle.subject_proj.kv(b))
            f_hat = orthogonal_reject(f_sub, f_text, mode=state.rejection)
        f_agg = aggregate_ota(f_text, f_style, f_hat, state)
        if trace is not None:
            trace.append(AttentionFeatures(
                b, f_text.data, None if f_style is None else f_style.data,
                None if f_sub is None else f_sub.data, None if f_hat is None else f_hat.data, f_agg.data))
        hdn = hdn + ad.linear(f_agg, w[f"b{b}.o"])
        n2 = _rms_norm(hdn, w[f"b{b}.g2"])
        mlp = ad.linear(ad.silu(ad.linear(n2, w[f"b{b}.m1"], w[f"b{b}.mb1"])), w[f"b{b}.m2"], w[f"b{b}.mb2"])
        hdn = hdn + mlp
    out = ad.linear(_rms_norm(hdn, w["out_g"]), w["out_w"], w["out_b"])
    return out.swap_last().reshape(*lead, c, h, wd)


# -- decoder ---------------------------------------------------------------------------
@dataclass
class Decoder:
    """Channel mix, nearest upsample, sigmoid.  ``profile="identity"`` crops latent channels instead."""

    profile: str = "linear"
    weight: np.ndarray = field(default_factory=lambda: default_decoder_weight())
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    factor: int = 2

    def out_shape(self, latent_shape):
        c, h, w = latent_shape[-3:]
        if self.profile == "identity":
            return (3, h, w)
        return (3, h * self.factor, w * self.factor)

    def check(self, latent_shape):
        if self.profile == "identity":
            if latent_shape[-3] < 3:
                raise ShapeError("identity decoder needs at least 3 latent channels")
        elif latent_shape[-3] != self.weight.shape[1]:
            raise ShapeError(f"latent has {latent_shape[-3]} channels, decoder expects {self.weight.shape[1]}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Least-squares inverse of :meth:`decode` (up to the 2x pooling)."""
        img = np.asarray(image, dtype=np.float64)
        if self.profile == "identity":
            c = 4 if self.weight is None else self.weight.shape[1]
            z = np.zeros(img.shape[:-3] + (c,) + img.shape[-2:])
            z[..., :3, :, :] = img
            return z
        f = self.factor
        *lead, ch, h, w = img.shape
        pooled = img.reshape(*lead, ch, h // f, f, w // f, f).mean(axis=(-3, -1))
        pooled = np.clip(pooled, 1e-3, 1 - 1e-3)
        logits = np.log(pooled / (1.0 - pooled)) - self.bias[:, None, None]
        pinv = np.linalg.pinv(self.weight)
        return np.einsum("cj,...jhw->...chw", pinv, logits)


def default_decoder_weight() -> np.ndarray:
    return 2.0 * np.array([[1.0, 0.0, 0.0, 0.3], [0.0, 1.0, 0.0, 0.3], [0.0, 0.0, 1.0, 0.3]])


def decode(x0, decoder: Decoder) -> Tensor:
    x0 = ad._as_tensor(x0)
    decoder.check(x0.shape)
    if decoder.profile == "identity":
        return x0[..., :3, :, :]
    *lead, c, h, w = x0.shape
    mixed = ad.matmul(Tensor(decoder.weight), x0.reshape(*lead, c, h * w)).reshape(*lead, 3, h, w)
    mixed = mixed + Tensor(decoder.bias[:, None, None])
    return ad.sigmoid(ad.upsample_nearest(mixed, decoder.factor))
