"""Synthetic corpus, toy backbone pretraining and projector training.

Images are built on an 8x8 grid of 4-pixel cells so shapes never split a
descriptor patch.  Style lives in the palette and an additive period-4
texture; content lives in the shape mask and its position.  Because each
4x4 patch holds exactly one texture period, texture phase changes neither
descriptor.  Phases are kept even so the 2x latent pooling preserves the
texture.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import (ProjectorWeights, embed_text, get_descriptor, init_projector, project_condition,
                           text_table, TEXT_SEED, fnv1a64)
from .denoiser import AggregationState, ConditioningBundle, Decoder, DenoiserWeights, decode, denoise, init_denoiser
from .errors import ContractError, NonFiniteError
from .optim import AdamState, adam_step
from .rng import Rng, derive_seed
from .schedule import NoiseSchedule, add_noise, make_schedule, predict_x0

IMAGE_SIZE = 32
CELL = 4

PALETTES = {
    "cream": ((0.85, 0.80, 0.60), (0.20, 0.30, 0.75)),
    "night": ((0.15, 0.18, 0.30), (0.95, 0.65, 0.20)),
    "mint": ((0.60, 0.88, 0.62), (0.75, 0.15, 0.30)),
    "rose": ((0.85, 0.50, 0.80), (0.15, 0.55, 0.30)),
    "plain": ((0.50, 0.50, 0.50), (0.92, 0.92, 0.92)),
}
STYLE_PALETTES = ("cream", "night", "mint", "rose")
# (spatial pattern, per-channel modulation)
TEXTURES = {
    "stripes": ("rows", (1.0, 1.0, 1.0)),
    "checks": ("checker", (1.0, 0.0, -1.0)),
    "flat": ("none", (0.0, 0.0, 0.0)),
}
STYLE_TEXTURES = ("stripes", "checks")
TEXTURE_AMPLITUDE = 0.25
SHAPES = ("square", "disc", "cross", "triangle")
POSITIONS = {"upperleft": (2.5, 2.5), "lowerright": (5.5, 5.5), "upperright": (2.5, 5.5), "lowerleft": (5.5, 2.5)}
CONTENT_POSITIONS = ("upperleft", "lowerright")
# positions reserved for the objects drawn inside benchmark style references
STYLE_OBJECT_POSITIONS = ("upperright", "lowerleft")


def shape_mask(shape: str, position: str) -> np.ndarray:
    """Boolean 8x8 cell mask."""
    cy, cx = POSITIONS[position]
    yy, xx = np.mgrid[0:8, 0:8] + 0.5
    dy, dx = yy - cy - 0.5, xx - cx - 0.5
    if shape == "square":
        m = (np.abs(dy) <= 1.5) & (np.abs(dx) <= 1.5)
    elif shape == "disc":
        m = dy**2 + dx**2 <= 2.0**2
    elif shape == "cross":
        m = ((np.abs(dy) <= 0.5) & (np.abs(dx) <= 2.5)) | ((np.abs(dx) <= 0.5) & (np.abs(dy) <= 2.5))
    elif shape == "triangle":
        m = (dy >= -2.5) & (dy <= 1.5) & (np.abs(dx) <= (dy + 2.5) * 0.75 + 0.25)
    else:
        raise ContractError(f"unknown shape {shape!r}")
    return m


def texture_pattern(kind: str, phase: int = 0) -> np.ndarray:
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if kind == "rows":
        return np.where(((y + phase) % 4) < 2, 1.0, -1.0)
    if kind == "checker":
        return np.where((((y + phase) % 4) < 2) ^ (((x + phase) % 4) < 2), 1.0, -1.0)
    return np.zeros((IMAGE_SIZE, IMAGE_SIZE))


def render(palette: str, texture: str, shape: str, position: str, phase: int = 0) -> np.ndarray:
    bg, fg = (np.array(c)[:, None, None] for c in PALETTES[palette])
    mask = np.kron(shape_mask(shape, position), np.ones((CELL, CELL))).astype(bool)
    img = np.where(mask[None], fg, bg)
    kind, chan = TEXTURES[texture]
    # multiplicative, so the texture carries the palette's colours
    img = img * (1.0 + TEXTURE_AMPLITUDE * np.array(chan)[:, None, None] * texture_pattern(kind, phase)[None])
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    palette: str
    texture: str
    shape: str
    position: str
    phase: int = 0

    @property
    def style_id(self) -> str:
        return f"{self.palette}-{self.texture}"

    @property
    def content_id(self) -> str:
        return f"{self.shape}-{self.position}"

    @property
    def caption(self) -> str:
        return f"{self.palette} {self.texture} {self.shape} {self.position}"


def sample(palette, texture, shape, position, phase=0) -> SyntheticSample:
    return SyntheticSample(render(palette, texture, shape, position, phase), palette, texture, shape, position, phase)


def style_families():
    return [(p, t) for p in STYLE_PALETTES for t in STYLE_TEXTURES]


def content_families():
    return [(s, p) for s in SHAPES for p in CONTENT_POSITIONS]


def gen_synthetic_dataset(n: int, seed: int = 0) -> list[SyntheticSample]:
    """``n`` samples drawn uniformly over the style x content grid, random texture phase."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = Rng(derive_seed(seed, 0xDA7A))
    styles, contents = style_families(), content_families()
    out = []
    for _ in range(n):
        pal, tex = styles[rng.integers(len(styles))]
        shp, pos = contents[rng.integers(len(contents))]
        out.append(sample(pal, tex, shp, pos, phase=2 * int(rng.integers(2))))
    return out


# -- losses ------------------------------------------------------------------------------
def denoising_loss(eps_hat, eps) -> Tensor:
    eps_hat, eps = ad._as_tensor(eps_hat), ad._as_tensor(eps)
    if eps_hat.shape != eps.shape:
        raise ContractError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    return ad.sq_l2_distance(eps_hat, eps) * (1.0 / eps.size)


def descriptor_loss(y_hat, y, descriptor) -> Tensor:
    """Squared distance between descriptor embeddings; batched inputs give the batch mean."""
    return _embedding_loss(descriptor.embed(ad._as_tensor(y_hat)), descriptor.embed(ad._as_tensor(y)))


def _embedding_loss(a: Tensor, b: Tensor) -> Tensor:
    return ad.sq_l2_distance(a, b) * (1.0 / (a.size // a.shape[-1]))


# -- shared pieces ----------------------------------------------------------------------------
PAD = "null"
CAPTION_SLOTS = 4


def caption_tokens(sample_: SyntheticSample, drop: tuple = ()) -> list[str]:
    words = [sample_.palette, sample_.texture, sample_.shape, sample_.position]
    return [PAD if i in drop else w for i, w in enumerate(words)]


def text_batch(token_lists, d_cond: int = 32) -> Tensor:
    return Tensor(np.stack([embed_text(" ".join(toks), d_cond=d_cond).embeddings.data for toks in token_lists]))


@dataclass
class TrainingHyper:
    gamma: float = 0.3
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    t_range: tuple = (1, 8)
    log_every: int = 1

    def validate(self):
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.batch < 1 or self.steps < 0:
            raise ContractError("batch must be >= 1 and steps >= 0")
        return self


@dataclass
class LossRecord:
    step: int
    denoising: float
    descriptor: float
    final: float


@dataclass
class TrainResult:
    weights: object
    history: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l_denoising", "l_descriptor", "l_final"])
            for r in self.history:
                w.writerow([r.step, repr(r.denoising), repr(r.descriptor), repr(r.final)])


def _latents(samples, decoder: Decoder) -> np.ndarray:
    return decoder.encode(np.stack([s.image for s in samples]))


# -- backbone ------------------------------------------------------------------------------------
def pretrain_toy_denoiser(dataset, hyper: TrainingHyper, *, sched: NoiseSchedule | None = None,
                          decoder: Decoder | None = None, init: DenoiserWeights | None = None,
                          caption_dropout: float = 0.3) -> TrainResult:
    """Fit the text-conditioned noise predictor on encoded corpus latents.

    Caption words are independently replaced by the pad token with
    probability ``caption_dropout`` so the backbone also works from partial
    prompts, which is how projector training and generation call it.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    hyper.validate()
    sched = sched or make_schedule("cosine", hyper.t_range[1])
    decoder = decoder or Decoder()
    weights = (init or init_denoiser(hyper.seed)).trainable()
    gen = Rng(derive_seed(hyper.seed, 0x7A1)).numpy_generator()
    x0_all = _latents(dataset, decoder)
    state = AggregationState.initial()
    adam = AdamState()
    history = []
    lo, hi = hyper.t_range
    for step in range(hyper.steps):
        idx = gen.integers(len(dataset), size=hyper.batch)
        t = int(gen.integers(lo, hi + 1))
        eps = gen.standard_normal((hyper.batch,) + x0_all.shape[1:])
        x_t = add_noise(x0_all[idx], eps, t, sched)
        drops = [tuple(i for i in range(CAPTION_SLOTS) if gen.random() < caption_dropout) for _ in idx]
        text = text_batch([caption_tokens(dataset[i], d) for i, d in zip(idx, drops)], weights.d_cond)
        eps_hat = denoise(x_t, t, ConditioningBundle(text), state, weights, sched.T)
        loss = denoising_loss(eps_hat, eps)
        if not np.isfinite(loss.item()):
            raise NonFiniteError("denoiser loss diverged", step=step)
        grads = ad.backward(loss, wrt=weights.params.values())
        new, adam = adam_step(weights.params, grads, adam, hyper.lr)
        weights = weights.with_params(new)
        if step % hyper.log_every == 0:
            history.append(LossRecord(step, loss.item(), 0.0, loss.item()))
    return TrainResult(weights.frozen(), history)


def heldout_denoising_loss(weights: DenoiserWeights, dataset, sched: NoiseSchedule, decoder: Decoder | None = None,
                           seed: int = 1234, zero_prediction: bool = False) -> float:
    decoder = decoder or Decoder()
    gen = np.random.default_rng(seed)
    x0 = _latents(dataset, decoder)
    total = []
    with ad.no_grad():
        for i, s in enumerate(dataset):
            t = int(gen.integers(1, sched.T + 1))
            eps = gen.standard_normal(x0.shape[1:])
            if zero_prediction:
                eps_hat = np.zeros_like(eps)
            else:
                x_t = add_noise(x0[i], eps, t, sched)
                text = embed_text(" ".join(caption_tokens(s)), d_cond=weights.d_cond).embeddings
                eps_hat = denoise(x_t, t, ConditioningBundle(text), AggregationState.initial(), weights, sched.T).data
            total.append(np.mean((eps_hat - eps) ** 2))
    return float(np.mean(total))


# -- projectors ------------------------------------------------------------------------------------
def _projector_drop(kind: str) -> tuple:
    # the projector supplies the factor its descriptor measures, so the prompt omits it
    return (0, 1) if kind == "style" else (2, 3)


def _projector_bundle(kind, text, tokens, proj):
    if kind == "style":
        return ConditioningBundle(text, style=tokens, style_proj=proj)
    return ConditioningBundle(text, subject=tokens, subject_proj=proj)


TRAIN_STATE = AggregationState(mu_s=1.0, mu_c=1.0, zeta=0.0, mu_cap=1.0, mu_s0=1.0)


@dataclass
class ProjectorInputs:
    """Per-sample arrays that stay fixed while a projector trains: latents, prompt embeddings, descriptors."""

    x0: np.ndarray
    text: np.ndarray
    emb: np.ndarray

    def __len__(self) -> int:
        return len(self.x0)

    def take(self, idx) -> "ProjectorInputs":
        return ProjectorInputs(self.x0[idx], self.text[idx], self.emb[idx])


def prepare_projector_inputs(kind: str, samples, decoder: Decoder, descriptor, d_cond: int) -> ProjectorInputs:
    images = np.stack([s.image for s in samples])
    text = text_batch([caption_tokens(s, _projector_drop(kind)) for s in samples], d_cond).data
    with ad.no_grad():
        emb = descriptor.embed(Tensor(images)).data
    return ProjectorInputs(decoder.encode(images), text, emb)


def projector_losses(kind: str, proj: ProjectorWeights, denoiser: DenoiserWeights, samples, t: int,
                     eps: np.ndarray, sched: NoiseSchedule, decoder: Decoder, gamma: float,
                     x0_mode: str = "ddim-standard", descriptor=None):
    """(l_final, l_denoising, l_descriptor) for one batch at one timestep.

    ``samples`` is a list of corpus samples or a prepared :class:`ProjectorInputs`.
    """
    descriptor = descriptor or get_descriptor("style" if kind == "style" else "subject")
    if not isinstance(samples, ProjectorInputs):
        samples = prepare_projector_inputs(kind, samples, decoder, descriptor, denoiser.d_cond)
    x_t = add_noise(samples.x0, eps, t, sched)
    target = Tensor(samples.emb)
    tokens = project_condition(target, proj)
    eps_hat = denoise(x_t, t, _projector_bundle(kind, Tensor(samples.text), tokens, proj), TRAIN_STATE,
                      denoiser, sched.T)
    l_den = denoising_loss(eps_hat, eps)
    if gamma == 0.0:
        # logged only, so keep it off the tape
        with ad.no_grad():
            y_hat = decode(predict_x0(x_t, eps_hat, t, sched, x0_mode), decoder)
            l_desc = _embedding_loss(descriptor.embed(y_hat), target)
        return l_den, l_den, l_desc
    y_hat = decode(predict_x0(x_t, eps_hat, t, sched, x0_mode), decoder)
    l_desc = _embedding_loss(descriptor.embed(y_hat), target)
    return l_den + gamma * l_desc, l_den, l_desc


def train_projector(kind: str, dataset, denoiser: DenoiserWeights, hyper: TrainingHyper, *,
                    sched: NoiseSchedule | None = None, decoder: Decoder | None = None,
                    init: ProjectorWeights | None = None, x0_mode: str = "ddim-standard") -> TrainResult:
    """Adam on projector parameters only; the backbone is consumed frozen."""
    if kind not in ("style", "object"):
        raise ContractError(f"kind must be style or object, got {kind!r}")
    if not dataset:
        raise ContractError("dataset is empty")
    hyper.validate()
    if any(p.requires_grad for p in denoiser.params.values()):
        raise ContractError("backbone weights must be frozen during projector training")
    sched = sched or make_schedule("cosine", hyper.t_range[1])
    decoder = decoder or Decoder()
    descriptor = get_descriptor("style" if kind == "style" else "subject")
    proj = (init or init_projector(kind, descriptor.dim(), d_cond=denoiser.d_cond, d_attn=denoiser.d_attn,
                                   blocks=denoiser.blocks, seed=hyper.seed)).trainable()
    inputs = prepare_projector_inputs(kind, dataset, decoder, descriptor, denoiser.d_cond)
    gen = Rng(derive_seed(hyper.seed, 0x9A0)).numpy_generator()
    adam = AdamState()
    history = []
    lo, hi = hyper.t_range
    for step in range(hyper.steps):
        idx = gen.integers(len(dataset), size=hyper.batch)
        t = int(gen.integers(lo, hi + 1))
        eps = gen.standard_normal((hyper.batch, denoiser.channels, denoiser.height, denoiser.width))
        l_final, l_den, l_desc = projector_losses(kind, proj, denoiser, inputs.take(idx), t, eps, sched, decoder,
                                                  hyper.gamma, x0_mode, descriptor)
        if not np.isfinite(l_final.item()):
            raise NonFiniteError("projector loss diverged", step=step)
        grads = ad.backward(l_final, wrt=proj.params.values())
        new, adam = adam_step(proj.params, grads, adam, hyper.lr)
        proj = proj.with_params(new)
        if step % hyper.log_every == 0:
            history.append(LossRecord(step, l_den.item(), l_desc.item(), l_final.item()))
    return TrainResult(proj.frozen(), history)


def heldout_descriptor_loss(kind: str, proj: ProjectorWeights, denoiser: DenoiserWeights, dataset,
                            sched: NoiseSchedule, decoder: Decoder | None = None, seed: int = 4321,
                            batch: int = 16) -> float:
    """Mean descriptor loss over a held-out set at fixed (t, eps) draws."""
    decoder = decoder or Decoder()
    gen = np.random.default_rng(seed)
    ts = gen.integers(1, sched.T + 1, size=len(dataset))
    eps = gen.standard_normal((len(dataset), denoiser.channels, denoiser.height, denoiser.width))
    descriptor = get_descriptor("style" if kind == "style" else "subject")
    inputs = prepare_projector_inputs(kind, dataset, decoder, descriptor, denoiser.d_cond)
    vals = []
    with ad.no_grad():
        for t in np.unique(ts):
            idx = np.flatnonzero(ts == t)
            for start in range(0, len(idx), batch):
                chunk = idx[start:start + batch]
                _, _, l_desc = projector_losses(kind, proj, denoiser, inputs.take(chunk), int(t), eps[chunk],
                                                sched, decoder, 0.0, descriptor=descriptor)
                vals.append(l_desc.item() * len(chunk))
    return float(np.sum(vals) / len(dataset))
