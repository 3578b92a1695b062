"""Fixed inputs shared by the golden tests and the script that records them."""

import dataclasses

import numpy as np

from latentctl.autodiff import Tensor
from latentctl.conditioning import ReferencePair, embed_text, init_projector
from latentctl.controller import GenerationSetup
from latentctl.denoiser import AggregationState, ConditioningBundle, Decoder, init_denoiser
from latentctl.io import ControllerConfig
from latentctl.rng import Rng
from latentctl.schedule import make_schedule
from latentctl.training import render


def golden_case():
    weights = init_denoiser(seed=0)
    rng = Rng(0x601D)
    style = init_projector("style", 21, seed=1)
    style = style.with_params({**style.params, "w2": Tensor(rng.normal(style.params["w2"].shape) * 0.2)})
    subject = init_projector("object", 80, seed=2)
    subject = subject.with_params({**subject.params, "w2": Tensor(rng.normal(subject.params["w2"].shape) * 0.2)})
    bundle = ConditioningBundle(embed_text("mint stripes disc upperleft").embeddings,
                                Tensor(rng.normal((4, 32))), Tensor(rng.normal((4, 32))), style, subject)
    x = Tensor(rng.normal((4, 16, 16)))
    return x, 5, bundle, AggregationState.initial(), weights, 8


def small_setup(mode="first-order", *, T=4, seed=0, zero_conditioning=False, projectors=True, **controller):
    """A fast generation on an untrained 8x8 backbone with the linear decoder (16x16 images)."""
    weights = init_denoiser(seed=3, height=8, width=8, zero_conditioning=zero_conditioning)
    refs = ReferencePair(render("plain", "flat", "square", "upperleft")[:, ::2, ::2],
                         render("night", "stripes", "disc", "lowerleft")[:, ::2, ::2])
    style = obj = None
    if projectors:
        rng = Rng(0x5E7)
        style = init_projector("style", 21, seed=1)
        style = style.with_params({**style.params, "w2": Tensor(rng.normal(style.params["w2"].shape) * 0.1)})
        obj = init_projector("object", 80, seed=2)
        obj = obj.with_params({**obj.params, "w2": Tensor(rng.normal(obj.params["w2"].shape) * 0.1)})
    cfg = dataclasses.replace(ControllerConfig(mode=mode), **controller)
    if mode == "off":
        cfg = dataclasses.replace(cfg, M=0)
    return GenerationSetup(weights, make_schedule("cosine", T), refs, "null null square upperleft", Decoder(),
                           style, obj, cfg, seed=seed)


if __name__ == "__main__":
    from latentctl.controller import run_generation
    from latentctl.denoiser import denoise

    x, t, bundle, state, weights, T = golden_case()
    np.save("tests/data/denoise_golden.npy", denoise(x, t, bundle, state, weights, T).data)
    off = run_generation(small_setup("off", zero_conditioning=True, projectors=False))
    np.save("tests/data/generation_off_golden.npy", off.image)
