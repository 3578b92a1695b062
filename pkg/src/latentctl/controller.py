"""Latent controller: terminal cost, inner optimisation (first/zero order) and the sampling loop."""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import (ProjectorWeights, ReferencePair, embed_text, get_descriptor, project_condition)
from .denoiser import AggregationState, ConditioningBundle, Decoder, DenoiserWeights, decode, denoise, \
    update_style_weight
from .errors import ContractError, NonFiniteError
from .io import AggregationConfig, ControllerConfig, CostPairing
from .metrics import score_output
from .optim import AdamState, adam_step
from .rng import Rng, derive_seed
from .schedule import NoiseSchedule, ddim_step, predict_x0


@dataclass
class CostBreakdown:
    L_c: float
    L_s: float
    L_nc: float
    L_ns: float
    L_total: float
    gamma_nc: float = 1.0
    gamma_ns: float = 1.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class TerminalCost:
    """Four-term descriptor cost on a decoded image.

    ``pairing`` says which reference each term compares to; the default is
    subject term vs the subject reference, style term vs the style
    reference, and the two leakage terms crossed.  ``subject_weight`` and
    ``style_weight`` scale the two attraction terms (1 by default).
    """

    def __init__(self, refs: ReferencePair, psi, rho, gamma_nc: float = 1.0, gamma_ns: float = 1.0,
                 pairing: CostPairing | None = None, subject_weight: float = 1.0, style_weight: float = 1.0):
        if psi is None or rho is None:
            raise ContractError("both a style and a subject descriptor are required")
        self.psi, self.rho = psi, rho
        self.gamma_nc, self.gamma_ns = gamma_nc, gamma_ns
        self.pairing = pairing or CostPairing()
        self.subject_weight, self.style_weight = subject_weight, style_weight
        with ad.no_grad():
            self.rho_ref = {"sub": rho.embed(Tensor(refs.r_sub)), "sty": rho.embed(Tensor(refs.r_sty))}
            self.psi_ref = {"sub": psi.embed(Tensor(refs.r_sub)), "sty": psi.embed(Tensor(refs.r_sty))}

    def terms(self, y_hat: Tensor):
        p = self.pairing
        rho_y = self.rho.embed(y_hat)
        psi_y = self.psi.embed(y_hat)
        L_c = ad.sq_l2_distance(rho_y, self.rho_ref[p.L_c])
        L_s = ad.sq_l2_distance(psi_y, self.psi_ref[p.L_s])
        L_nc = ad.sq_l2_distance(rho_y, self.rho_ref[p.L_nc])
        L_ns = ad.sq_l2_distance(psi_y, self.psi_ref[p.L_ns])
        total = self.subject_weight * L_c + self.style_weight * L_s - self.gamma_nc * L_nc - self.gamma_ns * L_ns
        br = CostBreakdown(L_c.item(), L_s.item(), L_nc.item(), L_ns.item(), total.item(), self.gamma_nc,
                           self.gamma_ns)
        return total, br

    def __call__(self, y_hat: Tensor) -> Tensor:
        return self.terms(y_hat)[0]


def terminal_cost(y_hat, refs: ReferencePair, psi, rho, gamma_nc: float, gamma_ns: float,
                  pairing: CostPairing | None = None) -> CostBreakdown:
    return TerminalCost(refs, psi, rho, gamma_nc, gamma_ns, pairing).terms(ad._as_tensor(y_hat))[1]


class LatentCost:
    """Cost of a clean-latent candidate: ``terminal(decode(z))``."""

    def __init__(self, terminal: TerminalCost, decoder: Decoder):
        self.terminal, self.decoder = terminal, decoder

    def terms(self, z: Tensor):
        return self.terminal.terms(decode(z, self.decoder))

    def __call__(self, z: Tensor) -> Tensor:
        return self.terms(z)[0]


def _check_finite(value: float, what: str, step):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {what}", step=step)


def optimize_latent_fo(x0_hat, cost_fn: Callable[[Tensor], Tensor], eta: float, M: int,
                       optimizer: str = "adam", step_context=None) -> Tensor:
    """``M`` gradient steps on ``cost_fn`` from ``x0_hat`` with a fresh Adam state."""
    x0_hat = ad._as_tensor(x0_hat)
    if M == 0:
        return x0_hat
    z = Tensor(x0_hat.data, requires_grad=True)
    state = AdamState()
    for _ in range(M):
        loss = cost_fn(z)
        _check_finite(loss.item(), "cost", step_context)
        grads = ad.backward(loss, wrt=[z])
        if optimizer == "sgd":
            z = Tensor(z.data - eta * grads[z].data, requires_grad=True)
        else:
            z = adam_step({"z": z}, grads, state, eta)[0]["z"]
    return Tensor(z.data)


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def spsa_gradient(cost_fn, z, zo_eps: float, rng_seed: int) -> np.ndarray:
    """Two-point simultaneous-perturbation estimate along one Gaussian direction.

    The direction is regenerated from ``rng_seed`` instead of being kept
    between evaluations, and the tape stays off throughout.
    """
    if zo_eps <= 0:
        raise ContractError("zo_eps must be > 0")
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    with ad.no_grad():
        plus = _scalar(cost_fn(Tensor(z + zo_eps * Rng(rng_seed).normal(z.shape))))
        minus = _scalar(cost_fn(Tensor(z - zo_eps * Rng(rng_seed).normal(z.shape))))
    _check_finite(plus, "cost (+ perturbation)", None)
    _check_finite(minus, "cost (- perturbation)", None)
    scale = (plus - minus) / (2.0 * zo_eps)
    return scale * Rng(rng_seed).normal(z.shape)


def optimize_latent_zo(x0_hat, cost_fn, eta: float, M: int, zo_samples: int = 4, zo_eps: float = 1e-3,
                       seed: int = 0, optimizer: str = "adam") -> Tensor:
    """Adam driven by averaged SPSA estimates; allocates no tape nodes."""
    x0_hat = ad._as_tensor(x0_hat)
    if M == 0:
        return x0_hat
    z = Tensor(x0_hat.data)
    state = AdamState()
    with ad.no_grad():
        for step in range(M):
            g = sum(spsa_gradient(cost_fn, z, zo_eps, derive_seed(seed, step, k)) for k in range(zo_samples))
            g = g / zo_samples
            if optimizer == "sgd":
                z = Tensor(z.data - eta * g)
            else:
                z = adam_step({"z": z}, {"z": g}, state, eta, requires_grad=False)[0]["z"]
    return z


# -- generation ------------------------------------------------------------------------------
@dataclass
class GenerationSetup:
    denoiser: DenoiserWeights
    sched: NoiseSchedule
    refs: ReferencePair
    prompt: str
    decoder: Decoder = field(default_factory=Decoder)
    style_proj: ProjectorWeights | None = None
    object_proj: ProjectorWeights | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    pairing: CostPairing = field(default_factory=CostPairing)
    style_descriptor: str = "gram"
    subject_descriptor: str = "layout"
    seed: int = 0
    pair: int = 0


@dataclass
class GenerationResult:
    image: np.ndarray
    costs: list
    mu_s: list
    metrics: dict
    wall_ms: float
    tape_allocs: int
    seed: int = 0
    pair: int = 0
    config: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "config": self.config,
            "pair": self.pair,
            "seed": self.seed,
            "steps": [{**c.as_dict(), "mu_s": m} for c, m in zip(self.costs, self.mu_s)],
            "metrics": self.metrics,
            "tape_allocs": self.tape_allocs,
            "wall_ms": self.wall_ms,
        }


def deterministic_mode() -> bool:
    return os.environ.get("SUBZERO_DETERMINISTIC", "") == "1"


def build_bundle(setup: GenerationSetup, psi, rho) -> ConditioningBundle:
    text = embed_text(setup.prompt, d_cond=setup.denoiser.d_cond).embeddings
    style = subject = None
    with ad.no_grad():
        if setup.style_proj is not None:
            style = project_condition(psi(Tensor(setup.refs.r_sty)), setup.style_proj)
        if setup.object_proj is not None:
            subject = project_condition(rho(Tensor(setup.refs.r_sub)), setup.object_proj)
    return ConditioningBundle(text, style, subject, setup.style_proj, setup.object_proj)


def run_generation(setup: GenerationSetup) -> GenerationResult:
    """Controlled DDIM sampling from ``x_T`` to a decoded image."""
    cfg = setup.controller.validate()
    agg = setup.aggregation.validate()
    psi = get_descriptor("style", setup.style_descriptor)
    rho = get_descriptor("subject", setup.subject_descriptor)
    terminal = TerminalCost(setup.refs, psi, rho, cfg.gamma_nc, cfg.gamma_ns, setup.pairing)
    cost = LatentCost(terminal, setup.decoder)
    bundle = build_bundle(setup, psi, rho)
    w = setup.denoiser.frozen() if any(p.requires_grad for p in setup.denoiser.params.values()) else setup.denoiser
    state = AggregationState(mu_s=agg.mu_s0, mu_c=agg.mu_c, zeta=agg.zeta, mu_cap=agg.mu_cap, mu_s0=agg.mu_s0,
                             rejection=agg.rejection, update_source=agg.update_source)
    sched = setup.sched
    start = time.perf_counter()
    costs, mus = [], []
    with ad.count_allocations() as counter:
        x = Tensor(Rng(derive_seed(setup.seed, setup.pair)).normal((w.channels, w.height, w.width)))
        for t in range(sched.T, 0, -1):
            try:
                with ad.no_grad():
                    eps_hat = denoise(x, t, bundle, state, w, sched.T)
                    x0_hat = predict_x0(x, eps_hat, t, sched, cfg.x0_mode)
                if cfg.mode == "first-order" and cfg.M > 0:
                    x0_hat = optimize_latent_fo(x0_hat, cost, cfg.eta, cfg.M, cfg.optimizer, step_context=t)
                elif cfg.mode == "zero-order" and cfg.M > 0:
                    x0_hat = optimize_latent_zo(x0_hat, cost, cfg.eta, cfg.M, cfg.zo_samples, cfg.zo_eps,
                                                seed=derive_seed(setup.seed, setup.pair, 0x20, t), optimizer=cfg.optimizer)
                with ad.no_grad():
                    _, br = cost.terms(x0_hat)
                    _check_finite(br.L_total, "cost", t)
                    costs.append(br)
                    mus.append(state.mu_s)
                    source = br.L_nc if state.update_source == "L_nc" else br.L_ns
                    state = update_style_weight(state, br.L_s, source)
                    x = ddim_step(x0_hat, x, t, sched)
            except NonFiniteError as exc:
                if exc.step is None:
                    raise NonFiniteError(str(exc), step=t) from exc
                raise
        with ad.no_grad():
            image = decode(x, setup.decoder).data
    wall = 0.0 if deterministic_mode() else (time.perf_counter() - start) * 1000.0
    score = score_output(image, setup.refs, psi, rho, pair=setup.pair, seed=setup.seed)
    metrics = {**dataclasses.asdict(score), "average": score.average}
    echo = {"controller": dataclasses.asdict(cfg), "aggregation": dataclasses.asdict(agg),
            "pairing": dataclasses.asdict(setup.pairing), "prompt": setup.prompt, "T": sched.T,
            "schedule": sched.kind}
    return GenerationResult(np.array(image), costs, mus, metrics, wall, counter.count, setup.seed, setup.pair, echo)
