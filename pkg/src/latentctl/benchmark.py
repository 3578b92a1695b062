"""Synthetic subject x style suite and the ablation configurations run on it.

Subject references are plain-palette renders of the eight content
families.  Each style reference is one of the eight style families drawn
with its own salient object, placed where no subject ever sits, so an
output that copies the style reference wholesale also copies that object,
which is what the leakage analog picks up.  Prompts name the subject's
shape and position and leave the style slots empty.
"""

from __future__ import annotations

import dataclasses
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .conditioning import ReferencePair
from .controller import GenerationSetup, deterministic_mode, run_generation
from .io import AggregationConfig, ControllerConfig, load_builtin
from .metrics import PairScore, MetricsReport, summarize
from .schedule import make_schedule
from .training import CAPTION_SLOTS, PAD, SHAPES, STYLE_OBJECT_POSITIONS, content_families, sample, style_families

SUBJECT_PALETTE = "plain"
SUBJECT_TEXTURE = "flat"
PROMPT = " ".join([PAD] * CAPTION_SLOTS)
SUITE_ETA = 20.0


def suite_pairs() -> list[ReferencePair]:
    """All 64 (subject, style) reference pairs in subject-major order."""
    contents, styles = content_families(), style_families()
    subjects = [sample(SUBJECT_PALETTE, SUBJECT_TEXTURE, *c).image for c in contents]
    style_refs = [sample(p, t, *style_object(j)).image for j, (p, t) in enumerate(styles)]
    return [ReferencePair(s, r) for s in subjects for r in style_refs]


def suite_prompts() -> list[str]:
    """One prompt per suite pair naming the subject's content, style words left as padding."""
    return [" ".join([PAD, PAD, shape, position]) for shape, position in content_families()
            for _ in style_families()]


def style_object(j: int) -> tuple[str, str]:
    """Shape and position of the object drawn in style reference ``j``; never a subject position."""
    return SHAPES[(j + 1) % len(SHAPES)], STYLE_OBJECT_POSITIONS[(j // len(SHAPES) + j) % 2]


@dataclass
class BenchmarkCase:
    name: str
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)


def default_cases() -> dict[str, BenchmarkCase]:
    """Control with and without leakage terms, control off, and aggregation without OTA.

    The controlled cases take plain gradient steps of size ``SUITE_ETA``.
    """
    def fo(**kw):
        return ControllerConfig(optimizer="sgd", eta=SUITE_ETA, **kw)

    return {
        "fo": BenchmarkCase("fo", fo(gamma_nc=1.0, gamma_ns=1.0)),
        "fo-no-leakage": BenchmarkCase("fo-no-leakage", fo(gamma_nc=0.0, gamma_ns=0.0)),
        "off": BenchmarkCase("off", ControllerConfig(M=0, mode="off")),
        "no-ota": BenchmarkCase("no-ota", fo(), AggregationConfig(rejection="none", zeta=0.0)),
    }


@dataclass
class SuiteResult:
    case: str
    report: MetricsReport
    per_seed: dict  # seed -> MetricsReport
    results: list = field(default_factory=list)

    def seed_median(self, attr: str) -> float:
        return statistics.median(getattr(r, attr) for r in self.per_seed.values())


def _run_one(args):
    return run_generation(args)


def run_suite(case: BenchmarkCase, seeds=(0, 1, 2), *, pairs=None, denoiser=None, style_proj=None,
              object_proj=None, prompts=None, T: int = 8, workers: int = 1,
              keep_results: bool = False) -> SuiteResult:
    denoiser = denoiser or load_builtin("denoiser")
    style_proj = style_proj or load_builtin("style_projector")
    object_proj = object_proj or load_builtin("object_projector")
    if pairs is None:
        pairs, prompts = suite_pairs(), prompts or suite_prompts()
    sched = make_schedule("cosine", T)
    prompts = prompts or [PROMPT] * len(pairs)
    setups = [GenerationSetup(denoiser, sched, refs, prompts[i], style_proj=style_proj, object_proj=object_proj,
                              controller=dataclasses.replace(case.controller, seed=seed),
                              aggregation=case.aggregation, seed=seed, pair=i)
              for seed in seeds for i, refs in enumerate(pairs)]
    if workers > 1 and not deterministic_mode():
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, setups, chunksize=8))
    else:
        results = [run_generation(s) for s in setups]
    scores = [PairScore(r.pair, r.seed, r.metrics["subject_sim"], r.metrics["style_sim"], r.metrics["leakage"])
              for r in results]
    per_seed = {seed: summarize([s for s in scores if s.seed == seed]) for seed in seeds}
    return SuiteResult(case.name, summarize(scores), per_seed, results if keep_results else [])


# -- projector gamma ablation -----------------------------------------------------------------------
@dataclass
class AblationRun:
    seed: int
    gamma: float
    heldout: float  # held-out descriptor loss after training
    zero_init: float  # same loss with the untrained (zero-output) projector


def _ablation_one(args) -> AblationRun:
    from .conditioning import get_descriptor, init_projector
    from .training import TrainingHyper, gen_synthetic_dataset, heldout_descriptor_loss, train_projector

    kind, seed, gamma, steps, lr, n_train, n_held = args
    denoiser = load_builtin("denoiser")
    sched = make_schedule("cosine", 8)
    held = gen_synthetic_dataset(n_held, seed=10_000 + seed)
    hyper = TrainingHyper(gamma=gamma, lr=lr, steps=steps, batch=8, seed=seed, log_every=max(1, steps))
    trained = train_projector(kind, gen_synthetic_dataset(n_train, seed=seed), denoiser, hyper).weights
    zero = init_projector(kind, get_descriptor("style" if kind == "style" else "subject").dim(),
                          d_cond=denoiser.d_cond, d_attn=denoiser.d_attn, blocks=denoiser.blocks, seed=seed)
    return AblationRun(seed, gamma, heldout_descriptor_loss(kind, trained, denoiser, held, sched),
                       heldout_descriptor_loss(kind, zero, denoiser, held, sched))


def projector_ablation(kind: str = "style", seeds=range(5), gammas=(0.3, 0.0), *, steps: int = 2000,
                       lr: float = 3e-3, n_train: int = 256, n_held: int = 64, workers: int = 1) -> list[AblationRun]:
    """Train one projector per (seed, gamma) on the shipped backbone and score it on held-out samples."""
    jobs = [(kind, s, g, steps, lr, n_train, n_held) for s in seeds for g in gammas]
    if workers > 1 and not deterministic_mode():
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_ablation_one, jobs))
    return [_ablation_one(j) for j in jobs]
