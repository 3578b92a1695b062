"""Similarity and leakage scores, and run-level aggregation."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .conditioning import DescriptorEmbedding
from .errors import ContractError


def _vec(x) -> np.ndarray:
    if isinstance(x, DescriptorEmbedding):
        x = x.vector
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64).ravel()


def cosine_similarity(a, b) -> float:
    """Cosine similarity as a percentage in [-100, 100]."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ContractError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.clip(100.0 * np.dot(a, b) / (na * nb), -100.0, 100.0))


def leakage_score(generated, r_sty, rho) -> float:
    """Descriptor-space leakage analog: how much of the style reference's layout shows up."""
    return max(0.0, cosine_similarity(rho.embed(_img(generated)), rho.embed(_img(r_sty))))


def _img(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class PairScore:
    pair: int
    seed: int
    subject_sim: float
    style_sim: float
    leakage: float

    @property
    def average(self) -> float:
        return (self.subject_sim + self.style_sim) / 2.0


@dataclass
class MetricsReport:
    subject_sim: float
    style_sim: float
    average: float
    leakage_score: float
    leakage_median: float
    pairs: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leakage_note"] = "descriptor-space analog: cos(rho(output), rho(style reference)), clipped at 0"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        head = f"{'Subject Sim.':>12} {'Style Sim.':>10} {'Average':>8} {'Leakage (analog)':>17}"
        row = f"{self.subject_sim:12.1f} {self.style_sim:10.1f} {self.average:8.1f} {self.leakage_score:17.1f}"
        return head + "\n" + row


def score_output(image, refs, psi, rho, pair: int = 0, seed: int = 0) -> PairScore:
    img = _img(image)
    return PairScore(
        pair, seed,
        cosine_similarity(rho.embed(img), rho.embed(_img(refs.r_sub))),
        cosine_similarity(psi.embed(img), psi.embed(_img(refs.r_sty))),
        leakage_score(img, refs.r_sty, rho),
    )


def summarize(scores: list[PairScore]) -> MetricsReport:
    if not scores:
        raise ContractError("no results to evaluate")
    n = len(scores)
    # fsum is correctly rounded, so the means do not depend on input order
    subj = math.fsum(s.subject_sim for s in scores) / n
    sty = math.fsum(s.style_sim for s in scores) / n
    leak = math.fsum(s.leakage for s in scores) / n
    ordered = sorted(scores, key=lambda s: (s.pair, s.seed))
    return MetricsReport(
        subject_sim=subj,
        style_sim=sty,
        average=(subj + sty) / 2.0,
        leakage_score=leak,
        leakage_median=statistics.median(s.leakage for s in scores),
        pairs=[asdict(s) for s in ordered],
        seeds=sorted({s.seed for s in scores}),
    )


def eval_run(results, refs, psi=None, rho=None) -> MetricsReport:
    """Score each generation against its reference pair and aggregate."""
    from .conditioning import get_descriptor

    if len(results) != len(refs):
        raise ContractError(f"{len(results)} results but {len(refs)} reference pairs")
    if not results:
        raise ContractError("no results to evaluate")
    psi = psi or get_descriptor("style")
    rho = rho or get_descriptor("subject")
    scores = [score_output(r.image, ref, psi, rho, pair=getattr(r, "pair", i), seed=getattr(r, "seed", 0))
              for i, (r, ref) in enumerate(zip(results, refs))]
    return summarize(scores)
