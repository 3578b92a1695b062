"""Finite-difference gradient checks and the first- vs zero-order convex benchmark."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import ReferencePair, get_descriptor, init_projector, project_condition
from .controller import LatentCost, TerminalCost, optimize_latent_fo, optimize_latent_zo
from .denoiser import Decoder, decode
from .rng import Rng, derive_seed
from .schedule import make_schedule, predict_x0


# -- finite differences ---------------------------------------------------------------------
def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar ``fn`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(fn(x))
            flat[i] = keep - h
            down = float(fn(x))
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``, a scale-aware error that ignores tiny entries."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradient(fn, x: np.ndarray, h: float = 1e-5) -> float:
    """Relative error between reverse-mode and central-difference gradients of ``fn``."""
    leaf = Tensor(x, requires_grad=True)
    analytic = ad.backward(fn(leaf), wrt=[leaf])[leaf].data
    numeric = central_difference(lambda a: fn(Tensor(a)).item(), x, h)
    return relative_error(analytic, numeric)


def _small_refs(seed: int, size: int = 8) -> ReferencePair:
    rng = Rng(seed)
    return ReferencePair(rng.uniform((3, size, size)), rng.uniform((3, size, size)))


def terminal_cost_path(seed: int = 0, T: int = 8, t: int = 4, x0_mode: str = "ddim-standard"):
    """Scalar function of a 4x4x4 latent through predict_x0, decode, descriptors and the four-term cost.

    Returns ``(fn, z0)``; the latent is treated as the noisy sample and a fixed
    noise estimate feeds ``predict_x0``.
    """
    rng = Rng(derive_seed(seed, 0x6C))
    sched = make_schedule("cosine", T)
    eps_hat = Tensor(rng.normal((4, 4, 4)))
    z0 = rng.normal((4, 4, 4))
    cost = LatentCost(TerminalCost(_small_refs(derive_seed(seed, 1)), get_descriptor("style"),
                                   get_descriptor("subject")), Decoder())

    def fn(z):
        return cost(predict_x0(z, eps_hat, t, sched, x0_mode))

    return fn, z0


def gradcheck_suite(seed: int = 0) -> dict[str, float]:
    """Relative errors for each differentiable building block and the full cost path."""
    rng = Rng(derive_seed(seed, 0x6C0))
    out = {}
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    out["matmul"] = check_gradient(lambda x: ad.sq_l2_distance(ad.matmul(x, Tensor(b)), Tensor(np.ones((3, 2)))), a)
    w = rng.normal(5)
    out["softmax"] = check_gradient(lambda x: (ad.softmax(x) * Tensor(w)).sum(), rng.normal(5))
    out["silu"] = check_gradient(lambda x: (ad.silu(x) * ad.silu(x)).sum(), rng.normal(6))
    img = rng.uniform((3, 8, 8))
    tgt_s = get_descriptor("style").embed(Tensor(rng.uniform((3, 8, 8))))
    tgt_r = get_descriptor("subject").embed(Tensor(rng.uniform((3, 8, 8))))
    out["style_descriptor"] = check_gradient(
        lambda x: ad.sq_l2_distance(get_descriptor("style").embed(x), tgt_s), img)
    out["subject_descriptor"] = check_gradient(
        lambda x: ad.sq_l2_distance(get_descriptor("subject").embed(x), tgt_r), img)
    out["decode"] = check_gradient(lambda x: (decode(x, Decoder()) ** 2).sum(), rng.normal((4, 4, 4)))
    proj = init_projector("style", 21, seed=seed)
    proj = proj.with_params({**proj.params, "w2": Tensor(rng.normal(proj.params["w2"].shape) * 0.1)})
    out["projector"] = check_gradient(lambda x: (project_condition(x, proj) ** 2).sum(), rng.normal(21))
    fn, z0 = terminal_cost_path(seed)
    out["terminal_cost"] = check_gradient(fn, z0)
    return out


# -- convex first- vs zero-order benchmark ---------------------------------------------------
@dataclass
class ConvexProblem:
    """``L(z) = ||A z - b||^2`` with a well-conditioned ``A`` and a start far from the optimum."""

    A: np.ndarray
    b: np.ndarray
    z0: np.ndarray

    def __call__(self, z):
        z = ad._as_tensor(z)
        return ad.sq_l2_distance(ad.matmul(Tensor(self.A), z.reshape(-1, 1)).reshape(-1), Tensor(self.b))

    def minimum(self) -> float:
        sol = np.linalg.lstsq(self.A, self.b, rcond=None)[0]
        return float(np.sum((self.A @ sol - self.b) ** 2))


def convex_problem(seed: int, dim: int = 16) -> ConvexProblem:
    rng = Rng(derive_seed(seed, 0xC0))
    A = np.eye(dim) + 0.3 * rng.normal((dim, dim)) / math.sqrt(dim)
    b = rng.normal(dim)
    z0 = 3.0 * rng.normal(dim)
    return ConvexProblem(A, b, z0)


@dataclass
class BenchRow:
    mode: str
    final_cost: float
    tape_allocs: int
    wall_ms: float

    def as_dict(self) -> dict:
        return {"mode": self.mode, "final_cost": self.final_cost, "tape_allocs": self.tape_allocs,
                "wall_ms": self.wall_ms}


def run_convex(mode: str, problem: ConvexProblem, *, eta: float = 0.05, M: int = 100, zo_samples: int = 8,
               zo_eps: float = 1e-3, seed: int = 0) -> BenchRow:
    start = time.perf_counter()
    with ad.count_allocations() as counter:
        if mode == "fo":
            z = optimize_latent_fo(problem.z0, problem, eta, M)
        elif mode == "zo":
            z = optimize_latent_zo(problem.z0, problem, eta, M, zo_samples, zo_eps, seed=seed)
        elif mode == "off":
            z = Tensor(problem.z0)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    wall = (time.perf_counter() - start) * 1000.0
    with ad.no_grad():
        final = problem(z).item()
    return BenchRow(mode, final, counter.count, wall)


def bench_zo(seeds=range(20), modes=("off", "zo", "fo"), deterministic: bool = False, **kw) -> list[dict]:
    """Median final cost, allocations and wall time per mode over ``seeds`` convex problems."""
    rows = []
    for mode in modes:
        runs = [run_convex(mode, convex_problem(s), seed=s, **kw) for s in seeds]
        rows.append(BenchRow(mode,
                             statistics.median(r.final_cost for r in runs),
                             max(r.tape_allocs for r in runs),
                             0.0 if deterministic else statistics.median(r.wall_ms for r in runs)).as_dict())
    return rows
