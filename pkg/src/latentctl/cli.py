"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .conditioning import ReferencePair
from .controller import GenerationSetup, deterministic_mode, run_generation
from .denoiser import Decoder
from .errors import ConfigError, ContractError, IntegrityError, NonFiniteError, ShapeError
from .io import (ensure_dir, load_builtin, load_denoiser, load_projector, parse_config, read_image,
                 resolve, save_denoiser, save_projector, serialize_config, write_image)
from .metrics import PairScore, summarize
from .schedule import make_schedule

MODES = {"fo": "first-order", "zo": "zero-order", "off": "off"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentctl", description="Controlled toy latent-diffusion sampling.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", type=Path, required=config_required)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, default=1)
        return sp

    g = common(sub.add_parser("generate", help="run controlled sampling over a subject x style x seed grid"),
               config_required=True)
    g.add_argument("--mode", choices=sorted(MODES))

    td = common(sub.add_parser("train-denoiser", help="pretrain the toy text-conditioned backbone"))
    td.add_argument("--steps", type=int, default=4000)
    td.add_argument("--batch", type=int, default=8)
    td.add_argument("--lr", type=float, default=2e-3)
    td.add_argument("--samples", type=int, default=256)

    tp = common(sub.add_parser("train-projector", help="train a style or object projector on a frozen backbone"))
    tp.add_argument("--kind", choices=("style", "object"), required=True)
    tp.add_argument("--denoiser", default="builtin")
    tp.add_argument("--steps", type=int, default=2000)
    tp.add_argument("--batch", type=int, default=8)
    tp.add_argument("--lr", type=float, default=3e-3)
    tp.add_argument("--gamma", type=float, default=0.3)
    tp.add_argument("--samples", type=int, default=256)

    ev = common(sub.add_parser("eval", help="aggregate per-run JSON reports into a metrics report"))
    ev.add_argument("reports", nargs="+", type=Path, help="report files or directories holding them")

    gc = common(sub.add_parser("gradcheck", help="finite-difference checks of every differentiable stage"))
    gc.add_argument("--tol", type=float, default=1e-5)

    bz = common(sub.add_parser("bench-zo", help="first- vs zero-order controller on the convex test"))
    bz.add_argument("--n-seeds", type=int, default=20)
    return p


# -- generate ---------------------------------------------------------------------------------
def _load_weights(value: str, base: Path, name: str):
    if value == "builtin":
        return load_builtin(name)
    path = resolve(base, value)
    return load_denoiser(path) if name == "denoiser" else load_projector(path)


def _load_ref(ref, base: Path) -> np.ndarray:
    if isinstance(ref, str):
        return read_image(resolve(base, ref))
    from .training import render

    try:
        return render(ref.get("palette", "plain"), ref.get("texture", "flat"), ref["shape"], ref["position"],
                      int(ref.get("phase", 0)))
    except (KeyError, TypeError) as exc:
        raise ConfigError("subjects/styles", f"bad synthetic reference {ref!r}: {exc}") from exc


def _generate(args) -> int:
    cfg = parse_config(args.config)
    base = args.config.parent
    if args.mode:
        cfg.controller.mode = MODES[args.mode]
        if args.mode == "off":
            cfg.controller.M = 0
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    out = ensure_dir(args.out or resolve(base, cfg.output_dir))
    if not cfg.subjects or not cfg.styles:
        raise ConfigError("subjects", "need at least one subject and one style reference")
    subjects = [_load_ref(r, base) for r in cfg.subjects]
    styles = [_load_ref(r, base) for r in cfg.styles]
    pairs = [ReferencePair(s, r) for s in subjects for r in styles]
    denoiser = _load_weights(cfg.denoiser, base, "denoiser")
    style_proj = _load_weights(cfg.style_projector, base, "style_projector")
    object_proj = _load_weights(cfg.object_projector, base, "object_projector")
    sched = make_schedule(cfg.schedule, cfg.T)
    decoder = Decoder(profile=cfg.decoder)
    prompt = cfg.prompt or "null"
    setups = [GenerationSetup(denoiser, sched, refs, prompt, decoder, style_proj, object_proj,
                              dataclasses.replace(cfg.controller, seed=seed), cfg.aggregation, cfg.pairing,
                              cfg.style_descriptor, cfg.subject_descriptor, seed=seed, pair=i)
              for seed in seeds for i, refs in enumerate(pairs)]
    workers = 1 if deterministic_mode() else max(1, args.workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_generation, setups))
    else:
        results = [run_generation(s) for s in setups]
    scores = []
    for r in results:
        stem = f"pair{r.pair:03d}_seed{r.seed}"
        write_image(r.image, out / f"{stem}.ppm")
        (out / f"{stem}.json").write_text(json.dumps(r.report(), indent=1, sort_keys=True))
        scores.append(PairScore(r.pair, r.seed, r.metrics["subject_sim"], r.metrics["style_sim"],
                                r.metrics["leakage"]))
    report = summarize(scores)
    (out / "metrics.json").write_text(report.to_json())
    (out / "config.json").write_text(serialize_config(cfg))
    print(report.table())
    return 0


# -- training -------------------------------------------------------------------------------
def _train_denoiser(args) -> int:
    from .training import TrainingHyper, gen_synthetic_dataset, heldout_denoising_loss, pretrain_toy_denoiser

    seed = args.seed or 0
    out = ensure_dir(args.out or Path("denoiser"))
    data = gen_synthetic_dataset(args.samples, seed)
    hyper = TrainingHyper(lr=args.lr, steps=args.steps, batch=args.batch, seed=seed, log_every=10)
    result = pretrain_toy_denoiser(data, hyper)
    save_denoiser(out, result.weights)
    result.write_csv(out / "loss.csv")
    held = heldout_denoising_loss(result.weights, gen_synthetic_dataset(64, seed + 99), make_schedule("cosine", 8))
    print(json.dumps({"heldout_denoising_loss": held, "steps": args.steps}))
    return 0


def _train_projector(args) -> int:
    from .training import TrainingHyper, gen_synthetic_dataset, train_projector

    seed = args.seed or 0
    denoiser = load_builtin("denoiser") if args.denoiser == "builtin" else load_denoiser(args.denoiser)
    out = ensure_dir(args.out or Path(f"{args.kind}_projector"))
    data = gen_synthetic_dataset(args.samples, seed)
    hyper = TrainingHyper(gamma=args.gamma, lr=args.lr, steps=args.steps, batch=args.batch, seed=seed,
                          log_every=10)
    result = train_projector(args.kind, data, denoiser, hyper)
    save_projector(out, result.weights)
    result.write_csv(out / "loss.csv")
    last = result.history[-1] if result.history else None
    print(json.dumps({"kind": args.kind, "final_loss": last.final if last else None}))
    return 0


# -- eval / diagnostics ----------------------------------------------------------------------------
def _eval(args) -> int:
    files = []
    for p in args.reports:
        if p.is_dir():
            files += sorted(f for f in p.glob("*.json") if f.name not in ("metrics.json", "config.json"))
        else:
            files.append(p)
    scores = []
    for f in files:
        try:
            m = json.loads(f.read_text())["metrics"]
            scores.append(PairScore(m["pair"], m["seed"], m["subject_sim"], m["style_sim"], m["leakage"]))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(str(f), f"not a generation report: {exc}") from exc
    report = summarize(scores)
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.table())
    return 0


def _gradcheck(args) -> int:
    from .diagnostics import gradcheck_suite

    errors = gradcheck_suite(args.seed or 0)
    for name, err in errors.items():
        print(f"{name:20s} {err:.3e} {'ok' if err <= args.tol else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(errors, indent=1))
    return 0 if all(e <= args.tol for e in errors.values()) else 3


def _bench_zo(args) -> int:
    from .diagnostics import bench_zo

    start = args.seed or 0
    rows = bench_zo(seeds=range(start, start + args.n_seeds), deterministic=deterministic_mode())
    text = json.dumps(rows, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


COMMANDS = {"generate": _generate, "train-denoiser": _train_denoiser, "train-projector": _train_projector,
            "eval": _eval, "gradcheck": _gradcheck, "bench-zo": _bench_zo}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ShapeError, NonFiniteError, IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(cli_main())
