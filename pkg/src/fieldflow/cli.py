"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import bench as bench_mod
from .checkpoint import CheckpointError, load_checkpoint, restore_model, resume_state, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_config, to_dict, write_manifest
from .datagen import (
    ContainerError, DatasetContainer, GenSpec, generate, read_container, split, write_container,
)
from .denoiser import FlowOperator, ModelConfig
from .effdim import diagnose
from .metrics import EvalReport, eval_multires, evaluate, run_ablation, write_table
from .sampler import forecast
from .tensorfmt import FormatError
from .train import NumericDivergence, WindowSet, set_deterministic, train

log = logging.getLogger("fieldflow")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# synthetic corpora whose patch vectors have the 48 / 512 / 5120 sizes of the 3/4/5-channel cases
DIAGNOSE_TRIO = (
    GenSpec("advection", n=8, grid=(1024,), steps=20, dt=0.01, beta=(0.5, 2.0),
            var_names=("Vx", "rho", "p"), seed=11),
    GenSpec("diffusion2d", n=8, grid=(128, 128), steps=8, dt=0.005, nu=0.01,
            var_names=("Vx", "Vy", "rho", "p"), seed=12),
    GenSpec("diffusion3d", n=8, grid=(16, 16, 16), steps=8, dt=0.005, nu=0.01,
            var_names=("Vx", "Vy", "Vz", "rho", "p"), seed=13),
)


def _add_global(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, deterministic kernels")
    p.add_argument("--threads", type=int, help="intra-op threads (ignored with --deterministic)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fieldflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic dataset container")
    _add_global(g)
    g.add_argument("--family", choices=["advection", "burgers", "diffusion2d", "diffusion3d"])
    g.add_argument("--preset", choices=["diagnose-trio"], help="write the three diagnostics corpora")
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--grid", type=int, nargs="+")
    g.add_argument("--steps", type=int, default=30)
    g.add_argument("--dt", type=float, default=0.01)
    g.add_argument("--beta", type=float, nargs="+", default=[1.0], help="speed, or a lo hi range")
    g.add_argument("--nu", type=float, default=0.01)
    g.add_argument("--vars", nargs="+", help="variable names (one independent field each)")
    g.add_argument("--split", action="store_true", help="also write 90/10 train/test containers")

    for name, helptext in (("train", "train from scratch"), ("finetune", "continue from a checkpoint")):
        t = sub.add_parser(name, help=helptext)
        _add_global(t)
        t.add_argument("--data", nargs="+", help="training containers (overrides config)")
        t.add_argument("--val", nargs="+", help="validation containers")
        t.add_argument("--steps", type=int, help="override the step budget")
        if name == "finetune":
            t.add_argument("--checkpoint", required=True)
        else:
            t.add_argument("--resume", help="continue an interrupted run from its checkpoint")

    s = sub.add_parser("sample", help="forecast future windows")
    _add_global(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--max-windows", type=int, default=16)
    s.add_argument("--steps", type=int)
    s.add_argument("--solver", choices=["euler", "heun"])
    s.add_argument("--cfg-scale", type=float)

    for name in ("eval", "eval-multires"):
        e = sub.add_parser(name, help="nRMSE report" + (" across resolutions" if "multi" in name else ""))
        _add_global(e)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--max-windows", type=int)
        e.add_argument("--steps", type=int)
        if name == "eval-multires":
            e.add_argument("--resolutions", type=int, nargs="+", required=True)

    a = sub.add_parser("ablate", help="x/v/eps prediction-target ablation")
    _add_global(a)
    a.add_argument("--data", nargs="+", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--max-windows", type=int)

    d = sub.add_parser("diagnose", help="effective-dimension report")
    _add_global(d)
    d.add_argument("--data", nargs="*", help="containers (default: generate the synthetic trio)")
    d.add_argument("--n", type=int, default=6000)

    b = sub.add_parser("bench", help="inference latency table")
    _add_global(b)
    b.add_argument("--presets", nargs="+", default=["tiny"])
    b.add_argument("--sample-steps", type=int, nargs="+", default=list(bench_mod.BENCH_STEPS))
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--grid", type=int, default=128)
    return parser


# --- helpers --------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic:
        cfg.deterministic = True
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _setup_runtime(cfg: RunConfig) -> None:
    if cfg.deterministic:
        set_deterministic(1)
    else:
        torch.set_num_threads(max(1, cfg.threads))


def _load(path) -> DatasetContainer:
    try:
        return read_container(path)
    except FileNotFoundError:
        raise ContainerError(f"no such dataset: {path}") from None


def _windows(c: DatasetContainer, mc: ModelConfig, stride: int = 1, name: str = "") -> WindowSet:
    return WindowSet(c.data, c.var_names, c.dim_type, mc.history, mc.horizon, stride, mc.patch_size,
                     mc.vocab, name=name)


def _model_from_checkpoint(path) -> tuple[FlowOperator, RunConfig, dict]:
    ckpt = load_checkpoint(path)
    run = from_dict(RunConfig, ckpt.config)
    model = FlowOperator(run.model.to_model_config(), seed=None)
    restore_model(ckpt, model)
    model.eval()
    return model, run, ckpt.header


def _sample_cfg(run: RunConfig, args):
    from dataclasses import replace
    cfg = run.sample
    if getattr(args, "steps", None):
        cfg = replace(cfg, steps=args.steps)
    if getattr(args, "solver", None):
        cfg = replace(cfg, solver=args.solver)
    if getattr(args, "cfg_scale", None) is not None:
        cfg = replace(cfg, cfg_scale=args.cfg_scale)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _emit(rows, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / f"{stem}.tsv")
    with open(out / f"{stem}.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r.row()) + "\n")
    for r in rows:
        print(f"{r.dataset or '-'}\t{r.model}\t{tuple(r.resolution)}\t{r.metric}={r.value:.5f}\t{r.status}")


# --- commands ---------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    if args.preset == "diagnose-trio":
        for spec in DIAGNOSE_TRIO:
            path = out / f"{spec.family}_{spec.dim_type}d.ffds"
            write_container(path, generate(spec))
            print(path)
        return EXIT_OK
    if not args.family:
        raise UsageError("generate-data needs --family or --preset")
    beta = tuple(args.beta) if len(args.beta) == 2 else args.beta[0]
    seed = args.seed if args.seed is not None else cfg.seed
    spec = GenSpec(args.family, n=args.n, grid=tuple(args.grid) if args.grid else None, steps=args.steps,
                   dt=args.dt, beta=beta, nu=args.nu,
                   var_names=tuple(args.vars) if args.vars else None, seed=seed)
    c = generate(spec)
    path = out / f"{args.family}.ffds"
    write_container(path, c)
    print(path)
    if args.split:
        tr, te = split(c, 0.9, seed)
        write_container(out / f"{args.family}_train.ffds", tr)
        write_container(out / f"{args.family}_test.ffds", te)
        print(out / f"{args.family}_train.ffds")
        print(out / f"{args.family}_test.ffds")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, finetune: bool = False) -> int:
    from dataclasses import replace
    out = cfg.resolved_out_dir()
    if args.steps:
        cfg.train = replace(cfg.train, steps=args.steps)
    if finetune:
        ckpt = load_checkpoint(args.checkpoint)
        base = from_dict(RunConfig, ckpt.config)
        cfg.model = base.model
    mc = cfg.model.to_model_config()
    paths = args.data or cfg.data.train
    if not paths:
        raise ConfigError("no training data: pass --data or set data.train")
    sets = [_windows(_load(p), mc, cfg.train.window_stride, Path(p).stem) for p in paths]
    val_paths = args.val or cfg.data.test
    val = [_windows(_load(p), mc, max(1, cfg.data.eval_stride), Path(p).stem) for p in val_paths]
    model = FlowOperator(mc, seed=cfg.seed)
    resume = None
    if finetune:
        restore_model(ckpt, model)
    elif getattr(args, "resume", None):
        resume = resume_state(load_checkpoint(args.resume), model)
    write_manifest(cfg, out, args.command, {"argv": args.argv})
    snapshot = to_dict(cfg)

    def on_ckpt(step, state, rng_state):
        save_checkpoint(out / f"ckpt_step{step}.ffck", model, snapshot, step, state, rng_state)

    result = train(model, sets, cfg.train, val_sets=val or None, out_dir=out, resume=resume,
                   on_checkpoint=on_ckpt)
    metrics = {"final_loss": float(np.mean(result.losses[-20:])) if result.losses else None,
               "initial_loss": result.losses[0] if result.losses else None,
               "steps": result.steps, "wall": result.wall}
    if result.val:
        metrics.update({k: v for k, v in result.val[-1].items() if k != "step"})
    path = save_checkpoint(out / "ckpt_final.ffck", model, snapshot, result.steps, result.state,
                           result.rng_state, metrics)
    print(path)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    model, run, _ = _model_from_checkpoint(args.checkpoint)
    c = _load(args.data)
    ws = _windows(c, model.cfg)
    scfg = _sample_cfg(run, args)
    idx = np.arange(min(args.max_windows, len(ws)))
    hist, fut = ws.raw(idx)
    pred = forecast(model, ws, hist, scfg, [scfg.seed + int(i) for i in idx])
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", pred.astype(np.float32))
    np.save(out / "targets.npy", fut.astype(np.float32))
    print(out / "samples.npy")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, run, _ = _model_from_checkpoint(args.checkpoint)
    c = _load(args.data)
    scfg = _sample_cfg(run, args)
    max_w = args.max_windows or run.data.eval_max_windows
    name = Path(args.data).stem
    if args.command == "eval-multires":
        rows = eval_multires(model, c.data, c.var_names, c.dim_type, args.resolutions, scfg,
                             max_w, run.data.eval_stride, name=name)
        stem = "eval_multires"
    else:
        rows = evaluate(model, _windows(c, model.cfg, run.data.eval_stride, name), scfg, max_w)
        stem = "eval"
    _emit(rows, cfg.resolved_out_dir(), stem)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from dataclasses import replace
    if args.steps:
        cfg.train = replace(cfg.train, steps=args.steps)
    mc = cfg.model.to_model_config()
    sets = [_windows(_load(p), mc, cfg.train.window_stride, Path(p).stem) for p in args.data]
    test = _windows(_load(args.test), mc, max(1, cfg.data.eval_stride), Path(args.test).stem)
    rows = run_ablation(sets, test, mc, cfg.train, cfg.sample, max_windows=args.max_windows, seed=cfg.seed)
    _emit(rows, cfg.resolved_out_dir(), "ablation")
    return EXIT_OK


def cmd_diagnose(args, cfg: RunConfig) -> int:
    if args.data:
        cs = [(_load(p), Path(p).stem) for p in args.data]
    else:
        cs = [(generate(s), s.family) for s in DIAGNOSE_TRIO]
    datasets = [(c.data, c.dim_type, name) for c, name in cs]
    out = cfg.resolved_out_dir()
    reports = diagnose(datasets, n=args.n, patch=cfg.model.to_model_config().patch_size,
                       seed=cfg.seed, out_dir=out)
    print((out / "effdim_table.tsv").read_text(), end="")
    return EXIT_OK if reports else EXIT_DATA


def cmd_bench(args, cfg: RunConfig) -> int:
    rows = bench_mod.bench(args.presets, args.sample_steps, args.runs, args.grid, cfg.seed)
    table = bench_mod.format_table(rows)
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "finetune": lambda a, c: cmd_train(a, c, finetune=True),
    "sample": cmd_sample,
    "eval": cmd_eval,
    "eval-multires": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.argv = list(argv) if argv is not None else sys.argv[1:]
        cfg = _run_config(args)
        _setup_runtime(cfg)
        code = COMMANDS[args.command](args, cfg)
        if code == EXIT_OK and args.command not in ("train", "finetune"):  # those write it up front
            write_manifest(cfg, cfg.resolved_out_dir(), args.command, {"argv": args.argv})
        return code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, FormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
