"""Command line entry point: ``decompose``, ``complete``, ``gen-mdp`` and ``run``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .completion import complete
from .decomposition import DecompConfig, decompose, relative_error
from .harness import ExperimentConfig, build_mdp, run_experiment, write_results
from .mdp import save_mdp
from .tensor import load_tensor, save_cp


def _decomp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True, help="tensor text file")
    p.add_argument("--out", required=True, help="CP text file to write")
    p.add_argument("--power-tol", type=float, default=1e-9)
    p.add_argument("--power-iters", type=int, default=500)
    p.add_argument("--altmin-tol", type=float, default=1e-8)
    p.add_argument("--altmin-sweeps", type=int, default=200)


def _decomp_config(args) -> DecompConfig:
    return DecompConfig(rank=args.rank, seed=args.seed, power_tolerance=args.power_tol,
                        power_max_iters=args.power_iters, altmin_tolerance=args.altmin_tol,
                        altmin_max_sweeps=args.altmin_sweeps)


def cmd_decompose(args) -> int:
    t = load_tensor(args.input)
    cp = decompose(t, cfg=_decomp_config(args))
    save_cp(args.out, cp)
    print(f"rank {cp.rank}  relative error {relative_error(t, cp):.6g}  sweeps {len(cp.objective_history) - 1}")
    return 0


def cmd_complete(args) -> int:
    t = load_tensor(args.input)
    mask = load_tensor(args.mask)
    cp = complete(t, mask, cfg=_decomp_config(args))
    save_cp(args.out, cp)
    observed = int(mask.sum())
    print(f"rank {cp.rank}  observed {observed}/{mask.size}  masked objective {cp.objective_history[-1]:.6g}")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    overrides = {"experiment": args.experiment}
    if getattr(args, "reps", None) is not None:
        overrides["repetitions"] = args.reps
    if getattr(args, "seed", None) is not None:
        overrides["base_seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["n_jobs"] = args.jobs
    text = Path(args.config).read_text() if args.config else ""
    return ExperimentConfig.from_text(text, **overrides)


def cmd_gen_mdp(args) -> int:
    cfg = _experiment_config(args)
    mdp = build_mdp(cfg, cfg.base_seed)
    save_mdp(args.out, mdp)
    print(f"{mdp.n_states} states, actions {mdp.action_sizes}, "
          f"normalization residual {mdp.metadata.get('normalize_residual', 0.0):.3g}")
    return 0


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    dump = Path(args.dump_models) if args.dump_models else None
    results = run_experiment(cfg, dump)
    write_results(args.out, cfg, results)
    print(f"wrote {len(results)} runs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowrank-marl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="CP-decompose a dense tensor")
    _decomp_args(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("complete", help="complete a partially observed tensor")
    _decomp_args(p)
    p.add_argument("--mask", required=True, help="0/1 tensor of observed entries")
    p.set_defaults(func=cmd_complete)

    for name, func, helptext in (("gen-mdp", cmd_gen_mdp, "generate a benchmark MDP"),
                                 ("run", cmd_run, "run an experiment")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--experiment", choices=["rank5", "degenerate"], required=True)
        p.add_argument("--config", help="key = value file with ExperimentConfig fields")
        p.add_argument("--seed", type=int, default=None, help="base seed")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.add_argument("--dump-models", default=None, help="directory for model snapshots")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
