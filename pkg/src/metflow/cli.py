"""Command-line driver: ``metflow {train,sample,eval-density,check,preset-list}``.

Exit codes: 0 on success, 1 on a numerical failure (or a failed check), 2 on
usage or configuration errors.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checks import run_suite
from .config import build_model, load_config, preset, preset_names
from .density import marginal_logpdf
from .errors import ConfigError, MetFlowError, NumericalError
from .sampler import config_hash, default_mode_radius, mode_count, sample, sample_baseline, write_samples
from .train import load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_from_args(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        run = load_config(args.config)
    elif args.preset:
        run = preset(args.preset, seed=0 if args.seed is None else args.seed)
    else:
        raise ConfigError("one of --config or --preset is required")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "iterations", None) is not None:
        train_cfg = run.train.to_dict()
        train_cfg["iterations"] = args.iterations
        train_cfg["early_stop_patience"] = min(train_cfg["early_stop_patience"], args.iterations)
        changes["train"] = train_cfg
    return type(run).from_dict({**run.to_dict(), **changes}) if changes else run


def cmd_train(args):
    run = _run_from_args(args)
    out = Path(run.out)
    buffers = None
    try:
        params, log = train(None, run)
    except NumericalError as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            noise = getattr(exc, "log", None)
            noise = None if noise is None else noise.noise
            save_checkpoint(out, last, run, None if noise is None else {"noise": noise})
        print(f"numerical failure: {exc}; last good parameters written to {out}", file=sys.stderr)
        return EXIT_NUMERICAL
    if log.noise is not None:
        buffers = {"noise": log.noise}
    save_checkpoint(out, params, run, buffers)
    log.write_csv(out / "train_log.csv", run.n_steps)
    metrics = {
        "config_hash": config_hash(run),
        "iterations": log.n_iterations,
        "stopped_early": log.stopped_early,
        "final_elbo": log.elbo[-1],
        "final_elbo_ema": log.ema[-1],
        "final_accept": [float(a) for a in log.accept[-1]],
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"trained {log.n_iterations} iterations; elbo ema {log.ema[-1]:.4f}; checkpoint in {out}")
    return EXIT_OK


def _load(args):
    ckpt = Path(args.checkpoint)
    params, buffers, run = load_checkpoint(ckpt)
    model = build_model(run)
    if params.shapes() != {k: tuple(v) for k, v in model.param_shapes().items()}:
        raise ConfigError("checkpoint parameters do not match the configuration")
    return params, buffers, run, model


def cmd_sample(args):
    params, buffers, run, model = _load(args)
    seed = run.seed if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 1])
    if run.method == "nf":
        if args.extra_kernels != 1:
            raise ConfigError("the plain-flow baseline has no kernels to iterate")
        samples = sample_baseline(model, params, args.n, rng=rng)
    else:
        samples = sample(model, params, args.n, args.extra_kernels, rng=rng, u=buffers.get("noise"))
    samples.meta.update({"seed": seed, "config_hash": config_hash(run), "target": run.target})
    if model.target.centers is not None:
        radius = args.mode_radius or run.mode_radius or default_mode_radius(model.dim, model.target.info.get("sigma", 1.0))
        count, occupancy = mode_count(samples, model.target.centers, radius)
        samples.meta.update({"mode_radius": radius, "modes_found": count, "occupancy": occupancy.tolist()})
    out = Path(args.out) if args.out else Path(args.checkpoint) / "samples.csv"
    csv, sidecar = write_samples(out, samples)
    print(f"wrote {len(samples)} samples to {csv}")
    return EXIT_OK


def cmd_eval_density(args):
    params, buffers, run, model = _load(args)
    if model.dim > 2:
        raise ConfigError("grid evaluation is limited to D <= 2")
    lo, hi, n = args.lo, args.hi, args.grid
    axis = np.linspace(lo, hi, n)
    if model.dim == 1:
        pts = axis[:, None]
    else:
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    u = buffers.get("noise")
    if model.setting == "full":
        raise ConfigError("the fully random setting has no fixed noise to condition the density on")
    logp = marginal_logpdf(model, params, pts, u=u)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "density.csv"
    header = ",".join([f"z{j + 1}" for j in range(model.dim)] + ["log_density"])
    rows = [",".join(repr(float(x)) for x in (*p, lp)) for p, lp in zip(pts, logp)]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(header + "\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} grid values to {out}")
    return EXIT_OK


def cmd_check(args):
    report = run_suite(args.suite, seed=0 if args.seed is None else args.seed, inject_failure=args.inject_failure)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_NUMERICAL


def cmd_preset_list(args):
    for name in preset_names():
        run = preset(name)
        print(f"{name:14s} target={run.target} D={run.dim} K={run.n_steps} method={run.method} setting={run.setting}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="metflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--preset", help="named preset instead of --config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--iterations", type=int, help="override the iteration budget")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--extra-kernels", type=int, default=1)
    p.add_argument("--mode-radius", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default: <checkpoint>/samples.csv)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-density", help="tabulate the exact log-density on a grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lo", type=float, default=-10.0)
    p.add_argument("--hi", type=float, default=10.0)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_density)

    p = sub.add_parser("check", help="run self-check suites")
    p.add_argument("suite", help="balance, density, grad, flows, hmc or all")
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-failure", action="store_true", help="use a kernel that must fail the balance suite")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("preset-list", help="list experiment presets")
    p.set_defaults(func=cmd_preset_list)
    return parser


def _check_threads():
    value = os.environ.get("METFLOW_THREADS")
    if value is not None and (not value.isdigit() or int(value) < 1):
        raise ConfigError(f"METFLOW_THREADS must be a positive integer, got {value!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_threads()
        if getattr(args, "n", 1) is not None and getattr(args, "n", 1) < 1:
            raise ConfigError("--n must be positive")
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MetFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
