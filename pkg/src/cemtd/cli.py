"""Command line entry point: ``cemtd run | oracle | list``."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness
from .environments import ENV_NAMES, ContinuousEnv, make_env
from .mdp import mspbe_exact, msbr_exact, mspbe_minimizer, msbr_minimizer, solve_value_function

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cemtd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write a CSV trace")
    run.add_argument("--env", required=True)
    run.add_argument("--algo", default=None, help="comma-separated algorithm names")
    run.add_argument("--iters", type=int, default=None)
    run.add_argument("--trials", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    run.add_argument("--average", default=None, help="also write the trial-averaged CSV here")
    run.add_argument("--config", default=None, help="file of key=value lines")
    run.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    ora = sub.add_parser("oracle", help="print exact quantities of a finite environment")
    ora.add_argument("--env", required=True)
    sub.add_parser("list", help="list environments and algorithms")
    return p


def _seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get("CEMTD_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise harness.ConfigError(f"CEMTD_SEED is not an integer: {env!r}") from exc


def _overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise harness.ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _cmd_run(a, out) -> int:
    file_params = {}
    if a.config:
        try:
            with open(a.config) as fh:
                file_params = harness.parse_config_text(fh.read())
        except OSError as exc:
            raise harness.ConfigError(f"cannot read config: {exc}") from exc
    cfg = harness.make_config(
        a.env, file_params, _overrides(a.param),
        algos=harness._convert("algos", a.algo) if a.algo else None,
        iters=a.iters, trials=a.trials, seed=_seed(a.seed), out=a.out)
    traces = harness.run_experiment(cfg)
    if not a.out:
        for algo, trs in traces.items():
            out.write(harness.format_csv(trs, cfg, algo))
    if a.average:
        for algo, trs in traces.items():
            path = harness.output_path(a.average, algo, len(traces))
            with open(path, "w", newline="") as fh:
                fh.write(harness.format_average_csv(harness.average_trials(trs)))
    return EXIT_OK


def _vec(v):
    return "[" + ", ".join(format(float(x), ".10g") for x in np.ravel(v)) + "]"


def _cmd_oracle(a, out) -> int:
    if a.env not in ENV_NAMES:
        raise harness.ConfigError(f"unknown environment {a.env!r}")
    env = make_env(a.env)
    if isinstance(env, ContinuousEnv):
        X, c = env.value_matrix()
        out.write(f"env={env.name}\nvalue=-(s^T X s + c)\nc={c:.10g}\n")
        out.write(f"value_weights={_vec(env.value_weights())}\n")
        return EXIT_OK
    mdp = env.mdp
    out.write(f"env={env.name}\ngamma={mdp.gamma}\n")
    out.write(f"V={_vec(solve_value_function(mdp))}\n")
    if env.feats is not None:
        zp = mspbe_minimizer(mdp, env.feats)
        zb = msbr_minimizer(mdp, env.feats)
        out.write(f"mspbe_minimizer={_vec(zp)}\nmspbe_at_minimizer={mspbe_exact(zp, mdp, env.feats):.10g}\n")
        out.write(f"msbr_minimizer={_vec(zb)}\nmsbr_at_minimizer={msbr_exact(zb, mdp, env.feats):.10g}\n")
    return EXIT_OK


def _cmd_list(out) -> int:
    out.write("environments:\n")
    for n in ENV_NAMES:
        out.write(f"  {n}\n")
    out.write("algorithms:\n")
    for n in harness.ALGORITHMS:
        out.write(f"  {n}\n")
    return EXIT_OK


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        a = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if a.command == "list":
            return _cmd_list(out)
        if a.command == "oracle":
            return _cmd_oracle(a, out)
        return _cmd_run(a, out)
    except (harness.ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.NUMERICAL_ERRORS as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
