"""Experiment orchestration: configuration, algorithm registry, seeded trials,
trial averaging and CSV output."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import baselines as bl
from .ce import CeConfig, DegenerateModelError, GaussianModel, StepSchedule
from .environments import ENV_NAMES, ContinuousEnv, ContinuousMetrics, DiscreteEnv, make_env
from .mdp import column_space_projection, expected_reward, solve_value_function
from .objectives import NumericalAbort, run_sce_mspbem, run_sce_msbrm, run_sce_spiral


class ConfigError(ValueError):
    pass


CSV_COLUMNS = ("trial", "t", "sqrt_mse", "sqrt_mspbe", "gamma_p", "sigma_fro", "T", "diverged")

# Optimizer constants per environment: step sizes, threshold gain, mixing weight,
# threshold, quantile level and (where given) the shape parameter.
ENV_TABLES = {
    "cartpole": dict(alpha="t^-1", beta="t^-0.6", c=0.01, lambda_mix=0.01, epsilon1=0.95,
                     rho=0.1),
    "pendulum5": dict(alpha="0.001", beta="0.05", c=0.05, lambda_mix=0.01, epsilon1=0.95,
                      rho=0.1),
    "baird": dict(alpha="0.001", beta="0.05", c=0.01, lambda_mix=0.01, epsilon1=0.8, rho=0.1),
    "ring10": dict(alpha="0.001", beta="0.05", c=0.075, lambda_mix=0.001, epsilon1=0.85,
                   rho=0.1),
    "random": dict(alpha="0.001", beta="0.05", c=0.075, lambda_mix=0.001, epsilon1=0.85,
                   rho=0.1),
    "vanroy": dict(alpha="1/t", beta="0.9", c=0.03, lambda_mix=0.01, epsilon1=0.95, rho=0.1,
                   r_shape=1e-6),
    "baird-nl": dict(alpha="0.02", beta="0.1", c=0.05, lambda_mix=0.001, epsilon1=0.8,
                     rho=0.1, r_shape=0.2),
    "ring10-nl": dict(alpha="0.04", beta="0.2", c=0.08, lambda_mix=0.001, epsilon1=0.8,
                      rho=0.1, r_shape=0.05),
}
TABLE_OF_ENV = {"baird-imperfect": "baird", "random-rbf": "random", "random-fourier": "random"}

# Values the tables leave open: shape parameter, initial model, budgets and
# baseline initial weights.
FREE_DEFAULTS = {
    "cartpole": dict(iters=200_000, record_every=1000, mu0="0", sigma0=10.0),
    "pendulum5": dict(iters=200_000, record_every=1000, mu0="0", sigma0=1.0),
    "baird": dict(iters=1_000_000, record_every=5000, mu0="1", sigma0=1.0,
                  z0="1,1,1,1,1,1,10,1"),
    "baird-imperfect": dict(iters=1_000_000, record_every=5000, mu0="1", sigma0=1.0),
    "ring10": dict(iters=100_000, record_every=500, mu0="0", sigma0=10.0),
    "random-rbf": dict(iters=100_000, record_every=500, mu0="0", sigma0=1.0),
    "random-fourier": dict(iters=100_000, record_every=500, mu0="0", sigma0=1.0),
    "vanroy": dict(iters=100_000, record_every=500, mu0="0", sigma0=1000.0),
    "baird-nl": dict(iters=100_000, record_every=500, mu0="1", sigma0=1.0),
    "ring10-nl": dict(iters=150_000, record_every=750, mu0="1", sigma0=1.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    algos: tuple = ("sce-mspbem",)
    iters: int = 100_000
    trials: int = 10
    seed: int = 0
    record_every: int = 100
    rho: float = 0.1
    lambda_mix: float = 0.01
    epsilon1: float = 0.8
    r_shape: float = 1e-6
    c: float = 0.01
    c_decay: Optional[float] = None
    alpha: str = "0.001"
    beta: str = "0.05"
    mu0: str = "0"
    sigma0: float = 1.0
    z0: str = "0"
    td_alpha: Optional[str] = None
    td_lambda: float = 0.0
    gtd_alpha: Optional[str] = None
    gtd_beta: Optional[str] = None
    rg_alpha: Optional[str] = None
    ls_epsilon: float = bl.LS_EPSILON
    ls_lambda: float = 0.0
    gamma: Optional[float] = None
    env_states: Optional[int] = None
    env_features: Optional[int] = None
    env_seed: Optional[int] = None
    out: Optional[str] = None
    overrides: tuple = ()

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown environment {self.env!r}")
        for a in self.algos:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}")
        if not self.algos:
            raise ConfigError("no algorithm given")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.iters < 0 or self.record_every < 1:
            raise ConfigError("iters must be >= 0 and record_every >= 1")
        if not (0 < self.sigma0 ** 2 < np.inf and self.ls_epsilon > 0):
            raise ConfigError("sigma0 and ls_epsilon must be positive and finite")
        for name in ("mu0", "z0"):
            try:
                vals = [float(x) for x in str(getattr(self, name)).split(",") if x.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}") from exc
            if not vals or not np.all(np.isfinite(vals)):
                raise ConfigError(f"{name} must be finite numbers")
        try:
            self.ce_config()
            for s in (self.td_alpha, self.gtd_alpha, self.gtd_beta, self.rg_alpha):
                if s is not None:
                    StepSchedule.parse(s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ce_config(self) -> CeConfig:
        return CeConfig(rho=self.rho, lambda_mix=self.lambda_mix, epsilon1=self.epsilon1,
                        r_shape=self.r_shape, c=self.c, c_decay=self.c_decay,
                        step_alpha=self.alpha, step_beta=self.beta)

    def provenance(self) -> List[str]:
        lines = []
        for f in fields(self):
            if f.name == "overrides":
                continue
            lines.append(f"{f.name}={_fmt_value(getattr(self, f.name))}")
        lines.append("overrides=" + ",".join(self.overrides))
        return lines


def _fmt_value(v):
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return "" if v is None else str(v)


_INT = {"iters", "trials", "seed", "record_every", "env_states", "env_features", "env_seed"}
_FLOAT = {"rho", "lambda_mix", "epsilon1", "r_shape", "c", "c_decay", "sigma0", "td_lambda",
          "ls_epsilon", "ls_lambda", "gamma"}
_KNOWN = {f.name for f in fields(ExperimentConfig)} - {"overrides"}


def _convert(key, raw: str):
    if key not in _KNOWN:
        raise ConfigError(f"unknown parameter {key!r}")
    raw = raw.strip()
    if raw.lower() in ("", "none") and key not in ("algos", "env"):
        return None
    try:
        if key in _INT:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if key in _FLOAT:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if key == "algos":
        return tuple(a.strip() for a in raw.split(",") if a.strip())
    return raw


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def env_defaults(env: str) -> Dict[str, object]:
    if env not in ENV_NAMES:
        raise ConfigError(f"unknown environment {env!r}")
    d = dict(ENV_TABLES[TABLE_OF_ENV.get(env, env)])
    d.update(FREE_DEFAULTS[env])
    return d


def make_config(env: str, file_params: Optional[Dict[str, str]] = None,
                overrides: Optional[Dict[str, str]] = None, **explicit) -> ExperimentConfig:
    """Resolve a configuration: environment defaults, then file, then explicit
    arguments, then ``key=value`` overrides (which always win)."""
    values = env_defaults(env)
    for k, v in (file_params or {}).items():
        if k != "env":
            values[k] = _convert(k, v)
    for k, v in explicit.items():
        if v is not None:
            if k not in _KNOWN:
                raise ConfigError(f"unknown parameter {k!r}")
            values[k] = v
    over = []
    for k, v in (overrides or {}).items():
        k = k.replace("-", "_")
        values[k] = _convert(k, v)
        over.append(f"{k}={v}")
    if "algos" in values and isinstance(values["algos"], str):
        values["algos"] = _convert("algos", values["algos"])
    return ExperimentConfig(env=env, overrides=tuple(over), **values)


# --- traces ---------------------------------------------------------------------

@dataclass
class TrialTrace:
    trial: int
    t: np.ndarray
    sqrt_mse: np.ndarray
    sqrt_mspbe: np.ndarray
    gamma_p: np.ndarray
    sigma_fro: np.ndarray
    T: np.ndarray
    diverged: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("sqrt_mse", "sqrt_mspbe", "gamma_p", "sigma_fro", "T", "diverged"):
            v = getattr(self, name)
            if v is None:
                v = np.full(n, np.nan)
            setattr(self, name, np.asarray(v))
        self.diverged = self.diverged.astype(bool)

    def __len__(self):
        return len(self.t)

    @property
    def final_sqrt_mse(self) -> float:
        return float(self.sqrt_mse[-1])


@dataclass
class AveragedTrace:
    t: np.ndarray
    mean: Dict[str, np.ndarray]
    var: Dict[str, np.ndarray]
    n_diverged: np.ndarray
    n_trials: int


AVERAGED = ("sqrt_mse", "sqrt_mspbe", "gamma_p", "sigma_fro", "T")


def average_trials(traces: Sequence[TrialTrace]) -> AveragedTrace:
    """Pointwise mean and variance over trials; divergent trials are included
    and counted per record."""
    if not traces:
        raise ValueError("no traces to average")
    t = traces[0].t
    for tr in traces[1:]:
        if len(tr.t) != len(t) or not np.array_equal(tr.t, t):
            raise ValueError("traces have mismatched record times")
    mean, var = {}, {}
    with np.errstate(invalid="ignore", over="ignore"):
        for name in AVERAGED:
            stack = np.stack([getattr(tr, name) for tr in traces]).astype(float)
            mean[name] = stack.mean(axis=0)
            var[name] = stack.var(axis=0)
    ndiv = np.sum([tr.diverged for tr in traces], axis=0).astype(int)
    return AveragedTrace(t.copy(), mean, var, ndiv, len(traces))


# --- metrics --------------------------------------------------------------------

class Metrics:
    """Error measures of parameter vectors for one environment."""

    def __init__(self, env, kind: str = "linear"):
        self.env = env
        self.kind = kind
        if isinstance(env, ContinuousEnv):
            self.cont = ContinuousMetrics(env, env.evaluation_states())
            return
        mdp = env.mdp
        self.v_true = solve_value_function(mdp)
        if env.feats is not None:
            phi = env.feats.phi
            self.phi = phi
            proj = column_space_projection(mdp, env.feats)
            # Phi z - Pi T Phi z = (Phi - gamma Pi P Phi) z - Pi rbar
            self.mspbe_lin = phi - mdp.gamma * proj @ mdp.P @ phi
            self.mspbe_off = proj @ expected_reward(mdp)

    def values(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        if self.kind == "linear":
            return Z @ self.phi.T
        man = self.env.manifold
        return np.stack([man.evaluate(z) for z in Z])

    def sqrt_mse(self, Z) -> np.ndarray:
        if isinstance(self.env, ContinuousEnv):
            return self.cont.sqrt_mse(Z)
        with np.errstate(over="ignore", invalid="ignore"):
            err = self.values(Z) - self.v_true[None, :]
            return np.sqrt((err ** 2) @ self.env.mdp.nu)

    def sqrt_mspbe(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        if isinstance(self.env, ContinuousEnv):
            return self.cont.sqrt_mspbe(Z)
        if self.kind != "linear":
            return np.full(Z.shape[0], np.nan)
        with np.errstate(over="ignore", invalid="ignore"):
            d = Z @ self.mspbe_lin.T - self.mspbe_off[None, :]
            return np.sqrt((d ** 2) @ self.env.mdp.nu)


# --- algorithm registry -----------------------------------------------------------

def _vector(spec: str, k: int) -> np.ndarray:
    vals = [float(x) for x in str(spec).split(",") if x.strip()]
    if len(vals) == 1:
        return np.full(k, vals[0])
    if len(vals) != k:
        raise ConfigError(f"expected 1 or {k} values, got {len(vals)}")
    return np.array(vals)


def _is_nonlinear(env) -> bool:
    return isinstance(env, DiscreteEnv) and env.manifold is not None


def _param_dim(env) -> int:
    if _is_nonlinear(env):
        return env.manifold.dim_param
    if isinstance(env, ContinuousEnv):
        return env.n_features
    return env.feats.n_features


def _gamma(env) -> float:
    return env.gamma if isinstance(env, ContinuousEnv) else env.mdp.gamma


def _stream(env, rng, double=False):
    if isinstance(env, ContinuousEnv):
        if double:
            raise ConfigError(f"{env.name} has no double sampling")
        return env.stream(rng)
    return env.stream(rng, double=double)


def _pad(res_t, arrays, iters, every, diverged_from=None):
    """Extend a trace that stopped early to the full record grid."""
    grid = np.concatenate([[0], np.arange(every, iters + 1, every)])
    n = len(res_t)
    out = {}
    for name, a in arrays.items():
        a = np.asarray(a, dtype=float)
        if n < len(grid):
            a = np.concatenate([a, np.repeat(a[-1:], len(grid) - n)])
        out[name] = a
    div = np.zeros(len(grid), dtype=bool)
    if diverged_from is not None:
        div[grid >= diverged_from] = True
    return grid, out, div


def _run_sce(objective: str):
    def run(env, cfg: ExperimentConfig, rng, metrics: Metrics) -> TrialTrace:
        k = _param_dim(env)
        theta0 = GaussianModel.isotropic(_vector(cfg.mu0, k), cfg.sigma0 ** 2)
        ce_cfg = cfg.ce_config()
        g = _gamma(env)
        if env.name == "vanroy":
            if objective != "msbr":
                raise ConfigError("vanroy supports only sce-msbrm")
            res = run_sce_spiral(_stream(env, rng, True), env.mdp, env.info["a"],
                                 env.info["b"], ce_cfg, theta0, cfg.iters, rng,
                                 env.info["tau"], env.info["eps"], cfg.record_every)
        elif _is_nonlinear(env):
            if objective != "msbr":
                raise ConfigError(f"{env.name} supports only sce-msbrm")
            res = run_sce_msbrm(_stream(env, rng, True), g, ce_cfg, theta0, cfg.iters, rng,
                                cfg.record_every, warp=env.info["kappa"])
        elif objective == "mspbe":
            res = run_sce_mspbem(_stream(env, rng), g, ce_cfg, theta0, cfg.iters, rng,
                                 cfg.record_every)
        else:
            res = run_sce_msbrm(_stream(env, rng, True), g, ce_cfg, theta0, cfg.iters, rng,
                                cfg.record_every)
        stop = int(res.t[-1]) if res.aborted else None
        grid, a, div = _pad(res.t, dict(mse=metrics.sqrt_mse(res.mu),
                                         pbe=metrics.sqrt_mspbe(res.mu), gp=res.gamma_p,
                                         sf=res.sigma_fro, T=res.T),
                            cfg.iters, cfg.record_every, stop)
        return TrialTrace(0, grid, a["mse"], a["pbe"], a["gp"], a["sf"], a["T"], div)
    return run


def _sched(spec, fallback) -> StepSchedule:
    return StepSchedule.parse(spec if spec is not None else fallback)


def _baseline_trace(res: bl.BaselineResult, metrics: Metrics) -> TrialTrace:
    n = len(res.t)
    with np.errstate(over="ignore", invalid="ignore"):
        mse = metrics.sqrt_mse(res.z)
        pbe = metrics.sqrt_mspbe(res.z)
    nan = np.full(n, np.nan)
    return TrialTrace(0, res.t, mse, pbe, nan, nan, nan, res.diverged_mask)


def _run_linear(algo: str, lam_from_cfg: bool = False):
    def run(env, cfg: ExperimentConfig, rng, metrics: Metrics) -> TrialTrace:
        k = _param_dim(env)
        g = _gamma(env)
        if _is_nonlinear(env):
            if algo not in ("td", "gtd2") or (lam_from_cfg and cfg.td_lambda != 0.0):
                raise ConfigError(f"{env.name} supports td0 and gtd2 among the baselines")
            theta0 = _vector(cfg.mu0, k)
            res = bl.run_nonlinear(algo, env.family, _stream(env, rng), g, theta0, cfg.iters,
                                   _sched(cfg.td_alpha if algo == "td" else cfg.gtd_alpha,
                                          cfg.alpha),
                                   _sched(cfg.gtd_beta, cfg.beta), cfg.record_every)
            return _baseline_trace(res, metrics)
        lam = cfg.td_lambda if lam_from_cfg else 0.0
        if algo == "td":
            alpha, beta = _sched(cfg.td_alpha, cfg.alpha), None
        elif algo == "rg":
            alpha, beta = _sched(cfg.rg_alpha, cfg.alpha), None
        else:
            alpha, beta = _sched(cfg.gtd_alpha, cfg.alpha), _sched(cfg.gtd_beta, cfg.beta)
        stream = _stream(env, rng, double=(algo == "rg"))
        res = bl.run_linear(algo, stream, g, k, cfg.iters, alpha, beta, lam, cfg.record_every,
                            z0=_vector(cfg.z0, k))
        return _baseline_trace(res, metrics)
    return run


def _run_ls(algo: str):
    def run(env, cfg: ExperimentConfig, rng, metrics: Metrics) -> TrialTrace:
        if _is_nonlinear(env):
            raise ConfigError(f"{algo} needs linear features")
        res = bl.run_least_squares(algo, _stream(env, rng), _gamma(env), _param_dim(env),
                                   cfg.iters, cfg.ls_lambda, cfg.ls_epsilon, cfg.record_every)
        return _baseline_trace(res, metrics)
    return run


ALGORITHMS: Dict[str, Callable] = {
    "sce-mspbem": _run_sce("mspbe"),
    "sce-msbrm": _run_sce("msbr"),
    "td0": _run_linear("td"),
    "td-lambda": _run_linear("td", lam_from_cfg=True),
    "rg": _run_linear("rg"),
    "gtd2": _run_linear("gtd2"),
    "tdc": _run_linear("tdc"),
    "lstd": _run_ls("lstd"),
    "lspe": _run_ls("lspe"),
}


def build_env(cfg: ExperimentConfig):
    kw = {}
    if cfg.env.startswith("random"):
        for key, name in (("env_states", "n_states"), ("env_features", "k"),
                          ("env_seed", "seed")):
            if getattr(cfg, key) is not None:
                kw[name] = getattr(cfg, key)
    if cfg.gamma is not None:
        if cfg.env in ("vanroy", "baird-nl", "ring10-nl", "cartpole", "pendulum5"):
            raise ConfigError(f"{cfg.env} has a fixed discount")
        kw["gamma"] = cfg.gamma
    return make_env(cfg.env, **kw)


def trial_rng(seed: int, trial: int, algo: str) -> np.random.Generator:
    """Independent generator for one (seed, trial, algorithm) triple."""
    return np.random.default_rng(np.random.SeedSequence([seed, trial, zlib.crc32(algo.encode())]))


def run_experiment(cfg: ExperimentConfig, env=None, write: bool = True
                   ) -> Dict[str, List[TrialTrace]]:
    """Run every configured algorithm for ``cfg.trials`` trials.

    Returns traces grouped by algorithm in trial order and, when ``cfg.out``
    is set, writes one CSV per algorithm.
    """
    env = build_env(cfg) if env is None else env
    kinds = "nonlinear" if _is_nonlinear(env) else "linear"
    metrics = Metrics(env, kinds)
    out: Dict[str, List[TrialTrace]] = {}
    for algo in cfg.algos:
        traces = []
        for i in range(cfg.trials):
            if cfg.iters == 0:
                traces.append(TrialTrace(i, np.zeros(0, dtype=np.int64), *[np.zeros(0)] * 6))
                continue
            rng = trial_rng(cfg.seed, i, algo)
            tr = ALGORITHMS[algo](env, cfg, rng, metrics)
            tr.trial = i
            traces.append(tr)
        out[algo] = traces
        if write and cfg.out:
            with open(output_path(cfg.out, algo, len(cfg.algos)), "w", newline="") as fh:
                fh.write(format_csv(traces, cfg, algo))
    return out


def output_path(out: str, algo: str, n_algos: int) -> str:
    if n_algos == 1:
        return out
    stem, dot, ext = out.rpartition(".")
    return f"{stem}.{algo}.{ext}" if dot else f"{out}.{algo}"


def _num(x) -> str:
    return format(float(x), ".17g")


def format_csv(traces: Sequence[TrialTrace], cfg: Optional[ExperimentConfig] = None,
               algo: Optional[str] = None) -> str:
    """Per-record rows grouped by trial; provenance as leading ``#`` lines."""
    buf = io.StringIO()
    if cfg is not None:
        buf.write(f"# algo={algo}\n")
        for line in cfg.provenance():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for tr in sorted(traces, key=lambda x: x.trial):
        for j in range(len(tr)):
            w.writerow([tr.trial, int(tr.t[j]), _num(tr.sqrt_mse[j]), _num(tr.sqrt_mspbe[j]),
                        _num(tr.gamma_p[j]), _num(tr.sigma_fro[j]), _num(tr.T[j]),
                        int(bool(tr.diverged[j]))])
    return buf.getvalue()


def format_average_csv(avg: AveragedTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["t"] + [f"mean_{n}" for n in AVERAGED] + ["var_sqrt_mse", "n_diverged"]
    w.writerow(cols)
    for j in range(len(avg.t)):
        w.writerow([int(avg.t[j])] + [_num(avg.mean[n][j]) for n in AVERAGED]
                   + [_num(avg.var["sqrt_mse"][j]), int(avg.n_diverged[j])])
    return buf.getvalue()


def read_csv(text: str) -> List[dict]:
    rows = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(rows))


NUMERICAL_ERRORS = (DegenerateModelError, NumericalAbort, FloatingPointError,
                    bl.LeastSquaresError)
