"""Stochastic-approximation cross-entropy optimizer over a Gaussian model.

The public functions below implement one recursion each and are written for
clarity. :func:`run_ce` composes them into the full loop. The ``_nb_*``
functions are numba-compiled equivalents used by the fast algorithm kernels;
the test suite checks that both routes agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

EXP_CLAMP = 500.0
JITTER_REL = 1e-10
JITTER_DOUBLINGS = 8
CONVERGED_SIGMA = 1e-12


class DegenerateModelError(FloatingPointError):
    """The covariance could not be factored even after maximal jitter."""


@dataclass(frozen=True)
class StepSchedule:
    """Learning-rate schedule ``scale * t^-exponent`` or a constant."""

    kind: str = "constant"
    value: float = 0.01
    exponent: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not self.value > 0:
            raise ValueError("constant step must be positive")
        if self.kind == "power" and not (self.scale > 0 and self.exponent >= 0):
            raise ValueError("power schedule needs scale > 0 and exponent >= 0")

    @classmethod
    def constant(cls, value: float) -> "StepSchedule":
        return cls("constant", value=float(value))

    @classmethod
    def power(cls, exponent: float, scale: float = 1.0) -> "StepSchedule":
        return cls("power", exponent=float(exponent), scale=float(scale))

    @classmethod
    def parse(cls, text) -> "StepSchedule":
        """Parse ``"0.05"``, ``"t^-0.6"``, ``"1/t"`` or ``"2*t^-1"``."""
        if isinstance(text, StepSchedule):
            return text
        if isinstance(text, (int, float)):
            return cls.constant(text)
        s = str(text).replace(" ", "").lower()
        if s == "1/t":
            return cls.power(1.0)
        if "t^" in s:
            head, _, expo = s.partition("t^")
            scale = float(head.rstrip("*")) if head.rstrip("*") else 1.0
            return cls.power(-float(expo), scale)
        return cls.constant(float(s))

    def __call__(self, t) -> np.ndarray:
        return self.evaluate(t)

    def evaluate(self, t):
        """Step size at iteration ``t >= 1`` (scalar or array)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full(t.shape, self.value)
        else:
            out = np.minimum(self.scale * np.maximum(t, 1.0) ** (-self.exponent), 1.0)
        return float(out) if out.ndim == 0 else out

    def __str__(self):
        if self.kind == "constant":
            return repr(self.value)
        prefix = "" if self.scale == 1.0 else f"{self.scale!r}*"
        return f"{prefix}t^-{self.exponent!r}"


def check_learning_rates(alpha: StepSchedule, beta: StepSchedule):
    """Check the two-timescale conditions for the built-in schedule families.

    Returns ``(ok, note)``. Constant steps are accepted in constant-step
    mode, where the convergence conditions are waived.
    """
    if alpha.kind == "constant" or beta.kind == "constant":
        return True, "constant-step mode, theory conditions waived"
    notes = []
    for name, sch in (("alpha", alpha), ("beta", beta)):
        if not 0.5 < sch.exponent <= 1.0:
            notes.append(f"{name} exponent must lie in (0.5, 1]")
    if not alpha.exponent > beta.exponent:
        notes.append("alpha must decay faster than beta")
    return (not notes), "; ".join(notes) or "ok"


@dataclass(frozen=True)
class CeConfig:
    """Constants of the optimizer.

    ``c`` is the initial gain of the threshold comparison. When
    ``c_decay`` is set, the gain is multiplied by it at every model update.
    """

    rho: float = 0.1
    lambda_mix: float = 0.01
    epsilon1: float = 0.8
    r_shape: float = 1e-6
    c: float = 0.01
    c_decay: Optional[float] = None
    step_alpha: StepSchedule = field(default_factory=lambda: StepSchedule.constant(0.001))
    step_beta: StepSchedule = field(default_factory=lambda: StepSchedule.constant(0.05))

    def __post_init__(self):
        for name in ("rho", "lambda_mix", "epsilon1", "c"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.r_shape > 0:
            raise ValueError("r_shape must be positive")
        if self.c_decay is not None and not 0.0 < self.c_decay <= 1.0:
            raise ValueError("c_decay must lie in (0, 1]")
        object.__setattr__(self, "step_alpha", StepSchedule.parse(self.step_alpha))
        object.__setattr__(self, "step_beta", StepSchedule.parse(self.step_beta))

    @property
    def c_factor(self) -> float:
        return 1.0 if self.c_decay is None else float(self.c_decay)


@dataclass(frozen=True)
class GaussianModel:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.array(self.mu, dtype=float))
        sigma = np.atleast_2d(np.array(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("sigma must be k x k for a k-vector mu")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))

    @classmethod
    def isotropic(cls, mu, variance: float) -> "GaussianModel":
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return cls(mu, variance * np.eye(mu.size))

    @property
    def dim(self) -> int:
        return self.mu.size

    def factor(self) -> np.ndarray:
        return factor_covariance(self.sigma)

    def is_degenerate(self, tol: float = CONVERGED_SIGMA) -> bool:
        return bool(np.linalg.eigvalsh(self.sigma).max() < tol)


@dataclass(frozen=True)
class CeState:
    theta: GaussianModel
    theta_prev: Optional[GaussianModel] = None
    gamma_t: float = 0.0
    gamma_prev: float = -np.inf
    xi0: Optional[np.ndarray] = None
    xi1: Optional[np.ndarray] = None
    T: float = 0.0
    c: float = 0.01
    t: int = 0
    n_updates: int = 0

    @classmethod
    def initial(cls, theta0: GaussianModel, cfg: CeConfig) -> "CeState":
        k = theta0.dim
        return cls(theta=theta0, xi0=np.zeros(k), xi1=np.zeros((k, k)), c=cfg.c)


def factor_covariance(sigma) -> np.ndarray:
    """Lower Cholesky factor of ``sigma`` with escalating diagonal jitter."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    k = sigma.shape[0]
    jit = max(JITTER_REL * np.trace(sigma) / k, 1e-300)
    eye = np.eye(k)
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(sigma + jit * eye)
        except np.linalg.LinAlgError:
            jit *= 2.0
    raise DegenerateModelError("covariance factorization failed after maximal jitter")


def shape_s(x, r: float):
    """``exp(r x)`` with the exponent clamped to +-500."""
    return np.exp(np.clip(r * np.asarray(x, dtype=float), -EXP_CLAMP, EXP_CLAMP))


def g0(h: float, gamma: float, r: float) -> float:
    return float(shape_s(h, r)) if h >= gamma else 0.0


def g1(h: float, x, gamma: float, r: float) -> np.ndarray:
    return g0(h, gamma, r) * np.asarray(x, dtype=float)


def g2(h: float, x, gamma: float, mu, r: float) -> np.ndarray:
    d = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    return g0(h, gamma, r) * np.outer(d, d)


def sample_mixture(theta: GaussianModel, theta0: GaussianModel, lambda_mix: float,
                   rng: np.random.Generator) -> np.ndarray:
    """One draw from ``(1 - lambda) N(theta) + lambda N(theta0)``."""
    coin = rng.random()
    noise = rng.standard_normal(theta.dim)
    return mixture_from_noise(theta, theta0, lambda_mix, coin, noise)


def mixture_from_noise(theta, theta0, lambda_mix, coin, noise, factors=None):
    """Mixture draw from a uniform ``coin`` and a standard normal ``noise``."""
    src = theta0 if coin < lambda_mix else theta
    if factors is not None:
        L = factors[0] if coin < lambda_mix else factors[1]
    else:
        L = src.factor()
    return src.mu + L @ noise


def quantile_increment(h: float, gamma: float, rho: float) -> float:
    return -(1.0 - rho) * (h >= gamma) + rho * (h <= gamma)


def update_quantile(gamma_t: float, h_val: float, rho: float, beta_t: float) -> float:
    """Stochastic step toward the (1 - rho)-quantile of ``h``."""
    return gamma_t - beta_t * quantile_increment(h_val, gamma_t, rho)


def update_xi0(xi0, z, h_val, gamma_t, beta_t, r):
    w = g0(h_val, gamma_t, r)
    xi0 = np.asarray(xi0, dtype=float)
    return xi0 + beta_t * (w * np.asarray(z, dtype=float) - xi0 * w)


def update_xi1(xi1, z, h_val, gamma_t, xi0, beta_t, r):
    w = g0(h_val, gamma_t, r)
    xi1 = np.asarray(xi1, dtype=float)
    d = np.asarray(z, dtype=float) - np.asarray(xi0, dtype=float)
    out = xi1 + beta_t * (w * np.outer(d, d) - xi1 * w)
    return 0.5 * (out + out.T)


def update_threshold_tracker(T: float, gamma_t1: float, gamma_prev_t1: float, c: float) -> float:
    up = 1.0 if gamma_t1 > gamma_prev_t1 else 0.0
    return T + c * (up - (1.0 - up) - T)


def maybe_update_model(state: CeState, cfg: CeConfig, alpha_t: float,
                       xi0=None, xi1=None, gamma_before=None) -> CeState:
    """Blend the model toward the tracked elite statistics once T exceeds epsilon1.

    ``xi0``/``xi1`` default to the state's trackers and ``gamma_before`` to
    ``state.gamma_t``; the loop passes the values from before the current
    iteration's tracker updates.
    """
    if state.T <= cfg.epsilon1:
        return state
    xi0 = state.xi0 if xi0 is None else xi0
    xi1 = state.xi1 if xi1 is None else xi1
    g_old = state.gamma_t if gamma_before is None else gamma_before
    th = state.theta
    mu = th.mu + alpha_t * (xi0 - th.mu)
    sig = th.sigma + alpha_t * (xi1 - th.sigma)
    return replace(
        state,
        theta_prev=th,
        gamma_prev=g_old,
        theta=GaussianModel(mu, sig),
        T=0.0,
        c=state.c * cfg.c_factor,
        n_updates=state.n_updates + 1,
    )


@dataclass
class CeTrace:
    t: np.ndarray
    mu: np.ndarray
    sigma_fro: np.ndarray
    gamma: np.ndarray
    gamma_prev: np.ndarray
    T: np.ndarray
    n_updates: np.ndarray
    final: CeState = None
    converged: bool = False


def draw_ce_noise(rng: np.random.Generator, size: int, k: int):
    """Random inputs consumed by ``size`` optimizer iterations."""
    return (rng.random(size), rng.standard_normal((size, k)),
            rng.random(size), rng.standard_normal((size, k)))


class DeterministicObjective:
    """Wrap a plain function ``H(z)`` as an objective without statistics."""

    def __init__(self, fn, dim: int):
        self.fn = fn
        self.dim = dim

    def begin_chunk(self, size, rng):
        pass

    def value(self, z) -> float:
        return float(self.fn(np.asarray(z, dtype=float)))

    def advance(self, j: int, t: int):
        pass


def ce_iteration(state: CeState, cfg: CeConfig, theta0: GaussianModel, objective,
                 noise, alpha_t: float, beta_t: float, j: int = 0, factors=None) -> CeState:
    """One full optimizer iteration from pre-drawn ``noise``.

    The objective is evaluated with the statistics of the previous step, then
    its statistics are advanced, then the quantile, elite and threshold
    trackers move and the model is updated when warranted.
    """
    coin, nz, coinp, nzp = noise
    L0 = factors[0] if factors else theta0.factor()
    L = factors[1] if factors else state.theta.factor()
    z = mixture_from_noise(state.theta, theta0, cfg.lambda_mix, coin, nz, (L0, L))
    h = objective.value(z)
    hp = None
    if state.theta_prev is not None:
        Lp = factors[2] if factors else state.theta_prev.factor()
        zp = mixture_from_noise(state.theta_prev, theta0, cfg.lambda_mix, coinp, nzp, (L0, Lp))
        hp = objective.value(zp)
    objective.advance(j, state.t + 1)

    g_old = state.gamma_t
    gamma = update_quantile(g_old, h, cfg.rho, beta_t)
    xi0 = update_xi0(state.xi0, z, h, g_old, beta_t, cfg.r_shape)
    xi1 = update_xi1(state.xi1, z, h, g_old, state.xi0, beta_t, cfg.r_shape)
    gp = state.gamma_prev
    if hp is not None:
        gp = update_quantile(gp, hp, cfg.rho, beta_t)
    T = update_threshold_tracker(state.T, gamma, gp, state.c)
    new = replace(state, gamma_t=gamma, gamma_prev=gp, xi0=xi0, xi1=xi1, T=T, t=state.t + 1)
    return maybe_update_model(new, cfg, alpha_t, xi0=state.xi0, xi1=state.xi1,
                              gamma_before=g_old)


def run_ce(objective, cfg: CeConfig, theta0: GaussianModel, iters: int,
           rng: np.random.Generator, record_every: int = 100, chunk: int = 10_000,
           state: Optional[CeState] = None) -> CeTrace:
    """Run the optimizer for ``iters`` iterations and return a sampled trace.

    ``objective`` exposes ``value(z)``, ``advance(j, t)`` (statistics update
    for sample ``j`` of the current chunk at global step ``t``) and
    ``begin_chunk(size, rng)``. A :class:`DeterministicObjective` reduces this
    to the plain CE method on a fixed function.
    """
    state = state or CeState.initial(theta0, cfg)
    k = theta0.dim
    rec = _Recorder(k)
    rec.add(state)
    L0 = theta0.factor()
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        objective.begin_chunk(m, rng)
        noise = draw_ce_noise(rng, m, k)
        ts = np.arange(state.t + 1, state.t + m + 1)
        alphas = cfg.step_alpha.evaluate(ts)
        betas = cfg.step_beta.evaluate(ts)
        L = state.theta.factor()
        Lp = state.theta_prev.factor() if state.theta_prev is not None else None
        for j in range(m):
            prev_theta, prev_p = state.theta, state.theta_prev
            state = ce_iteration(state, cfg, theta0, objective,
                                 (noise[0][j], noise[1][j], noise[2][j], noise[3][j]),
                                 alphas[j], betas[j], j, (L0, L, Lp))
            if state.theta is not prev_theta:
                L = state.theta.factor()
            if state.theta_prev is not prev_p:
                Lp = state.theta_prev.factor()
            if state.t % record_every == 0:
                rec.add(state)
        done += m
    return rec.finish(state)


class _Recorder:
    def __init__(self, k):
        self.rows = []
        self.k = k

    def add(self, st: CeState):
        self.rows.append((st.t, st.theta.mu.copy(), float(np.linalg.norm(st.theta.sigma)),
                          st.gamma_t, st.gamma_prev, st.T, st.n_updates))

    def finish(self, st: CeState) -> CeTrace:
        cols = list(zip(*self.rows))
        return CeTrace(
            t=np.array(cols[0], dtype=np.int64), mu=np.array(cols[1]),
            sigma_fro=np.array(cols[2]), gamma=np.array(cols[3]),
            gamma_prev=np.array(cols[4]), T=np.array(cols[5]),
            n_updates=np.array(cols[6], dtype=np.int64), final=st,
            converged=st.theta.is_degenerate(),
        )


# --- compiled building blocks -------------------------------------------------
# Scalar optimizer state is packed into one float array:
ST_GAMMA, ST_GAMMA_P, ST_T, ST_HAS_PREV, ST_C, ST_UPDATES, ST_T_COUNT = range(7)
STATE_LEN = 7


@numba.njit(cache=True)
def _nb_factor(sig, out):
    k = sig.shape[0]
    tr = 0.0
    for i in range(k):
        tr += sig[i, i]
    jit = max(JITTER_REL * tr / k, 1e-300)
    work = np.empty((k, k))
    for _ in range(JITTER_DOUBLINGS + 1):
        for i in range(k):
            for j in range(k):
                work[i, j] = sig[i, j]
            work[i, i] += jit
        ok = True
        # in-place Cholesky, lower triangle
        for j in range(k):
            d = work[j, j]
            for p in range(j):
                d -= work[j, p] * work[j, p]
            if not d > 0.0:
                ok = False
                break
            d = np.sqrt(d)
            work[j, j] = d
            for i in range(j + 1, k):
                v = work[i, j]
                for p in range(j):
                    v -= work[i, p] * work[j, p]
                work[i, j] = v / d
        if ok:
            for i in range(k):
                for j in range(k):
                    out[i, j] = work[i, j] if j <= i else 0.0
            return True
        jit *= 2.0
    return False


@numba.njit(cache=True)
def _nb_draw(out, coin, lam, mu0, L0, mu, L, noise):
    k = out.shape[0]
    if coin < lam:
        m, F = mu0, L0
    else:
        m, F = mu, L
    for i in range(k):
        v = m[i]
        for j in range(i + 1):
            v += F[i, j] * noise[j]
        out[i] = v


@numba.njit(cache=True)
def _nb_quantile(g, h, beta, rho):
    """Scalar quantile step, the compiled twin of :func:`update_quantile`."""
    up = 1.0 if h >= g else 0.0
    dn = 1.0 if h <= g else 0.0
    return g - beta * (-(1.0 - rho) * up + rho * dn)


@numba.njit(cache=True)
def _nb_elite_step(z, h, r, beta, xi0, xi1):
    """Elite-weighted mean and covariance step for a sample with ``h >= gamma``.

    ``xi1`` is centred on the value of ``xi0`` before this step.
    """
    k = z.shape[0]
    w = np.exp(min(max(r * h, -EXP_CLAMP), EXP_CLAMP))
    for i in range(k):
        di = z[i] - xi0[i]
        for j in range(k):
            xi1[i, j] += beta * (w * di * (z[j] - xi0[j]) - xi1[i, j] * w)
    for i in range(k):
        xi0[i] += beta * (w * z[i] - xi0[i] * w)
    for i in range(k):
        for j in range(i + 1, k):
            s = 0.5 * (xi1[i, j] + xi1[j, i])
            xi1[i, j] = s
            xi1[j, i] = s


@numba.njit(cache=True)
def _nb_model_update(st, g_old, alpha, eps1, c_factor, mu, sig, L, mu_p, L_p,
                     xi0_old, xi1_old):
    """Save, blend and reset when T exceeds eps1. Returns 1 on update, -1 on failure."""
    if not st[ST_T] > eps1:
        return 0
    k = mu.shape[0]
    st[ST_GAMMA_P] = g_old
    for i in range(k):
        mu_p[i] = mu[i]
        for j in range(k):
            L_p[i, j] = L[i, j]
    st[ST_HAS_PREV] = 1.0
    for i in range(k):
        mu[i] += alpha * (xi0_old[i] - mu[i])
        for j in range(k):
            sig[i, j] += alpha * (xi1_old[i, j] - sig[i, j])
    for i in range(k):
        for j in range(i + 1, k):
            s = 0.5 * (sig[i, j] + sig[j, i])
            sig[i, j] = s
            sig[j, i] = s
    st[ST_T] = 0.0
    st[ST_C] *= c_factor
    st[ST_UPDATES] += 1.0
    if not _nb_factor(sig, L):
        return -1
    return 1


@numba.njit(cache=True)
def _nb_record(rec, row, t, st, mu, sig):
    k = mu.shape[0]
    rec[row, 0] = t
    s = 0.0
    for i in range(k):
        for j in range(k):
            s += sig[i, j] * sig[i, j]
    rec[row, 1] = np.sqrt(s)
    rec[row, 2] = st[ST_GAMMA]
    rec[row, 3] = st[ST_GAMMA_P]
    rec[row, 4] = st[ST_T]
    rec[row, 5] = st[ST_UPDATES]
    for i in range(k):
        rec[row, 6 + i] = mu[i]
