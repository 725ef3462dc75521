"""Online estimators of MSPBE and MSBR and the two cross-entropy learners.

The trackers keep running averages of parameter-free statistics so that the
objective of any candidate weight vector can be evaluated in O(k^2) without
touching the model. :func:`run_sce_mspbem` and :func:`run_sce_msbrm` couple
them with the optimizer in :mod:`cemtd.ce`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from . import ce
from .ce import (ST_C, ST_GAMMA, ST_GAMMA_P, ST_HAS_PREV, ST_T, ST_UPDATES, STATE_LEN,
                 CeConfig, CeState, GaussianModel)

STABILITY_CEILING = 1e6


class NumericalAbort(FloatingPointError):
    """A tracker left the configured stability ceiling."""


# --- trackers -----------------------------------------------------------------

@dataclass(frozen=True)
class MspbeTracker:
    w0: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "MspbeTracker":
        return cls(np.zeros(k), np.zeros((k, k)), np.zeros((k, k)))

    def max_abs(self) -> float:
        return float(max(np.abs(self.w0).max(), np.abs(self.w1).max(), np.abs(self.w2).max()))


@dataclass(frozen=True)
class MsbrTracker:
    u0: float
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "MsbrTracker":
        return cls(0.0, np.zeros((k, k)), np.zeros(k), np.zeros((k, k)))

    def max_abs(self) -> float:
        return float(max(abs(self.u0), np.abs(self.u1).max(), np.abs(self.u2).max(),
                         np.abs(self.u3).max()))


@dataclass(frozen=True)
class NlMsbrTracker:
    u: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))


def mspbe_tracker_step(w: MspbeTracker, phi, r, phi_next, gamma, alpha_t) -> MspbeTracker:
    """One stochastic step of the MSPBE statistics."""
    phi = np.asarray(phi, dtype=float)
    phi_next = np.asarray(phi_next, dtype=float)
    k = phi.size
    w0 = w.w0 + alpha_t * (r * phi - w.w0)
    w1 = w.w1 + alpha_t * (np.outer(phi, gamma * phi_next - phi) - w.w1)
    w2 = w.w2 + alpha_t * (np.eye(k) - np.outer(phi, phi @ w.w2))
    return MspbeTracker(w0, w1, w2)


def jp_estimate(w: MspbeTracker, z) -> float:
    """Negated MSPBE estimate ``-(w0 + w1 z)^T w2 (w0 + w1 z)``."""
    v = w.w0 + w.w1 @ np.asarray(z, dtype=float)
    return -float(v @ w.w2 @ v)


def msbr_tracker_step(u: MsbrTracker, phi, r, r2, phi_next, phi_next2, gamma,
                      alpha_t) -> MsbrTracker:
    """One step of the MSBR statistics from a double-sampled transition.

    Products of two conditional expectations pair quantities taken from the
    two independent successors, which keeps every increment unbiased.
    """
    phi = np.asarray(phi, dtype=float)
    f1 = np.asarray(phi_next, dtype=float)
    f2 = np.asarray(phi_next2, dtype=float)
    u0 = u.u0 + alpha_t * (r * r2 - u.u0)
    u1 = u.u1 + alpha_t * (gamma * gamma * np.outer(f1, f2) - u.u1)
    u2 = u.u2 + alpha_t * (r * (gamma * f2 - phi) - u.u2)
    u3 = u.u3 + alpha_t * (np.outer(phi - 2.0 * gamma * f1, phi) - u.u3)
    return MsbrTracker(float(u0), u1, u2, u3)


def jb_estimate(u: MsbrTracker, z) -> float:
    """Negated MSBR estimate ``-(u0 + z^T (u1 + u3) z + 2 z^T u2)``."""
    z = np.asarray(z, dtype=float)
    return -float(u.u0 + z @ (u.u1 + u.u3) @ z + 2.0 * z @ u.u2)


def nl_increments(r, s, s_next, a, b, gamma):
    """``[r, gamma a(s') - a(s), gamma b(s') - b(s)]`` for index arrays or scalars."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.stack([np.asarray(r, dtype=float),
                     gamma * a[s_next] - a[s],
                     gamma * b[s_next] - b[s]], axis=-1)


def nl_msbr_tracker_step(u: NlMsbrTracker, r, r2, s, s_next, s_next2, a, b, gamma,
                         alpha_t) -> NlMsbrTracker:
    """One step of the 3x3 statistics for the spiral value family."""
    h = nl_increments(r, s, s_next, a, b, gamma)
    h2 = nl_increments(r2, s, s_next2, a, b, gamma)
    return NlMsbrTracker(u.u + alpha_t * (np.outer(h, h2) - u.u))


def spiral_coordinates(eta, tau=0.01, eps=0.001):
    """``e^{eps eta} (cos(tau eta), -sin(tau eta))``, the weights on (a, b)."""
    eta = np.asarray(eta, dtype=float)
    e = np.exp(eps * eta)
    return np.stack([e * np.cos(tau * eta), -e * np.sin(tau * eta)], axis=-1)


def nl_msbr_value(u, eta, tau=0.01, eps=0.001) -> float:
    """Residual ``u11 + 2 [u21, u31] y + y^T u[1:, 1:] y`` with spiral coordinates ``y``."""
    u = u.u if isinstance(u, NlMsbrTracker) else np.asarray(u, dtype=float)
    y = spiral_coordinates(float(np.ravel(eta)[0]) if np.ndim(eta) else eta, tau, eps)
    return float(u[0, 0] + 2.0 * (u[1, 0] * y[0] + u[2, 0] * y[1]) + y @ u[1:, 1:] @ y)


def nl_jb_estimate(u, eta, tau=0.01, eps=0.001) -> float:
    """Negated residual, so that larger is better for the optimizer."""
    return -nl_msbr_value(u, eta, tau, eps)


def exact_nl_moments(mdp, a, b) -> np.ndarray:
    """``E_nu[E[h|s] E[h'|s]^T]`` for the 3x3 spiral statistics."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    g = mdp.gamma
    rbar = np.einsum("ij,ij->i", mdp.P, mdp.reward)
    hbar = np.stack([rbar, g * mdp.P @ a - a, g * mdp.P @ b - b], axis=1)
    return (hbar.T * mdp.nu[None, :]) @ hbar


def feature_warp(z, kappa):
    """Elementwise ``cos(z)^2 exp(kappa z)``."""
    z = np.asarray(z, dtype=float)
    return np.cos(z) ** 2 * np.exp(kappa * z)


# --- adapters for the reference loop ------------------------------------------

class _StreamObjective:
    """Couples a transition stream and a tracker for :func:`ce.run_ce`."""

    def __init__(self, stream, ceiling):
        self.stream = stream
        self.batch = None
        self.ceiling = ceiling

    def begin_chunk(self, size, rng):
        self.batch = self.stream.next(size)
        self.alphas = self.alpha_schedule.evaluate(np.arange(self.t0 + 1, self.t0 + size + 1))
        self.t0 += size

    def _check(self, size):
        if not size <= self.ceiling:
            raise NumericalAbort("statistics tracker exceeded the stability ceiling")


class MspbeObjective(_StreamObjective):
    def __init__(self, stream, gamma, k, alpha_schedule, ceiling=STABILITY_CEILING):
        super().__init__(stream, ceiling)
        self.tracker = MspbeTracker.zeros(k)
        self.gamma = gamma
        self.alpha_schedule = alpha_schedule
        self.t0 = 0

    def value(self, z):
        return jp_estimate(self.tracker, z)

    def advance(self, j, t):
        b = self.batch
        self.tracker = mspbe_tracker_step(self.tracker, b.phi[j], b.r[j], b.phi_next[j],
                                          self.gamma, self.alphas[j])
        self._check(self.tracker.max_abs())


class MsbrObjective(_StreamObjective):
    def __init__(self, stream, gamma, k, alpha_schedule, warp=None,
                 ceiling=STABILITY_CEILING):
        super().__init__(stream, ceiling)
        self.tracker = MsbrTracker.zeros(k)
        self.gamma = gamma
        self.alpha_schedule = alpha_schedule
        self.warp = warp
        self.t0 = 0

    def value(self, z):
        y = z if self.warp is None else feature_warp(z, self.warp)
        return jb_estimate(self.tracker, y)

    def advance(self, j, t):
        b = self.batch
        self.tracker = msbr_tracker_step(self.tracker, b.phi[j], b.r[j], b.r2[j],
                                         b.phi_next[j], b.phi_next2[j], self.gamma,
                                         self.alphas[j])
        self._check(self.tracker.max_abs())


class SpiralObjective(_StreamObjective):
    def __init__(self, stream, gamma, a, b, tau, eps, alpha_schedule,
                 ceiling=STABILITY_CEILING):
        super().__init__(stream, ceiling)
        self.tracker = NlMsbrTracker()
        self.gamma = gamma
        self.a, self.b, self.tau, self.eps = a, b, tau, eps
        self.alpha_schedule = alpha_schedule
        self.t0 = 0

    def value(self, z):
        return nl_jb_estimate(self.tracker, z[0], self.tau, self.eps)

    def advance(self, j, t):
        bt = self.batch
        self.tracker = nl_msbr_tracker_step(
            self.tracker, bt.r[j], bt.r2[j], bt.s[j], bt.s_next[j], bt.s_next2[j],
            self.a, self.b, self.gamma, self.alphas[j])
        self._check(float(np.abs(self.tracker.u).max()))


# --- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _spiral(u, eta, tau, eps):
    e = np.exp(eps * eta)
    y0 = e * np.cos(tau * eta)
    y1 = -e * np.sin(tau * eta)
    val = u[0, 0] + 2.0 * (u[1, 0] * y0 + u[2, 0] * y1)
    val += y0 * (u[1, 1] * y0 + u[1, 2] * y1) + y1 * (u[2, 1] * y0 + u[2, 2] * y1)
    return -val


@numba.njit(cache=True)
def _kernel(kind, t0, every, F, Fn, Fn2, rw, rw2, gamma, alphas, betas, coin, nz, coinp,
            nzp, params, st, mu, sig, L, mu0, L0, mu_p, L_p, xi0, xi1, T0, T1, T2, T3,
            s0, rec, ceiling):
    """Optimizer loop over one block of transitions.

    ``kind`` 0: MSPBE statistics ``(T0, T1, T2) = (w0, w1, w2)``.
    ``kind`` 1: MSBR statistics ``(s0[0], T1, T0, T3) = (u0, u1, u2, u3)``,
    evaluated at ``z`` or at its warp when ``params[5] != 0``.
    ``kind`` 2: 3x3 spiral statistics in ``T1``; ``F`` holds ``h`` and
    ``Fn`` holds ``h'``.
    Returns ``(records written, status)`` with status 0 ok, 1 ceiling, 2 factorization.

    Calls into other compiled functions cost far more than the arithmetic at
    small ``k``, so the per-iteration path (current-model draws, objective
    evaluation, statistics, quantile and threshold steps) is written inline.
    Only the rare branches call helpers.
    """
    m = rw.shape[0]
    k = mu.shape[0]
    rho, lam, eps1, r, c_factor, kappa = params[0], params[1], params[2], params[3], params[4], params[5]
    tau, epsn = params[6], params[7]
    n = T0.shape[0]
    z = np.empty(k)
    zp = np.empty(k)
    y = np.empty(k)
    v = np.empty(n)
    tmp = np.empty(n)
    xi0_old = np.empty(k)
    xi1_old = np.empty((k, k))
    nrec = 0
    for j in range(m):
        has_prev = st[ST_HAS_PREV] > 0.0
        ncand = 2 if has_prev else 1
        # candidates: z from the current model, zp from the saved one
        for c in range(ncand):
            out = z if c == 0 else zp
            cj = coin[j] if c == 0 else coinp[j]
            noise = nz[j] if c == 0 else nzp[j]
            if cj < lam:
                ce._nb_draw(out, cj, lam, mu0, L0, mu0, L0, noise)
            elif c == 0:
                for i in range(k):
                    s = mu[i]
                    for q in range(i + 1):
                        s += L[i, q] * noise[q]
                    out[i] = s
            else:
                for i in range(k):
                    s = mu_p[i]
                    for q in range(i + 1):
                        s += L_p[i, q] * noise[q]
                    out[i] = s
        # objective of each candidate under the statistics of the previous step
        h = 0.0
        hp = 0.0
        for c in range(ncand):
            x = z if c == 0 else zp
            if kind == 0:
                for i in range(k):
                    s = T0[i]
                    for q in range(k):
                        s += T1[i, q] * x[q]
                    v[i] = s
                val = 0.0
                for i in range(k):
                    s = 0.0
                    for q in range(k):
                        s += T2[i, q] * v[q]
                    val += v[i] * s
                val = -val
            elif kind == 1:
                if kappa != 0.0:
                    for i in range(k):
                        cz = np.cos(x[i])
                        y[i] = cz * cz * np.exp(kappa * x[i])
                else:
                    for i in range(k):
                        y[i] = x[i]
                val = s0[0]
                for i in range(k):
                    s = 0.0
                    for q in range(k):
                        s += (T1[i, q] + T3[i, q]) * y[q]
                    val += y[i] * s + 2.0 * y[i] * T0[i]
                val = -val
            else:
                val = _spiral(T1, x[0], tau, epsn)
            if c == 0:
                h = val
            else:
                hp = val
        a = alphas[j]
        if kind == 0:
            f = F[j]
            fn = Fn[j]
            rr = rw[j]
            for i in range(n):
                s = 0.0
                for q in range(n):
                    s += f[q] * T2[q, i]
                tmp[i] = s
            for i in range(n):
                T0[i] += a * (rr * f[i] - T0[i])
                for q in range(n):
                    T1[i, q] += a * (f[i] * (gamma * fn[q] - f[q]) - T1[i, q])
                    T2[i, q] += a * ((1.0 if i == q else 0.0) - f[i] * tmp[q])
        elif kind == 1:
            f = F[j]
            f1 = Fn[j]
            f2 = Fn2[j]
            s0[0] += a * (rw[j] * rw2[j] - s0[0])
            for i in range(n):
                T0[i] += a * (rw[j] * (gamma * f2[i] - f[i]) - T0[i])
                for q in range(n):
                    T1[i, q] += a * (gamma * gamma * f1[i] * f2[q] - T1[i, q])
                    T3[i, q] += a * ((f[i] - 2.0 * gamma * f1[i]) * f[q] - T3[i, q])
        else:
            hv = F[j]
            hv2 = Fn[j]
            for i in range(3):
                for q in range(3):
                    T1[i, q] += a * (hv[i] * hv2[q] - T1[i, q])
        # quantile, threshold and elite trackers
        beta = betas[j]
        g_old = st[ST_GAMMA]
        st[ST_GAMMA] = ce._nb_quantile(g_old, h, beta, rho)
        if has_prev:
            st[ST_GAMMA_P] = ce._nb_quantile(st[ST_GAMMA_P], hp, beta, rho)
        cmp = 1.0 if st[ST_GAMMA] > st[ST_GAMMA_P] else -1.0
        st[ST_T] = st[ST_T] + st[ST_C] * (cmp - st[ST_T])
        fire = st[ST_T] > eps1
        if fire:
            for i in range(k):
                xi0_old[i] = xi0[i]
                for q in range(k):
                    xi1_old[i, q] = xi1[i, q]
        if h >= g_old:
            ce._nb_elite_step(z, h, r, beta, xi0, xi1)
        if fire:
            status = ce._nb_model_update(st, g_old, a, eps1, c_factor, mu, sig, L, mu_p, L_p,
                                         xi0_old, xi1_old)
            if status < 0:
                return nrec, 2
        t = t0 + j + 1
        if t % every == 0:
            bad = np.abs(s0[0]) > ceiling
            for i in range(n):
                if not np.abs(T0[i]) <= ceiling:
                    bad = True
            for i in range(T1.shape[0]):
                for q in range(T1.shape[1]):
                    if not (np.abs(T1[i, q]) <= ceiling and np.abs(T2[i, q]) <= ceiling
                            and np.abs(T3[i, q]) <= ceiling):
                        bad = True
            ce._nb_record(rec, nrec, t, st, mu, sig)
            nrec += 1
            if bad:
                return nrec, 1
    return nrec, 0


# --- drivers ------------------------------------------------------------------

@dataclass
class SceResult:
    """Trace of an optimizer run sampled every ``record_every`` iterations."""

    t: np.ndarray
    mu: np.ndarray
    sigma_fro: np.ndarray
    gamma: np.ndarray
    gamma_p: np.ndarray
    T: np.ndarray
    n_updates: np.ndarray
    final_mu: np.ndarray
    final_sigma: np.ndarray
    converged: bool
    aborted: Optional[str] = None
    sqrt_mse: Optional[np.ndarray] = None
    sqrt_mspbe: Optional[np.ndarray] = None


def _setup(cfg: CeConfig, theta0: GaussianModel):
    k = theta0.dim
    st = np.zeros(STATE_LEN)
    st[ST_GAMMA] = 0.0
    st[ST_GAMMA_P] = -np.inf
    st[ST_T] = 0.0
    st[ST_C] = cfg.c
    mu = theta0.mu.copy()
    sig = theta0.sigma.copy()
    L0 = theta0.factor()
    return dict(st=st, mu=mu, sig=sig, L=L0.copy(), mu0=theta0.mu.copy(), L0=L0,
                mu_p=np.zeros(k), L_p=np.zeros((k, k)), xi0=np.zeros(k), xi1=np.zeros((k, k)))


def _run_kernel(kind, stream, gamma, cfg: CeConfig, theta0: GaussianModel, iters, rng,
                record_every, chunk, n_stats, extra, ceiling, prep=None):
    k = theta0.dim
    S = _setup(cfg, theta0)
    T0 = np.zeros(n_stats)
    T1 = np.zeros((n_stats, n_stats))
    T2 = np.zeros((n_stats, n_stats))
    T3 = np.zeros((n_stats, n_stats))
    s0 = np.zeros(1)
    params = np.array([cfg.rho, cfg.lambda_mix, cfg.epsilon1, cfg.r_shape, cfg.c_factor,
                       extra.get("kappa", 0.0), extra.get("tau", 0.0), extra.get("eps", 0.0)])
    rows = [np.concatenate([[0.0, np.linalg.norm(S["sig"]), 0.0, -np.inf, 0.0, 0.0],
                            S["mu"]])]
    aborted = None
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        batch = stream.next(m)
        F, Fn, Fn2, rw, rw2 = prep(batch) if prep else (
            batch.phi, batch.phi_next, batch.phi_next2, batch.r, batch.r2)
        if Fn2 is None:
            Fn2 = Fn
            rw2 = rw
        coin, nz, coinp, nzp = ce.draw_ce_noise(rng, m, k)
        ts = np.arange(done + 1, done + m + 1)
        alphas = np.ascontiguousarray(cfg.step_alpha.evaluate(ts), dtype=float)
        betas = np.ascontiguousarray(cfg.step_beta.evaluate(ts), dtype=float)
        rec = np.zeros((m // record_every + 1, 6 + k))
        n, status = _kernel(kind, done, record_every, np.ascontiguousarray(F, dtype=float),
                            np.ascontiguousarray(Fn, dtype=float),
                            np.ascontiguousarray(Fn2, dtype=float),
                            np.ascontiguousarray(rw, dtype=float),
                            np.ascontiguousarray(rw2, dtype=float), gamma, alphas, betas,
                            coin, nz, coinp, nzp, params, S["st"], S["mu"], S["sig"], S["L"],
                            S["mu0"], S["L0"], S["mu_p"], S["L_p"], S["xi0"], S["xi1"],
                            T0, T1, T2, T3, s0, rec, ceiling)
        rows.extend(rec[:n])
        if status == 1:
            aborted = "statistics tracker exceeded the stability ceiling"
            break
        if status == 2:
            raise ce.DegenerateModelError("covariance factorization failed after maximal jitter")
        done += m
    R = np.array(rows)
    sig = S["sig"]
    return SceResult(
        t=R[:, 0].astype(np.int64), mu=R[:, 6:], sigma_fro=R[:, 1], gamma=R[:, 2],
        gamma_p=R[:, 3], T=R[:, 4], n_updates=R[:, 5].astype(np.int64),
        final_mu=S["mu"].copy(), final_sigma=sig.copy(),
        converged=bool(np.linalg.eigvalsh(sig).max() < ce.CONVERGED_SIGMA), aborted=aborted)


def _from_trace(tr: ce.CeTrace) -> SceResult:
    st = tr.final
    return SceResult(t=tr.t, mu=tr.mu, sigma_fro=tr.sigma_fro, gamma=tr.gamma,
                     gamma_p=tr.gamma_prev, T=tr.T, n_updates=tr.n_updates,
                     final_mu=st.theta.mu.copy(), final_sigma=st.theta.sigma.copy(),
                     converged=tr.converged)


def run_sce_mspbem(stream, gamma: float, cfg: CeConfig, theta0: GaussianModel, iters: int,
                   rng: np.random.Generator, record_every: int = 100, chunk: int = 20_000,
                   fast: bool = True, ceiling: float = STABILITY_CEILING) -> SceResult:
    """Cross-entropy minimization of the projected Bellman error.

    ``stream.next(m)`` must return a :class:`cemtd.mdp.TransitionBatch`.
    ``fast=False`` runs the same recursions through the readable
    step functions (slow, used to cross-check the compiled loop); there a
    tracker beyond ``ceiling`` raises :class:`NumericalAbort` instead of
    ending the run with ``aborted`` set.
    """
    k = theta0.dim
    if not fast:
        obj = MspbeObjective(stream, gamma, k, cfg.step_alpha, ceiling)
        return _from_trace(ce.run_ce(obj, cfg, theta0, iters, rng, record_every, chunk))
    return _run_kernel(0, stream, gamma, cfg, theta0, iters, rng, record_every, chunk, k,
                       {}, ceiling)


def run_sce_msbrm(stream, gamma: float, cfg: CeConfig, theta0: GaussianModel, iters: int,
                  rng: np.random.Generator, record_every: int = 100, chunk: int = 20_000,
                  fast: bool = True, warp: Optional[float] = None,
                  ceiling: float = STABILITY_CEILING) -> SceResult:
    """Cross-entropy minimization of the Bellman residual (double sampling).

    With ``warp`` set, candidates ``z`` are mapped through
    ``cos(z)^2 exp(warp z)`` before the linear residual is evaluated.
    """
    k = theta0.dim
    if not fast:
        obj = MsbrObjective(stream, gamma, k, cfg.step_alpha, warp, ceiling)
        return _from_trace(ce.run_ce(obj, cfg, theta0, iters, rng, record_every, chunk))
    return _run_kernel(1, stream, gamma, cfg, theta0, iters, rng, record_every, chunk, k,
                       {"kappa": float(warp or 0.0)}, ceiling)


def run_sce_spiral(stream, mdp, a, b, cfg: CeConfig, theta0: GaussianModel, iters: int,
                   rng: np.random.Generator, tau: float = 0.01, eps: float = 0.001,
                   record_every: int = 100, chunk: int = 20_000, fast: bool = True,
                   ceiling: float = STABILITY_CEILING) -> SceResult:
    """Residual minimization over the one-parameter spiral family with 3x3 statistics."""
    gamma = mdp.gamma
    if not fast:
        obj = SpiralObjective(stream, gamma, a, b, tau, eps, cfg.step_alpha, ceiling)
        return _from_trace(ce.run_ce(obj, cfg, theta0, iters, rng, record_every, chunk))

    def prep(batch):
        h = nl_increments(batch.r, batch.s, batch.s_next, a, b, gamma)
        h2 = nl_increments(batch.r2, batch.s, batch.s_next2, a, b, gamma)
        return h, h2, h2, batch.r, batch.r2

    return _run_kernel(2, stream, gamma, cfg, theta0, iters, rng, record_every, chunk, 3,
                       {"tau": tau, "eps": eps}, ceiling, prep)
