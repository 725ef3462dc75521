"""Temporal-difference baselines: TD(lambda), RG, GTD2, TDC, LSTD, LSPE and nonlinear GTD2.

Single-step functions operate on feature vectors and return new states.
``run_*`` helpers drive them over a transition stream with compiled loops.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numba
import numpy as np

DIVERGENCE_NORM = 1e8
LS_EPSILON = 1e-3


class LeastSquaresError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinearPredictor:
    z: np.ndarray
    aux: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    diverged: bool = False

    @classmethod
    def zeros(cls, k: int, z0=None) -> "LinearPredictor":
        z = np.zeros(k) if z0 is None else np.asarray(z0, dtype=float).copy()
        return cls(z, np.zeros(k), np.zeros(k))


def _checked(p: LinearPredictor, z, **kw) -> LinearPredictor:
    div = p.diverged or not np.linalg.norm(z) <= DIVERGENCE_NORM
    return replace(p, z=z, diverged=div, **kw)


def td_error(z, phi, r, phi_next, gamma) -> float:
    return float(r + gamma * np.dot(z, phi_next) - np.dot(z, phi))


def td_lambda_step(p: LinearPredictor, phi, r, phi_next, alpha, lam, gamma) -> LinearPredictor:
    """``e <- phi + gamma lam e``; ``z <- z + alpha delta e``."""
    phi = np.asarray(phi, dtype=float)
    d = td_error(p.z, phi, r, phi_next, gamma)
    e = phi + gamma * lam * (p.e if p.e is not None else 0.0)
    return _checked(p, p.z + alpha * d * e, e=e)


def rg_step(p: LinearPredictor, phi, r, phi_next, phi_next2, alpha, gamma) -> LinearPredictor:
    """Residual gradient with the gradient factor taken at an independent successor."""
    phi = np.asarray(phi, dtype=float)
    d = td_error(p.z, phi, r, phi_next, gamma)
    return _checked(p, p.z + alpha * d * (phi - gamma * np.asarray(phi_next2, dtype=float)))


def gtd2_step(p: LinearPredictor, phi, r, phi_next, alpha, beta, gamma) -> LinearPredictor:
    phi = np.asarray(phi, dtype=float)
    phi_next = np.asarray(phi_next, dtype=float)
    v = p.aux
    d = td_error(p.z, phi, r, phi_next, gamma)
    pv = float(phi @ v)
    z = p.z + alpha * (phi - gamma * phi_next) * pv
    return _checked(p, z, aux=v + beta * (d - pv) * phi)


def tdc_step(p: LinearPredictor, phi, r, phi_next, alpha, beta, gamma) -> LinearPredictor:
    """TD with gradient correction, ``z <- z + alpha (delta phi - gamma phi' (phi^T v))``."""
    phi = np.asarray(phi, dtype=float)
    phi_next = np.asarray(phi_next, dtype=float)
    v = p.aux
    d = td_error(p.z, phi, r, phi_next, gamma)
    pv = float(phi @ v)
    z = p.z + alpha * (d * phi - gamma * phi_next * pv)
    return _checked(p, z, aux=v + beta * (d - pv) * phi)


@dataclass(frozen=True)
class LeastSquaresState:
    A: np.ndarray
    b: np.ndarray
    e: np.ndarray
    B: Optional[np.ndarray] = None
    n: int = 0

    @classmethod
    def initial(cls, k: int, epsilon: float = LS_EPSILON, with_b_matrix: bool = False):
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        B = epsilon * np.eye(k) if with_b_matrix else None
        return cls(epsilon * np.eye(k), np.zeros(k), np.zeros(k), B)


def ls_update(s: LeastSquaresState, phi, r, phi_next, lam, gamma) -> LeastSquaresState:
    phi = np.asarray(phi, dtype=float)
    e = phi + gamma * lam * s.e
    A = s.A + np.outer(e, phi - gamma * np.asarray(phi_next, dtype=float))
    B = None if s.B is None else s.B + np.outer(phi, phi)
    return LeastSquaresState(A, s.b + e * r, e, B, s.n + 1)


def _solve(A, rhs):
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.pinv(A) @ rhs
    except np.linalg.LinAlgError as exc:
        raise LeastSquaresError("least-squares system could not be solved") from exc


def lstd_solve(s: LeastSquaresState) -> np.ndarray:
    """``A^-1 b`` with a pseudo-inverse fallback."""
    return _solve(s.A, s.b)


def lspe_printed(s: LeastSquaresState) -> np.ndarray:
    """``A^-1 B b`` computed from the accumulated sums verbatim."""
    if s.B is None:
        raise ValueError("state was created without the B accumulator")
    return _solve(s.A, s.B @ s.b)


def lspe_iterate(z, s: LeastSquaresState) -> np.ndarray:
    """One least-squares projected iteration ``z + B^-1 (b - A z)``."""
    return z + _solve(s.B, s.b - s.A @ z)


def lstd_from_batch(phi, r, phi_next, gamma, lam=0.0, epsilon=LS_EPSILON):
    """LSTD(lambda) over whole arrays of transitions."""
    A, b = _ls_accumulate(np.ascontiguousarray(phi, dtype=float), np.asarray(r, dtype=float),
                          np.ascontiguousarray(phi_next, dtype=float), gamma, lam,
                          epsilon * np.eye(phi.shape[1]), np.zeros(phi.shape[1]),
                          np.zeros(phi.shape[1]))
    return _solve(A, b)


@numba.njit(cache=True)
def _ls_accumulate(F, r, Fn, gamma, lam, A, b, e):
    m, k = F.shape
    for t in range(m):
        for i in range(k):
            e[i] = F[t, i] + gamma * lam * e[i]
        for i in range(k):
            b[i] += e[i] * r[t]
            for j in range(k):
                A[i, j] += e[i] * (F[t, j] - gamma * Fn[t, j])
    return A, b


# --- compiled drivers ---------------------------------------------------------

ALGO_TD, ALGO_RG, ALGO_GTD2, ALGO_TDC = 0, 1, 2, 3
LINEAR_ALGOS = {"td": ALGO_TD, "rg": ALGO_RG, "gtd2": ALGO_GTD2, "tdc": ALGO_TDC}


@numba.njit(cache=True)
def _linear_kernel(algo, t0, every, F, Fn, Fn2, rw, alphas, betas, gamma, lam, z, v, e, flag,
                   rec_t, rec_z):
    m, k = F.shape
    nrec = 0
    for j in range(m):
        if flag[0] == 0.0:
            f = F[j]
            fn = Fn[j]
            d = rw[j]
            for i in range(k):
                d += (gamma * fn[i] - f[i]) * z[i]
            a = alphas[j]
            if algo == 0:
                for i in range(k):
                    e[i] = f[i] + gamma * lam * e[i]
                    z[i] += a * d * e[i]
            elif algo == 1:
                f2 = Fn2[j]
                for i in range(k):
                    z[i] += a * d * (f[i] - gamma * f2[i])
            else:
                pv = 0.0
                for i in range(k):
                    pv += f[i] * v[i]
                bt = betas[j]
                for i in range(k):
                    if algo == 2:
                        z[i] += a * (f[i] - gamma * fn[i]) * pv
                    else:
                        z[i] += a * (d * f[i] - gamma * fn[i] * pv)
                    v[i] += bt * (d - pv) * f[i]
            nrm = 0.0
            for i in range(k):
                nrm += z[i] * z[i]
            if not np.sqrt(nrm) <= 1e8:
                flag[0] = 1.0
                flag[1] = t0 + j + 1
        t = t0 + j + 1
        if t % every == 0:
            rec_t[nrec] = t
            for i in range(k):
                rec_z[nrec, i] = z[i]
            nrec += 1
    return nrec


@dataclass
class BaselineResult:
    """Weight vectors sampled every ``record_every`` steps."""

    t: np.ndarray
    z: np.ndarray
    diverged: bool
    diverged_at: Optional[int] = None
    sqrt_mse: Optional[np.ndarray] = None
    sqrt_mspbe: Optional[np.ndarray] = None

    @property
    def diverged_mask(self) -> np.ndarray:
        if not self.diverged:
            return np.zeros(self.t.shape, dtype=bool)
        return self.t >= self.diverged_at


def run_linear(algo: str, stream, gamma, k, iters, alpha, beta=None, lam=0.0,
               record_every=100, chunk=20_000, z0=None) -> BaselineResult:
    """Run TD(lambda), RG, GTD2 or TDC for ``iters`` transitions.

    ``alpha``/``beta`` are :class:`cemtd.ce.StepSchedule` instances. Once the
    weight norm exceeds 1e8 the run is flagged and the weights are frozen.
    """
    code = LINEAR_ALGOS[algo]
    z = np.zeros(k) if z0 is None else np.array(z0, dtype=float)
    v = np.zeros(k)
    e = np.zeros(k)
    flag = np.zeros(2)
    ts, zs = [0], [z.copy()]
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        b = stream.next(m)
        steps = np.arange(done + 1, done + m + 1)
        al = np.ascontiguousarray(alpha.evaluate(steps), dtype=float)
        bt = np.ascontiguousarray((beta or alpha).evaluate(steps), dtype=float)
        Fn2 = b.phi_next2 if b.phi_next2 is not None else b.phi_next
        rec_t = np.zeros(m // record_every + 1, dtype=np.int64)
        rec_z = np.zeros((m // record_every + 1, k))
        n = _linear_kernel(code, done, record_every, np.ascontiguousarray(b.phi, dtype=float),
                           np.ascontiguousarray(b.phi_next, dtype=float),
                           np.ascontiguousarray(Fn2, dtype=float),
                           np.ascontiguousarray(b.r, dtype=float), al, bt, float(gamma),
                           float(lam), z, v, e, flag, rec_t, rec_z)
        ts.extend(rec_t[:n])
        zs.extend(rec_z[:n])
        done += m
    div = bool(flag[0])
    return BaselineResult(np.array(ts, dtype=np.int64), np.array(zs), div,
                          int(flag[1]) if div else None)


@numba.njit(cache=True)
def _ls_kernel(t0, every, F, Fn, rw, gamma, lam, A, b, e, Binv, z, lspe, rec_t, rec_z):
    m, k = F.shape
    nrec = 0
    u = np.empty(k)
    for j in range(m):
        f = F[j]
        fn = Fn[j]
        for i in range(k):
            e[i] = f[i] + gamma * lam * e[i]
        for i in range(k):
            b[i] += e[i] * rw[j]
            for q in range(k):
                A[i, q] += e[i] * (f[q] - gamma * fn[q])
        if lspe:
            # Sherman-Morrison update of B^-1 for B += f f^T
            den = 1.0
            for i in range(k):
                s = 0.0
                for q in range(k):
                    s += Binv[i, q] * f[q]
                u[i] = s
                den += f[i] * s
            for i in range(k):
                for q in range(k):
                    Binv[i, q] -= u[i] * u[q] / den
            res = np.empty(k)
            for i in range(k):
                s = b[i]
                for q in range(k):
                    s -= A[i, q] * z[q]
                res[i] = s
            for i in range(k):
                s = 0.0
                for q in range(k):
                    s += Binv[i, q] * res[q]
                u[i] = s
            for i in range(k):
                z[i] += u[i]
        t = t0 + j + 1
        if t % every == 0:
            rec_t[nrec] = t
            if lspe:
                for i in range(k):
                    rec_z[nrec, i] = z[i]
            nrec += 1
    return nrec


def run_least_squares(algo: str, stream, gamma, k, iters, lam=0.0, epsilon=LS_EPSILON,
                      record_every=100, chunk=20_000) -> BaselineResult:
    """LSTD(lambda) (``algo="lstd"``) or iterative LSPE(lambda) (``algo="lspe"``).

    LSTD solutions are recomputed at every record from the running sums.
    """
    if algo not in ("lstd", "lspe"):
        raise ValueError(algo)
    lspe = algo == "lspe"
    A = epsilon * np.eye(k)
    b = np.zeros(k)
    e = np.zeros(k)
    Binv = np.eye(k) / epsilon
    z = np.zeros(k)
    ts, zs = [0], [np.zeros(k) if lspe else _solve(A, b)]
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        bt = stream.next(m)
        rec_t = np.zeros(m // record_every + 1, dtype=np.int64)
        rec_z = np.zeros((m // record_every + 1, k))
        if not lspe:
            # solutions are needed at each record: accumulate between records
            start = 0
            nrec = 0
            while start < m:
                stop = min(m, start + record_every - ((done + start) % record_every))
                _ls_accumulate(np.ascontiguousarray(bt.phi[start:stop], dtype=float),
                               np.ascontiguousarray(bt.r[start:stop], dtype=float),
                               np.ascontiguousarray(bt.phi_next[start:stop], dtype=float),
                               float(gamma), float(lam), A, b, e)
                if (done + stop) % record_every == 0:
                    rec_t[nrec] = done + stop
                    rec_z[nrec] = _solve(A, b)
                    nrec += 1
                start = stop
            n = nrec
        else:
            n = _ls_kernel(done, record_every, np.ascontiguousarray(bt.phi, dtype=float),
                           np.ascontiguousarray(bt.phi_next, dtype=float),
                           np.ascontiguousarray(bt.r, dtype=float), float(gamma), float(lam),
                           A, b, e, Binv, z, True, rec_t, rec_z)
        ts.extend(rec_t[:n])
        zs.extend(rec_z[:n])
        done += m
    Z = np.array(zs)
    return BaselineResult(np.array(ts, dtype=np.int64), Z, False)


# --- nonlinear value families -------------------------------------------------

def gtd2_nl_step(theta, w, s, r, s_next, manifold, alpha, beta, gamma, projector=None):
    """Nonlinear GTD2 with the Hessian correction term.

    ``manifold`` provides ``evaluate``, ``gradient`` and ``hessian_vector``
    (see :class:`cemtd.mdp.NonlinearManifold`). ``projector`` defaults to the
    identity. For a linear family the Hessian term vanishes and the update is
    exactly :func:`tdc_step`.
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    V = manifold.evaluate(theta)
    G = manifold.gradient(theta)
    d = r + gamma * V[s_next] - V[s]
    g, gn = G[s], G[s_next]
    gw = float(g @ w)
    h = (d - gw) * manifold.hessian_vector(theta, w)[s]
    w_new = w + beta * (d - gw) * g
    theta_new = theta + alpha * (d * g - gamma * gn * gw - h)
    if projector is not None:
        theta_new = projector(theta_new)
    return theta_new, w_new


def td0_nl_step(theta, s, r, s_next, manifold, alpha, gamma):
    """Nonlinear TD(0): ``theta <- theta + alpha delta grad V(s)``."""
    theta = np.asarray(theta, dtype=float)
    V = manifold.evaluate(theta)
    d = r + gamma * V[s_next] - V[s]
    return theta + alpha * d * manifold.gradient(theta)[s]


FAMILY_WARP, FAMILY_SPIRAL = 0, 1


@numba.njit(cache=True)
def _nl_eval(family, P, s, theta, grad, hw, w, want_h):
    """Value at state ``s``; fills gradient and Hessian-vector product."""
    d = theta.shape[0]
    if family == 0:
        kappa = P[0, P.shape[1] - 1]
        val = 0.0
        for i in range(d):
            x = theta[i]
            c = np.cos(x)
            sn = np.sin(x)
            ex = np.exp(kappa * x)
            phi = P[s, i]
            val += phi * c * c * ex
            grad[i] = phi * ex * (kappa * c * c - 2.0 * sn * c)
            if want_h:
                c2 = c * c - sn * sn
                hw[i] = phi * ex * (kappa * kappa * c * c - 4.0 * kappa * sn * c - 2.0 * c2) * w[i]
        return val
    tau = P[3, 0]
    eps = P[3, 1]
    a = P[0, s]
    b = P[1, s]
    x = theta[0]
    ex = np.exp(eps * x)
    c = np.cos(tau * x)
    sn = np.sin(tau * x)
    a1 = eps * a - tau * b
    b1 = eps * b + tau * a
    grad[0] = ex * (a1 * c - b1 * sn)
    if want_h:
        a2 = eps * a1 - tau * b1
        b2 = eps * b1 + tau * a1
        hw[0] = ex * (a2 * c - b2 * sn) * w[0]
    return ex * (a * c - b * sn)


@numba.njit(cache=True)
def _nl_kernel(algo, family, P, t0, every, s_arr, sn_arr, rw, alphas, betas, gamma, theta, w,
               flag, rec_t, rec_z):
    d = theta.shape[0]
    g = np.empty(d)
    gn = np.empty(d)
    hw = np.empty(d)
    nrec = 0
    for j in range(s_arr.shape[0]):
        if flag[0] == 0.0:
            s = s_arr[j]
            sn = sn_arr[j]
            v = _nl_eval(family, P, s, theta, g, hw, w, algo == 1)
            vn = _nl_eval(family, P, sn, theta, gn, hw, w, False)
            if algo == 1:
                _nl_eval(family, P, s, theta, g, hw, w, True)
            delta = rw[j] + gamma * vn - v
            a = alphas[j]
            if algo == 0:
                for i in range(d):
                    theta[i] += a * delta * g[i]
            else:
                gw = 0.0
                for i in range(d):
                    gw += g[i] * w[i]
                for i in range(d):
                    theta[i] += a * (delta * g[i] - gamma * gn[i] * gw - (delta - gw) * hw[i])
                    w[i] += betas[j] * (delta - gw) * g[i]
            nrm = 0.0
            for i in range(d):
                nrm += theta[i] * theta[i]
            if not np.sqrt(nrm) <= 1e8:
                flag[0] = 1.0
                flag[1] = t0 + j + 1
        t = t0 + j + 1
        if t % every == 0:
            rec_t[nrec] = t
            for i in range(d):
                rec_z[nrec, i] = theta[i]
            nrec += 1
    return nrec


def run_nonlinear(algo: str, family_table, stream, gamma, theta0, iters, alpha, beta=None,
                  record_every=100, chunk=20_000) -> BaselineResult:
    """Nonlinear TD(0) (``"td"``) or GTD2 (``"gtd2"``) on a compiled value family.

    ``family_table`` is ``(family_code, table)`` as produced by the
    environment's manifold description.
    """
    code = {"td": 0, "gtd2": 1}[algo]
    family, table = family_table
    theta = np.array(theta0, dtype=float)
    w = np.zeros_like(theta)
    flag = np.zeros(2)
    ts, zs = [0], [theta.copy()]
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        b = stream.next(m)
        steps = np.arange(done + 1, done + m + 1)
        al = np.ascontiguousarray(alpha.evaluate(steps), dtype=float)
        bt = np.ascontiguousarray((beta or alpha).evaluate(steps), dtype=float)
        rec_t = np.zeros(m // record_every + 1, dtype=np.int64)
        rec_z = np.zeros((m // record_every + 1, theta.size))
        n = _nl_kernel(code, family, table, done, record_every, b.s.astype(np.int64),
                       b.s_next.astype(np.int64), np.ascontiguousarray(b.r, dtype=float), al,
                       bt, float(gamma), theta, w, flag, rec_t, rec_z)
        ts.extend(rec_t[:n])
        zs.extend(rec_z[:n])
        done += m
    div = bool(flag[0])
    return BaselineResult(np.array(ts, dtype=np.int64), np.array(zs), div,
                          int(flag[1]) if div else None)
