"""Benchmark prediction problems: Baird's star, the 10-ring, random MDPs,
linearized cart-pole and 5-link pendulum, and three nonlinear value families."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import linalg, stats

from .baselines import FAMILY_SPIRAL, FAMILY_WARP
from .mdp import (FiniteMdp, FiniteStream, LinearFeatures, NonlinearManifold, TransitionBatch,
                  stationary_distribution)
from .objectives import feature_warp

RICCATI_TOL = 1e-10


# --- finite environments -------------------------------------------------------

@dataclass(frozen=True)
class DiscreteEnv:
    name: str
    mdp: FiniteMdp
    feats: Optional[LinearFeatures]
    manifold: Optional[NonlinearManifold] = None
    family: Optional[tuple] = None
    info: dict = field(default_factory=dict)

    def stream(self, rng: np.random.Generator, double: bool = False) -> FiniteStream:
        phi = self.feats.phi if self.feats is not None else np.zeros((self.mdp.n_states, 1))
        return FiniteStream(self.mdp, phi, rng, double)


BAIRD_PHI = np.array([
    [1, 2, 0, 0, 0, 0, 0, 0],
    [1, 0, 2, 0, 0, 0, 0, 0],
    [1, 0, 0, 2, 0, 0, 0, 0],
    [1, 0, 0, 0, 2, 0, 0, 0],
    [1, 0, 0, 0, 0, 2, 0, 0],
    [1, 0, 0, 0, 0, 0, 2, 0],
    [2, 0, 0, 0, 0, 0, 0, 1],
], dtype=float)

BAIRD_PHI_IMPERFECT = np.array([
    [1, 2, 0, 0, 0, 0, 1, 0],
    [1, 0, 2, 0, 0, 0, 0, 0],
    [1, 0, 0, 2, 0, 0, 0, 0],
    [1, 0, 0, 0, 2, 0, 0, 0],
    [1, 0, 0, 0, 0, 0, 0, 2],
    [1, 0, 0, 0, 0, 0, 0, 3],
    [2, 0, 0, 0, 0, 0, 0, 1],
], dtype=float)

RING_PHI = np.vstack([np.eye(8), np.eye(8)[[7, 5]]])

VANROY_P = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
VANROY_A = np.array([100.0, -70.0, -30.0])
VANROY_B = np.array([23.094, -98.15, 75.056])
VANROY_TAU = 0.01
VANROY_EPS = 0.001


def _constant_reward(n, value):
    return np.full((n, n), float(value))


def make_baird(feature_set: str = "perfect", gamma: Optional[float] = None) -> DiscreteEnv:
    """Seven-state star: every state jumps to state 7, sampled uniformly.

    ``perfect`` uses zero reward and discount 0.9 by default; ``imperfect``
    uses the alternative feature matrix, reward 2 and discount 0.99.
    """
    n = 7
    P = np.zeros((n, n))
    P[:, 6] = 1.0
    nu = np.full(n, 1.0 / n)
    if feature_set == "perfect":
        mdp = FiniteMdp(P, _constant_reward(n, 0.0), 0.9 if gamma is None else gamma, nu)
        return DiscreteEnv("baird", mdp, LinearFeatures(BAIRD_PHI))
    if feature_set == "imperfect":
        mdp = FiniteMdp(P, _constant_reward(n, 2.0), 0.99 if gamma is None else gamma, nu)
        return DiscreteEnv("baird-imperfect", mdp, LinearFeatures(BAIRD_PHI_IMPERFECT))
    raise ValueError(f"unknown feature set {feature_set!r}")


def make_ring10(gamma: float = 0.99) -> DiscreteEnv:
    """Deterministic 10-cycle with unit reward and uniform sampling."""
    n = 10
    P = np.roll(np.eye(n), 1, axis=1)
    mdp = FiniteMdp(P, _constant_reward(n, 1.0), gamma, np.full(n, 1.0 / n))
    return DiscreteEnv("ring10", mdp, LinearFeatures(RING_PHI))


def binomial_transitions(b: np.ndarray) -> np.ndarray:
    """Rows ``C(n, s') b^s' (1-b)^(n-s')`` over ``s' < n``, renormalized."""
    n = b.size
    P = stats.binom.pmf(np.arange(n)[None, :], n, b[:, None])
    return P / P.sum(axis=1, keepdims=True)


def rbf_features(n_states: int, k: int, centers=None, width=None) -> np.ndarray:
    """Gaussian bumps over the state index.

    Defaults space ``k`` centers evenly: spacing ``n/k``, first center at half
    a spacing, width half a spacing (1000 states, 50 features gives centers
    10, 30, ... and width 10).
    """
    spacing = n_states / k
    m = spacing / 2 + spacing * np.arange(k) if centers is None else np.asarray(centers, float)
    v = spacing / 2 if width is None else width
    s = np.arange(n_states, dtype=float)[:, None]
    return np.exp(-((s - m[None, :]) ** 2) / (2.0 * np.asarray(v, float) ** 2))


def fourier_features(n_states: int, k: int) -> np.ndarray:
    """Constant, then alternating cosines and sines on the state scaled to [0, 1]."""
    x = np.arange(n_states, dtype=float) / max(n_states - 1, 1)
    cols = [np.ones(n_states)]
    for i in range(2, k + 1):
        cols.append(np.cos((i + 1) * np.pi * x / 2) if i % 2 else np.sin(i * np.pi * x / 2))
    return np.stack(cols, axis=1)


def make_random_mdp(n_states: int = 1000, n_actions_label: int = 200, k: int = 50,
                    basis: str = "rbf", seed: int = 0, gamma: Optional[float] = None
                    ) -> DiscreteEnv:
    """Random ergodic chain with binomial rows and reward ``G(s) G(s') (1+s')^-0.25``.

    The action count only labels the instance, since the chain is already
    the policy-induced one. Discount defaults to 0.01 for RBF and 0.9 for
    Fourier features.
    """
    if basis not in ("rbf", "fourier"):
        raise ValueError(f"unknown basis {basis!r}")
    rng = np.random.default_rng(seed)
    G = rng.uniform(0.0, 1.0, n_states)
    b = rng.uniform(0.0, 1.0, n_states)
    P = binomial_transitions(b)
    s = np.arange(n_states, dtype=float)
    R = np.outer(G, G / (1.0 + s) ** 0.25)
    nu = stationary_distribution(P)
    if gamma is None:
        gamma = 0.01 if basis == "rbf" else 0.9
    phi = rbf_features(n_states, k) if basis == "rbf" else fourier_features(n_states, k)
    mdp = FiniteMdp(P, R, gamma, nu)
    return DiscreteEnv(f"random-{basis}", mdp, LinearFeatures(phi),
                       info={"seed": seed, "n_actions": n_actions_label})


def spiral_manifold(a=VANROY_A, b=VANROY_B, tau=VANROY_TAU, eps=VANROY_EPS) -> NonlinearManifold:
    """One-parameter family ``(a cos(tau x) - b sin(tau x)) e^(eps x)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def coeffs(x, order):
        ca, cb = a, b
        for _ in range(order):
            ca, cb = eps * ca - tau * cb, eps * cb + tau * ca
        e = np.exp(eps * x)
        return e * (ca * np.cos(tau * x) - cb * np.sin(tau * x))

    def evaluate(theta):
        return coeffs(float(np.ravel(theta)[0]), 0)

    def gradient(theta):
        return coeffs(float(np.ravel(theta)[0]), 1)[:, None]

    def hessian_vector(theta, w):
        return coeffs(float(np.ravel(theta)[0]), 2)[:, None] * float(np.ravel(w)[0])

    return NonlinearManifold(1, evaluate, gradient, hessian_vector)


def warp_manifold(phi: np.ndarray, kappa: float) -> NonlinearManifold:
    """``Phi h(z)`` with ``h_i(z) = cos(z_i)^2 exp(kappa z_i)``."""
    phi = np.asarray(phi, dtype=float)

    def d1(z):
        return np.exp(kappa * z) * (kappa * np.cos(z) ** 2 - np.sin(2 * z))

    def d2(z):
        return np.exp(kappa * z) * (kappa ** 2 * np.cos(z) ** 2 - 2 * kappa * np.sin(2 * z)
                                    - 2 * np.cos(2 * z))

    return NonlinearManifold(
        phi.shape[1],
        lambda z: phi @ feature_warp(z, kappa),
        lambda z: phi * d1(np.asarray(z, float))[None, :],
        lambda z, w: phi * (d2(np.asarray(z, float)) * np.asarray(w, float))[None, :])


def make_vanroy() -> DiscreteEnv:
    """Three-state chain with zero reward and the spiral value family."""
    P = VANROY_P.copy()
    mdp = FiniteMdp(P, _constant_reward(3, 0.0), 0.9, stationary_distribution(P))
    table = np.zeros((4, 3))
    table[0], table[1] = VANROY_A, VANROY_B
    table[3, :2] = VANROY_TAU, VANROY_EPS
    return DiscreteEnv("vanroy", mdp, None, spiral_manifold(), (FAMILY_SPIRAL, table),
                       info={"a": VANROY_A, "b": VANROY_B, "tau": VANROY_TAU,
                             "eps": VANROY_EPS})


def _warp_env(name, base: DiscreteEnv, gamma, kappa, nu) -> DiscreteEnv:
    n = base.mdp.n_states
    mdp = FiniteMdp(base.mdp.P, _constant_reward(n, 0.0), gamma, nu)
    phi = base.feats.phi
    table = np.hstack([phi, np.full((n, 1), kappa)])
    return DiscreteEnv(name, mdp, base.feats, warp_manifold(phi, kappa), (FAMILY_WARP, table),
                       info={"kappa": kappa})


def make_nonlinear_baird() -> DiscreteEnv:
    base = make_baird("perfect")
    return _warp_env("baird-nl", base, 0.9, 0.01, np.full(7, 1.0 / 7))


def make_nonlinear_ring() -> DiscreteEnv:
    base = make_ring10()
    return _warp_env("ring10-nl", base, 0.99, 0.1, stationary_distribution(base.mdp.P))


# --- linearized control problems -------------------------------------------------

def quadratic_features(S: np.ndarray, n_cross: Optional[int] = None) -> np.ndarray:
    """``(1, s_i^2, s_i s_j for i < j)`` with cross terms in lexicographic order.

    ``n_cross`` keeps only the first cross terms.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = S.shape[1]
    iu, ju = np.triu_indices(n, 1)
    if n_cross is not None:
        iu, ju = iu[:n_cross], ju[:n_cross]
    return np.hstack([np.ones((S.shape[0], 1)), S ** 2, S[:, iu] * S[:, ju]])


def _quadratic_pairs(n, n_cross):
    iu, ju = np.triu_indices(n, 1)
    if n_cross is not None:
        iu, ju = iu[:n_cross], ju[:n_cross]
    return iu, ju


def discounted_lqr(A, B, Q, R, gamma, tol=RICCATI_TOL, max_iter=200_000):
    """Gain ``K`` (action ``-K s``) and cost matrix from discounted Riccati iteration."""
    X = np.array(Q, dtype=float)
    for _ in range(max_iter):
        K = _gain(A, B, R, X, gamma)
        Xn = Q + gamma * A.T @ X @ A - gamma * A.T @ X @ B @ K
        Xn = 0.5 * (Xn + Xn.T)
        if np.max(np.abs(Xn - X)) <= tol * max(1.0, np.max(np.abs(Xn))):
            X = Xn
            break
        X = Xn
    else:
        raise FloatingPointError("Riccati iteration did not converge")
    return _gain(A, B, R, X, gamma), X


def _gain(A, B, R, X, gamma):
    # without an action cost the first iterates can leave some actions unpriced
    G = R + gamma * B.T @ X @ B
    rhs = gamma * B.T @ X @ A
    try:
        return np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(G, rhs, rcond=None)[0]


@numba.njit(cache=True)
def _rollout(Ac, s0, noise, out):
    n = s0.shape[0]
    s = s0.copy()
    for t in range(noise.shape[0]):
        out[t] = s
        nxt = np.zeros(n)
        for i in range(n):
            acc = noise[t, i]
            for j in range(n):
                acc += Ac[i, j] * s[j]
            nxt[i] = acc
        s = nxt
    return s


@dataclass(frozen=True)
class ContinuousEnv:
    """Linear-Gaussian system ``s' = A s + B a + w`` under ``a ~ N(-K s, Sa)``.

    Reward is ``-(s^T Q s + a^T R a)``. The value of the evaluation policy is
    the quadratic ``-(s^T X s + c)`` and lies in the span of the quadratic
    features whenever all monomials are present.
    """

    name: str
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    noise_cov: np.ndarray
    policy_cov: np.ndarray
    gamma: float
    dt: float
    K: np.ndarray
    n_cross: Optional[int] = None
    info: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def closed_loop(self) -> np.ndarray:
        return self.A - self.B @ self.K

    @property
    def step_cov(self) -> np.ndarray:
        """Covariance of ``s' - E[s'|s]`` (policy noise pushed through ``B`` plus ``w``)."""
        return self.B @ self.policy_cov @ self.B.T + self.noise_cov

    @property
    def n_features(self) -> int:
        return self.features(np.zeros((1, self.state_dim))).shape[1]

    def features(self, S) -> np.ndarray:
        return quadratic_features(S, self.n_cross)

    def step(self, s, a, noise=None) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        nxt = self.A @ s + self.B @ np.atleast_1d(np.asarray(a, dtype=float))
        return nxt if noise is None else nxt + noise

    def reward(self, S, Acts) -> np.ndarray:
        S = np.atleast_2d(S)
        Acts = np.atleast_2d(Acts)
        return -(np.einsum("ti,ij,tj->t", S, self.Q, S)
                 + np.einsum("ti,ij,tj->t", Acts, self.R, Acts))

    # exact quantities of the evaluation policy
    def value_matrix(self) -> tuple:
        """``(X, c)`` with ``V(s) = -(s^T X s + c)``."""
        Ac = self.closed_loop
        Qc = self.Q + self.K.T @ self.R @ self.K
        X = linalg.solve_discrete_lyapunov(np.sqrt(self.gamma) * Ac.T, Qc)
        X = 0.5 * (X + X.T)
        c = (np.trace(self.R @ self.policy_cov) + self.gamma * np.trace(X @ self.step_cov)) / (
            1.0 - self.gamma)
        return X, float(c)

    def true_values(self, S) -> np.ndarray:
        X, c = self.value_matrix()
        S = np.atleast_2d(S)
        return -(np.einsum("ti,ij,tj->t", S, X, S) + c)

    def value_weights(self) -> np.ndarray:
        """Feature weights of the true value (exact when every monomial is present)."""
        X, c = self.value_matrix()
        iu, ju = _quadratic_pairs(self.state_dim, self.n_cross)
        return -np.concatenate([[c], np.diag(X), 2.0 * X[iu, ju]])

    def expected_reward(self, S) -> np.ndarray:
        S = np.atleast_2d(S)
        Qc = self.Q + self.K.T @ self.R @ self.K
        return -(np.einsum("ti,ij,tj->t", S, Qc, S) + np.trace(self.R @ self.policy_cov))

    def expected_next_features(self, S) -> np.ndarray:
        """``E[phi(s') | s]`` in closed form from the Gaussian successor."""
        S = np.atleast_2d(S)
        M = S @ self.closed_loop.T
        C = self.step_cov
        n = self.state_dim
        iu, ju = _quadratic_pairs(n, self.n_cross)
        return np.hstack([np.ones((S.shape[0], 1)), M ** 2 + np.diag(C)[None, :],
                          M[:, iu] * M[:, ju] + C[iu, ju][None, :]])

    def rollout(self, rng: np.random.Generator, length: int, s0=None) -> np.ndarray:
        """States ``s_0..s_length`` of one on-policy trajectory."""
        n = self.state_dim
        s0 = np.zeros(n) if s0 is None else np.asarray(s0, dtype=float)
        L = np.linalg.cholesky(self.step_cov + 1e-300 * np.eye(n))
        noise = rng.standard_normal((length, n)) @ L.T
        out = np.empty((length + 1, n))
        out[length] = _rollout(np.ascontiguousarray(self.closed_loop), s0, noise, out[:length])
        return out

    def stream(self, rng: np.random.Generator, burn_in: int = 1000, double: bool = False):
        return ContinuousStream(self, rng, burn_in)

    def evaluation_states(self, n: int = 10_000, seed: int = 12345, burn_in: int = 1000,
                          thin: int = 5) -> np.ndarray:
        traj = self.rollout(np.random.default_rng(seed), burn_in + n * thin)
        return traj[burn_in + thin::thin][:n]


class ContinuousStream:
    """Consecutive on-policy transitions of a :class:`ContinuousEnv`."""

    def __init__(self, env: ContinuousEnv, rng: np.random.Generator, burn_in: int = 1000):
        self.env = env
        self.rng = rng
        self.state = env.rollout(rng, burn_in)[-1] if burn_in else np.zeros(env.state_dim)

    def next(self, size: int) -> TransitionBatch:
        env = self.env
        n = env.state_dim
        m = env.B.shape[1]
        S = np.empty((size + 1, n))
        S[0] = self.state
        La = np.linalg.cholesky(env.policy_cov)
        Lw = np.linalg.cholesky(env.noise_cov + 1e-300 * np.eye(n))
        eps_a = self.rng.standard_normal((size, m)) @ La.T
        eps_w = self.rng.standard_normal((size, n)) @ Lw.T
        # a_t = -K s_t + eps_a; s_{t+1} = A s_t + B a_t + w_t
        S[size] = _rollout(np.ascontiguousarray(env.closed_loop), S[0],
                           eps_a @ env.B.T + eps_w, S[:size])
        acts = -S[:size] @ env.K.T + eps_a
        self.state = S[size].copy()
        F = env.features(S)
        return TransitionBatch(F[:size], env.reward(S[:size], acts), F[1:])


@dataclass
class ContinuousMetrics:
    """Monte Carlo MSE/MSPBE on a fixed set of on-policy states."""

    env: ContinuousEnv
    states: np.ndarray

    def __post_init__(self):
        env = self.env
        self.phi = env.features(self.states)
        self.v_true = env.true_values(self.states)
        n = self.states.shape[0]
        pn = env.expected_next_features(self.states)
        rbar = env.expected_reward(self.states)
        self.w0 = self.phi.T @ rbar / n
        self.w1 = self.phi.T @ (env.gamma * pn - self.phi) / n
        self.w2 = self.phi.T @ self.phi / n

    def sqrt_mse(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        err = Z @ self.phi.T - self.v_true[None, :]
        return np.sqrt(np.mean(err ** 2, axis=1))

    def sqrt_mspbe(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        g = self.w0[None, :] + Z @ self.w1.T
        sol = np.linalg.lstsq(self.w2, g.T, rcond=None)[0]
        return np.sqrt(np.maximum(np.einsum("ti,it->t", g, sol), 0.0))


def make_cartpole(sigma_policy: float = 0.1) -> ContinuousEnv:
    """Linearized cart-pole, state ``(x, x_dot, psi, psi_dot)``.

    The update map is taken term by term from the printed linear system,
    including its velocity noise on the last component.
    """
    g, m, M, l, fr, dt, sigma2, gamma = 9.8, 0.5, 0.5, 0.6, 0.1, 0.1, 0.01, 0.95
    d2 = 4 * M * l - m * l
    d4 = 4 * M - m
    # derivative rows: psi_dot, (3(M+m)psi - 3a + 3b psi_dot)/d2, x_dot, (3mg psi + 4a - 4b psi_dot)/d4
    Dx = np.array([
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 3 * (M + m) / d2, 3 * fr / d2],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 3 * m * g / d4, -4 * fr / d4],
    ])
    Da = np.array([[0.0], [-3.0 / d2], [0.0], [4.0 / d4]])
    A = np.eye(4) + dt * Dx
    B = dt * Da
    Q = np.diag([1.0, 0.0, 100.0, 0.0])
    R = np.array([[0.1]])
    W = np.zeros((4, 4))
    W[3, 3] = sigma2 ** 2
    K, _ = discounted_lqr(A, B, Q, R, gamma)
    return ContinuousEnv("cartpole", A, B, Q, R, W, np.array([[sigma_policy ** 2]]), gamma,
                         dt, K, info={"g": g, "m": m, "M": M, "l": l, "b": fr,
                                      "sigma2": sigma2})


def pendulum_mass_matrix(n_links=5, m=1.0, l=1.0) -> np.ndarray:
    i = np.arange(1, n_links + 1)
    return l ** 2 * (n_links + 1 - np.maximum.outer(i, i)) * m


def make_pendulum5(sigma_policy: float = 0.1, sigma_noise: float = 0.01) -> ContinuousEnv:
    """Linearized 5-link pendulum with state ``(q, q_dot)`` and joint torques.

    Features keep the constant, all squares and the first 35 cross terms in
    lexicographic order (every product involving a joint angle), 46 in total.
    """
    g, m, l, dt, gamma, n = 9.8, 1.0, 1.0, 0.1, 0.95, 5
    Mm = pendulum_mass_matrix(n, m, l)
    U = np.diag(-g * l * (n + 1 - np.arange(1, n + 1)) * m)
    Minv = np.linalg.inv(Mm)
    I = np.eye(n)
    A = np.block([[I, dt * I], [-dt * Minv @ U, I]])
    B = dt * np.vstack([np.zeros((n, n)), Minv])
    Q = np.zeros((2 * n, 2 * n))
    Q[:n, :n] = I
    R = np.zeros((n, n))
    W = sigma_noise ** 2 * np.eye(2 * n)
    K, _ = discounted_lqr(A, B, Q, R, gamma)
    return ContinuousEnv("pendulum5", A, B, Q, R, W, sigma_policy ** 2 * I, gamma, dt, K,
                         n_cross=35, info={"g": g, "m": m, "l": l, "M": Mm, "U": U})


ENV_NAMES = ("baird", "baird-imperfect", "ring10", "random-rbf", "random-fourier", "cartpole",
             "pendulum5", "vanroy", "baird-nl", "ring10-nl")


def make_env(name: str, **kw):
    """Construct an environment by its command-line name."""
    makers = {
        "baird": lambda: make_baird("perfect", **kw),
        "baird-imperfect": lambda: make_baird("imperfect", **kw),
        "ring10": lambda: make_ring10(**kw),
        "random-rbf": lambda: make_random_mdp(basis="rbf", **kw),
        "random-fourier": lambda: make_random_mdp(basis="fourier", **kw),
        "cartpole": lambda: make_cartpole(**kw),
        "pendulum5": lambda: make_pendulum5(**kw),
        "vanroy": make_vanroy,
        "baird-nl": make_nonlinear_baird,
        "ring10-nl": make_nonlinear_ring,
    }
    if name not in makers:
        raise KeyError(f"unknown environment {name!r}")
    return makers[name]()
