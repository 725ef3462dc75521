"""Finite Markov reward processes, samplers and exact error oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import linalg

RANK_TOL = 1e-10


class ProjectionUndefinedError(ValueError):
    """Raised when the weighted Gram matrix of the features is singular."""


@dataclass(frozen=True)
class FiniteMdp:
    """Policy-induced Markov reward process.

    Parameters
    ----------
    P : ndarray of shape (n, n)
        Row-stochastic transition matrix.
    reward : ndarray of shape (n, n)
        Reward ``R(s, s')`` collected on the transition ``s -> s'``.
    gamma : float
        Discount factor in ``[0, 1)``.
    nu : ndarray of shape (n,)
        Sampling distribution over current states, strictly positive.
    """

    P: np.ndarray
    reward: np.ndarray
    gamma: float
    nu: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        R = np.array(self.reward, dtype=float)
        nu = np.array(self.nu, dtype=float)
        n = P.shape[0]
        if P.ndim != 2 or P.shape != (n, n):
            raise ValueError("P must be square")
        if R.shape != (n, n):
            raise ValueError(f"reward must have shape {(n, n)}, got {R.shape}")
        if nu.shape != (n,):
            raise ValueError(f"nu must have shape {(n,)}, got {nu.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("P must be non-negative with rows summing to 1")
        if np.any(nu <= 0) or abs(nu.sum() - 1.0) > 1e-9:
            raise ValueError("nu must be a strictly positive probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for arr in (P, R, nu):
            arr.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def with_gamma(self, gamma: float) -> "FiniteMdp":
        return FiniteMdp(self.P, self.reward, gamma, self.nu)


@dataclass(frozen=True)
class LinearFeatures:
    """Feature matrix with one row per state."""

    phi: np.ndarray
    full_rank: bool = field(init=False)

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2:
            raise ValueError("phi must be a 2-d matrix")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "full_rank", numerical_rank(phi) == phi.shape[1])

    @property
    def n_features(self) -> int:
        return self.phi.shape[1]

    def values(self, z) -> np.ndarray:
        return self.phi @ np.asarray(z, dtype=float)


class Transition(NamedTuple):
    s: int
    r: float
    s_next: int


class DoubleTransition(NamedTuple):
    s: int
    r: float
    r_prime: float
    s_next: int
    s_next2: int


@dataclass(frozen=True)
class NonlinearManifold:
    """Parametrized value family ``z -> V_z`` over a finite state space.

    ``evaluate(z)`` returns the value of every state. ``gradient(z)`` returns
    the ``(n, d)`` Jacobian and ``hessian_vector(z, w)`` the ``(n, d)`` matrix
    whose row ``s`` is the Hessian of ``V_z(s)`` applied to ``w``.
    """

    dim_param: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian_vector: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def numerical_rank(a: np.ndarray, tol: float = RANK_TOL) -> int:
    """Rank from a column-pivoted QR, dropping pivots below ``tol * max``."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0
    _, r, _ = linalg.qr(a, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.sum(d > tol * d[0]))


def expected_reward(mdp: FiniteMdp) -> np.ndarray:
    """One-step expected reward ``R^pi(s) = sum_s' P(s, s') R(s, s')``."""
    return np.einsum("ij,ij->i", mdp.P, mdp.reward)


def solve_value_function(mdp: FiniteMdp) -> np.ndarray:
    """True value function ``(I - gamma P)^-1 R^pi``."""
    n = mdp.n_states
    try:
        return linalg.solve(np.eye(n) - mdp.gamma * mdp.P, expected_reward(mdp))
    except linalg.LinAlgError as exc:
        raise FloatingPointError("value function solve failed") from exc


def stationary_distribution(P, tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of an ergodic chain by power iteration.

    Iterates on the lazy chain ``(I + P) / 2``, which has the same
    stationary distribution but no periodic components.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    lazy = 0.5 * (np.eye(n) + P)
    d = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = d @ lazy
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - d)) < tol:
            return nxt
        d = nxt
    raise FloatingPointError("power iteration did not converge")


def _gram(mdp: FiniteMdp, feats: LinearFeatures) -> np.ndarray:
    phi = feats.phi
    return phi.T @ (mdp.nu[:, None] * phi)


def projection_matrix(mdp: FiniteMdp, feats: LinearFeatures) -> np.ndarray:
    """Weighted projection ``Phi (Phi^T D Phi)^-1 Phi^T D`` onto span(Phi)."""
    if not feats.full_rank:
        raise ProjectionUndefinedError(
            "projection undefined: feature matrix is not full column rank"
        )
    phi = feats.phi
    gram = _gram(mdp, feats)
    return phi @ linalg.solve(gram, phi.T * mdp.nu[None, :], assume_a="pos")


def column_space_projection(mdp: FiniteMdp, feats: LinearFeatures) -> np.ndarray:
    """Weighted projection onto span(Phi), valid for rank-deficient features.

    Uses the pseudo-inverse of the Gram matrix; coincides with
    :func:`projection_matrix` when the features are full rank.
    """
    phi = feats.phi
    return phi @ np.linalg.pinv(_gram(mdp, feats)) @ (phi.T * mdp.nu[None, :])


def bellman_operator(mdp: FiniteMdp, values) -> np.ndarray:
    return expected_reward(mdp) + mdp.gamma * mdp.P @ values


def mse(z, mdp: FiniteMdp, feats: LinearFeatures) -> float:
    """``sum_s nu(s) (V(s) - (Phi z)(s))^2``."""
    err = solve_value_function(mdp) - feats.values(z)
    return float(mdp.nu @ err**2)


def values_mse(values, mdp: FiniteMdp, true_values=None) -> float:
    """Weighted squared error of an arbitrary value vector."""
    if true_values is None:
        true_values = solve_value_function(mdp)
    err = np.asarray(values, dtype=float) - true_values
    return float(mdp.nu @ err**2)


def mspbe_exact(z, mdp: FiniteMdp, feats: LinearFeatures) -> float:
    """Mean squared projected Bellman error ``||Phi z - Pi T Phi z||^2_nu``.

    The projection is onto the column space of Phi, so rank-deficient
    feature matrices are accepted.
    """
    v = feats.values(z)
    proj = column_space_projection(mdp, feats)
    diff = v - proj @ bellman_operator(mdp, v)
    return float(mdp.nu @ diff**2)


def msbr_exact(z, mdp: FiniteMdp, feats: LinearFeatures) -> float:
    """Mean squared Bellman residual ``sum_s nu(s) (T Phi z - Phi z)(s)^2``."""
    v = feats.values(z)
    res = bellman_operator(mdp, v) - v
    return float(mdp.nu @ res**2)


def values_msbr(values, mdp: FiniteMdp) -> float:
    values = np.asarray(values, dtype=float)
    res = bellman_operator(mdp, values) - values
    return float(mdp.nu @ res**2)


def concentration_coefficient(mdp: FiniteMdp) -> float:
    """``max_{s,s'} P(s, s') / nu(s)``."""
    return float(np.max(mdp.P / mdp.nu[:, None]))


def mse_bound_from_msbr(z, mdp: FiniteMdp, feats: LinearFeatures) -> float:
    """Upper bound on sqrt(MSE) implied by the Bellman residual."""
    c = concentration_coefficient(mdp)
    return float(np.sqrt(c) / (1.0 - mdp.gamma) * np.sqrt(msbr_exact(z, mdp, feats)))


def exact_mspbe_moments(mdp: FiniteMdp, feats: LinearFeatures):
    """Limits of the MSPBE statistics tracker.

    Returns ``(E[r phi], E[phi (gamma phi' - phi)^T], E[phi phi^T]^-1)``; the
    last entry is a pseudo-inverse when the features are rank deficient.
    """
    phi = feats.phi
    d_phi = phi.T * mdp.nu[None, :]
    w0 = d_phi @ expected_reward(mdp)
    w1 = d_phi @ (mdp.gamma * mdp.P @ phi - phi)
    gram = d_phi @ phi
    w2 = linalg.inv(gram) if feats.full_rank else np.linalg.pinv(gram)
    return w0, w1, 0.5 * (w2 + w2.T)


def exact_msbr_moments(mdp: FiniteMdp, feats: LinearFeatures):
    """Limits of the double-sampled MSBR statistics tracker.

    Returns ``(u0, u1, u2, u3)`` with ``u0 = E[E[r|s]^2]``,
    ``u1 = gamma^2 E[E[phi'|s] E[phi'|s]^T]``,
    ``u2 = E[E[r|s] (gamma E[phi'|s] - phi)]`` and
    ``u3 = E[(phi - 2 gamma E[phi'|s]) phi^T]``.
    """
    phi = feats.phi
    nu = mdp.nu
    g = mdp.gamma
    rbar = expected_reward(mdp)
    nxt = mdp.P @ phi
    u0 = float(nu @ rbar**2)
    u1 = g * g * (nxt.T * nu[None, :]) @ nxt
    u2 = (g * nxt - phi).T @ (nu * rbar)
    u3 = ((phi - 2 * g * nxt).T * nu[None, :]) @ phi
    return u0, u1, u2, u3


def mspbe_minimizer(mdp: FiniteMdp, feats: LinearFeatures) -> np.ndarray:
    """Minimum-norm solution of the projected Bellman fixed point ``A z + b = 0``."""
    w0, w1, _ = exact_mspbe_moments(mdp, feats)
    return np.linalg.lstsq(w1, -w0, rcond=None)[0]


def msbr_minimizer(mdp: FiniteMdp, feats: LinearFeatures) -> np.ndarray:
    """Minimum-norm weighted least-squares Bellman residual solution."""
    phi = feats.phi
    m = mdp.gamma * mdp.P @ phi - phi
    sq = np.sqrt(mdp.nu)[:, None]
    return np.linalg.lstsq(sq * m, -sq[:, 0] * expected_reward(mdp), rcond=None)[0]


def _next_states(P_cum: np.ndarray, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] > P_cum[s]).sum(axis=1)
    return np.minimum(idx, P_cum.shape[1] - 1)


def sample_transition(mdp: FiniteMdp, rng: np.random.Generator) -> Transition:
    """Draw ``s ~ nu`` and ``s' ~ P(s, .)``."""
    s = int(rng.choice(mdp.n_states, p=mdp.nu))
    s2 = int(rng.choice(mdp.n_states, p=mdp.P[s]))
    return Transition(s, float(mdp.reward[s, s2]), s2)


def sample_double_transition(mdp: FiniteMdp, rng: np.random.Generator) -> DoubleTransition:
    """Draw ``s ~ nu`` and two independent successors of ``s``."""
    s = int(rng.choice(mdp.n_states, p=mdp.nu))
    s1 = int(rng.choice(mdp.n_states, p=mdp.P[s]))
    s2 = int(rng.choice(mdp.n_states, p=mdp.P[s]))
    return DoubleTransition(s, float(mdp.reward[s, s1]), float(mdp.reward[s, s2]), s1, s2)


def sample_batch(mdp: FiniteMdp, size: int, rng: np.random.Generator, double: bool = False):
    """Vectorized i.i.d. transitions.

    Returns index arrays ``(s, s_next)`` or ``(s, s_next, s_next2)``.
    """
    cum_nu = np.cumsum(mdp.nu)
    s = np.minimum(np.searchsorted(cum_nu, rng.random(size), side="right"), mdp.n_states - 1)
    P_cum = np.cumsum(mdp.P, axis=1)
    s1 = _next_states(P_cum, s, rng.random(size))
    if not double:
        return s, s1
    s2 = _next_states(P_cum, s, rng.random(size))
    return s, s1, s2


@dataclass
class TransitionBatch:
    """Feature-level view of a block of sampled transitions.

    ``phi2``/``r2`` hold the independent second successor when double
    sampling was requested. State indices are kept for finite MDPs.
    """

    phi: np.ndarray
    r: np.ndarray
    phi_next: np.ndarray
    r2: Optional[np.ndarray] = None
    phi_next2: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    s_next: Optional[np.ndarray] = None
    s_next2: Optional[np.ndarray] = None

    def __len__(self):
        return self.r.shape[0]


class FiniteStream:
    """I.i.d. transitions ``s ~ nu``, ``s' ~ P(s, .)`` in feature form."""

    def __init__(self, mdp: FiniteMdp, phi: np.ndarray, rng: np.random.Generator,
                 double: bool = False):
        self.mdp = mdp
        self.phi = np.ascontiguousarray(phi, dtype=float)
        self.rng = rng
        self.double = double

    def next(self, size: int) -> TransitionBatch:
        R = self.mdp.reward
        if self.double:
            s, s1, s2 = sample_batch(self.mdp, size, self.rng, double=True)
            return TransitionBatch(self.phi[s], R[s, s1], self.phi[s1], R[s, s2],
                                   self.phi[s2], s, s1, s2)
        s, s1 = sample_batch(self.mdp, size, self.rng)
        return TransitionBatch(self.phi[s], R[s, s1], self.phi[s1], s=s, s_next=s1)


def rollout_onpolicy(mdp: FiniteMdp, s0: int, length: int, rng: np.random.Generator):
    """Follow the chain from ``s0`` for ``length`` transitions."""
    out = []
    s = int(s0)
    P_cum = np.cumsum(mdp.P, axis=1)
    for u in rng.random(length):
        s2 = int(_next_states(P_cum, np.array([s]), np.array([u]))[0])
        out.append(Transition(s, float(mdp.reward[s, s2]), s2))
        s = s2
    return out
