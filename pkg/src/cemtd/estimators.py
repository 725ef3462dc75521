"""Scikit-learn style estimators over arrays of logged transitions.

``X`` stacks the current features and the successor features column-wise,
``[phi | phi']`` for projected-error methods and ``[phi | phi' | phi'']``
when a second independent successor is available. ``y`` holds the reward of
each transition (two columns for the double-sampled form).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .baselines import LS_EPSILON, lstd_from_batch
from .ce import CeConfig, GaussianModel
from .mdp import TransitionBatch
from .objectives import run_sce_msbrm, run_sce_mspbem


class _ArrayStream:
    """Serve rows of fixed arrays, drawn uniformly with replacement."""

    def __init__(self, phi, r, phi_next, r2, phi_next2, rng):
        self.phi, self.r, self.phi_next = phi, r, phi_next
        self.r2, self.phi_next2 = r2, phi_next2
        self.rng = rng

    def next(self, size):
        i = self.rng.integers(0, len(self.r), size)
        if self.phi_next2 is None:
            return TransitionBatch(self.phi[i], self.r[i], self.phi_next[i])
        return TransitionBatch(self.phi[i], self.r[i], self.phi_next[i], self.r2[i],
                               self.phi_next2[i])


def _split(X, y, n_blocks, n_features):
    X = check_array(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if n_features is None:
        if X.shape[1] % n_blocks:
            raise ValueError(f"X must have a multiple of {n_blocks} columns")
        n_features = X.shape[1] // n_blocks
    if X.shape[1] != n_blocks * n_features:
        raise ValueError(f"X has {X.shape[1]} columns, expected {n_blocks * n_features}")
    blocks = [np.ascontiguousarray(X[:, j * n_features:(j + 1) * n_features])
              for j in range(n_blocks)]
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    return blocks, y, n_features


class LstdRegressor(RegressorMixin, BaseEstimator):
    """Least-squares temporal-difference fit of linear value weights."""

    def __init__(self, gamma=0.9, lam=0.0, epsilon=LS_EPSILON):
        self.gamma = gamma
        self.lam = lam
        self.epsilon = epsilon

    def fit(self, X, y):
        (phi, phi_next), r, k = _split(X, y, 2, None)
        self.coef_ = lstd_from_batch(phi, r.ravel(), phi_next, self.gamma, self.lam,
                                     self.epsilon)
        self.n_features_in_ = k
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=float) @ self.coef_


class CrossEntropyTdRegressor(RegressorMixin, BaseEstimator):
    """Linear value weights found by the stochastic cross-entropy optimizer.

    ``objective="mspbe"`` expects ``X = [phi | phi']``; ``"msbr"`` expects
    ``X = [phi | phi' | phi'']`` and ``y`` with two reward columns.
    Transitions are resampled uniformly for ``n_iter`` iterations.
    """

    def __init__(self, objective="mspbe", gamma=0.9, n_iter=100_000, mean_init=0.0,
                 var_init=1.0, rho=0.1, lambda_mix=0.01, epsilon1=0.8, r_shape=1e-6,
                 c=0.01, step_alpha=0.001, step_beta=0.05, random_state=None):
        self.objective = objective
        self.gamma = gamma
        self.n_iter = n_iter
        self.mean_init = mean_init
        self.var_init = var_init
        self.rho = rho
        self.lambda_mix = lambda_mix
        self.epsilon1 = epsilon1
        self.r_shape = r_shape
        self.c = c
        self.step_alpha = step_alpha
        self.step_beta = step_beta
        self.random_state = random_state

    def fit(self, X, y):
        if self.objective not in ("mspbe", "msbr"):
            raise ValueError(f"objective must be 'mspbe' or 'msbr', got {self.objective!r}")
        double = self.objective == "msbr"
        blocks, y, k = _split(X, y, 3 if double else 2, None)
        if double and (y.ndim != 2 or y.shape[1] != 2):
            raise ValueError("the residual objective needs y with two reward columns")
        seed = check_random_state(self.random_state).randint(0, 2**31 - 1)
        rng = np.random.default_rng(seed)
        r = y[:, 0] if double else y.ravel()
        stream = _ArrayStream(blocks[0], r, blocks[1], y[:, 1] if double else None,
                              blocks[2] if double else None, rng)
        cfg = CeConfig(rho=self.rho, lambda_mix=self.lambda_mix, epsilon1=self.epsilon1,
                       r_shape=self.r_shape, c=self.c, step_alpha=self.step_alpha,
                       step_beta=self.step_beta)
        theta0 = GaussianModel.isotropic(np.full(k, float(self.mean_init)), self.var_init)
        run = run_sce_msbrm if double else run_sce_mspbem
        res = run(stream, self.gamma, cfg, theta0, int(self.n_iter), rng,
                  record_every=max(1, int(self.n_iter)))
        self.coef_ = res.final_mu
        self.covariance_ = res.final_sigma
        self.n_updates_ = int(res.n_updates[-1])
        self.converged_ = res.converged
        self.n_features_in_ = k
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=float) @ self.coef_
