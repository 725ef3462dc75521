import numpy as np
import pytest

from cemtd.mdp import FiniteMdp, LinearFeatures, stationary_distribution


def random_mdp(rng, n, k=None, gamma=None, stationary=False, sparse=False):
    """Random ergodic MDP with strictly positive nu and random full-rank features."""
    P = rng.random((n, n)) + 0.05
    if sparse:
        P *= rng.random((n, n)) < 0.5
        P[np.arange(n), (np.arange(n) + 1) % n] += 0.5
    P /= P.sum(axis=1, keepdims=True)
    R = rng.normal(size=(n, n))
    if stationary:
        nu = stationary_distribution(P)
    else:
        nu = rng.random(n) + 0.1
        nu /= nu.sum()
    g = float(rng.uniform(0.1, 0.95)) if gamma is None else gamma
    mdp = FiniteMdp(P, R, g, nu)
    if k is None:
        return mdp
    while True:
        phi = rng.normal(size=(n, k))
        feats = LinearFeatures(phi)
        if feats.full_rank:
            return mdp, feats


def whitened_features(mdp, phi):
    """Rescale columns so that the nu-weighted Gram matrix is the identity."""
    gram = phi.T @ (mdp.nu[:, None] * phi)
    w, V = np.linalg.eigh(gram)
    return LinearFeatures(phi @ V @ np.diag(w ** -0.5) @ V.T)


def tracker_problem():
    """Fixed sparse 10-state MDP with whitened features, used for tracker limits.

    Sparse rows make the conditional successor means differ across states and
    the rewards have a state-dependent mean, so every tracked moment is well
    away from zero relative to its sampling noise at 1e5 samples.
    """
    rng = np.random.default_rng(4)
    mdp, feats = random_mdp(rng, 10, k=4, gamma=0.9, sparse=True)
    R = rng.normal(size=10)[:, None] * 2 + 0.3 * rng.normal(size=(10, 10))
    mdp = FiniteMdp(mdp.P, R, mdp.gamma, mdp.nu)
    return mdp, whitened_features(mdp, feats.phi)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
