import numpy as np
import pytest
from sklearn.base import clone

from cemtd.baselines import lstd_from_batch
from cemtd.environments import make_ring10
from cemtd.estimators import CrossEntropyTdRegressor, LstdRegressor
from cemtd.mdp import FiniteStream, msbr_exact, mspbe_exact

from conftest import random_mdp, whitened_features

CE_KW = dict(gamma=0.5, n_iter=100_000, r_shape=0.1, c=0.2, step_alpha=0.05,
             step_beta="t^-0.6", var_init=4.0, random_state=3)


@pytest.fixture(scope="module")
def small_problem():
    rng = np.random.default_rng(9)
    mdp, feats = random_mdp(rng, 6, k=2, gamma=0.5)
    feats = whitened_features(mdp, feats.phi)
    b = FiniteStream(mdp, feats.phi, np.random.default_rng(10), double=True).next(20_000)
    return mdp, feats, b


def test_params_and_clone():
    est = CrossEntropyTdRegressor(c=0.3, n_iter=10)
    assert est.get_params()["c"] == 0.3
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert clone(LstdRegressor(gamma=0.7)).gamma == 0.7


def test_lstd_regressor_matches_batch_solver():
    env = make_ring10()
    b = FiniteStream(env.mdp, env.feats.phi, np.random.default_rng(0)).next(5000)
    X = np.hstack([b.phi, b.phi_next])
    est = LstdRegressor(gamma=env.mdp.gamma).fit(X, b.r)
    want = lstd_from_batch(b.phi, b.r, b.phi_next, env.mdp.gamma, 0.0, est.epsilon)
    assert np.array_equal(est.coef_, want)
    assert np.allclose(est.predict(env.feats.phi), env.feats.phi @ want)
    assert np.allclose(est.coef_, 100.0, rtol=1e-3)


def test_ce_regressor_reduces_projected_error(small_problem):
    mdp, feats, b = small_problem
    est = CrossEntropyTdRegressor(**CE_KW).fit(np.hstack([b.phi, b.phi_next]), b.r)
    assert est.n_features_in_ == 2 and est.covariance_.shape == (2, 2)
    assert mspbe_exact(est.coef_, mdp, feats) < 0.05 * mspbe_exact(np.zeros(2), mdp, feats)
    again = CrossEntropyTdRegressor(**CE_KW).fit(np.hstack([b.phi, b.phi_next]), b.r)
    assert np.array_equal(est.coef_, again.coef_)


def test_ce_regressor_residual_form(small_problem):
    mdp, feats, b = small_problem
    est = CrossEntropyTdRegressor(objective="msbr", **CE_KW)
    est.fit(np.hstack([b.phi, b.phi_next, b.phi_next2]), np.c_[b.r, b.r2])
    assert est.n_updates_ > 0
    assert msbr_exact(est.coef_, mdp, feats) < msbr_exact(np.zeros(2), mdp, feats)


def test_input_errors(small_problem):
    _, _, b = small_problem
    X = np.hstack([b.phi, b.phi_next])
    with pytest.raises(ValueError):
        CrossEntropyTdRegressor(objective="mse").fit(X, b.r)
    with pytest.raises(ValueError):
        LstdRegressor().fit(X[:, :3], b.r)
    with pytest.raises(ValueError):
        LstdRegressor().fit(X, b.r[:-1])
    with pytest.raises(ValueError):
        CrossEntropyTdRegressor(objective="msbr").fit(np.hstack([X, b.phi_next2]), b.r)
    with pytest.raises(Exception):
        LstdRegressor().predict(b.phi)
