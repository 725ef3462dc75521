import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cemtd.ce import CeConfig, GaussianModel
from cemtd.environments import make_baird, make_nonlinear_ring, make_ring10, spiral_manifold
from cemtd.mdp import (FiniteStream, LinearFeatures, exact_msbr_moments, exact_mspbe_moments,
                       msbr_exact, mspbe_exact, sample_batch, values_msbr)
from cemtd.objectives import (MsbrTracker, MspbeTracker, NlMsbrTracker, NumericalAbort,
                              exact_nl_moments, feature_warp, jb_estimate, jp_estimate,
                              msbr_tracker_step, mspbe_tracker_step, nl_jb_estimate,
                              nl_msbr_tracker_step, nl_msbr_value, run_sce_msbrm,
                              run_sce_mspbem, run_sce_spiral, spiral_coordinates)

from conftest import random_mdp, tracker_problem, whitened_features

seeds = st.integers(0, 2**32 - 1)
FAST = CeConfig(rho=0.1, lambda_mix=0.01, epsilon1=0.8, r_shape=0.1, c=0.3,
                step_alpha=0.05, step_beta=0.02)


def _rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12)


# --- exact evaluation ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seeds)
def test_estimates_with_exact_moments_equal_exact_objectives(seed):
    rng = np.random.default_rng(seed)
    mdp, feats = random_mdp(rng, int(rng.integers(3, 12)), k=3)
    z = rng.normal(size=3) * 4
    w = MspbeTracker(*exact_mspbe_moments(mdp, feats))
    u0, u1, u2, u3 = exact_msbr_moments(mdp, feats)
    u = MsbrTracker(u0, u1, u2, u3)
    pbe, br = mspbe_exact(z, mdp, feats), msbr_exact(z, mdp, feats)
    assert abs(jp_estimate(w, z) + pbe) <= 1e-9 * max(1.0, pbe)
    assert abs(jb_estimate(u, z) + br) <= 1e-9 * max(1.0, br)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-300, 300))
def test_spiral_statistics_match_residual_oracle(seed, eta):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    u = exact_nl_moments(mdp, a, b)
    v = spiral_manifold(a, b, 0.01, 0.001).evaluate(np.array([eta]))
    ref = values_msbr(v, mdp)
    assert abs(nl_msbr_value(u, eta) - ref) <= 1e-8 * max(1.0, ref)
    assert nl_jb_estimate(NlMsbrTracker(u), eta) == -nl_msbr_value(u, eta)


def test_spiral_coordinates():
    assert np.allclose(spiral_coordinates(0.0), [1.0, 0.0])
    y = spiral_coordinates(np.pi / 2 / 0.01, tau=0.01, eps=0.0)
    assert np.allclose(y, [0.0, -1.0], atol=1e-12)


def test_warped_residual_matches_oracle(rng):
    mdp, feats = random_mdp(rng, 6, k=3)
    u = MsbrTracker(*exact_msbr_moments(mdp, feats))
    z = rng.normal(size=3)
    y = feature_warp(z, 0.1)
    assert np.allclose(y, np.cos(z) ** 2 * np.exp(0.1 * z))
    assert jb_estimate(u, y) == pytest.approx(-values_msbr(feats.phi @ y, mdp), rel=1e-9)


def test_zero_statistics_give_zero():
    assert jp_estimate(MspbeTracker.zeros(4), np.ones(4)) == 0.0
    assert jb_estimate(MsbrTracker.zeros(4), np.ones(4)) == 0.0
    assert nl_msbr_value(NlMsbrTracker(), 12.0) == 0.0


# --- single steps -------------------------------------------------------------------

def test_mspbe_one_step():
    phi, phin = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    w = mspbe_tracker_step(MspbeTracker.zeros(2), phi, 3.0, phin, 0.9, 1.0)
    assert np.allclose(w.w0, 3.0 * phi)
    assert np.allclose(w.w1, np.outer(phi, 0.9 * phin - phi))
    assert np.allclose(w.w2, np.eye(2))
    w = mspbe_tracker_step(w, phi, 0.0, phin, 0.9, 0.5)
    assert np.allclose(w.w2, np.eye(2) + 0.5 * (np.eye(2) - np.outer(phi, phi)))


def test_msbr_one_step():
    phi, f1, f2 = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([2.0, 1.0])
    u = msbr_tracker_step(MsbrTracker.zeros(2), phi, 2.0, 3.0, f1, f2, 0.5, 1.0)
    assert u.u0 == 6.0
    assert np.allclose(u.u1, 0.25 * np.outer(f1, f2))
    assert np.allclose(u.u2, 2.0 * (0.5 * f2 - phi))
    assert np.allclose(u.u3, np.outer(phi - f1, phi))


def test_nl_one_step():
    a, b = np.array([1.0, 2.0]), np.array([0.0, -1.0])
    u = nl_msbr_tracker_step(NlMsbrTracker(), 1.0, 2.0, 0, 1, 0, a, b, 0.5, 1.0)
    h = np.array([1.0, 0.5 * 2.0 - 1.0, 0.5 * -1.0 - 0.0])
    h2 = np.array([2.0, 0.5 * 1.0 - 1.0, 0.0])
    assert np.allclose(u.u, np.outer(h, h2))


# --- stochastic limits --------------------------------------------------------------

@pytest.fixture(scope="module")
def whitened_problem():
    return tracker_problem()


def test_mspbe_tracker_converges_to_moments(whitened_problem):
    mdp, feats = whitened_problem
    b = FiniteStream(mdp, feats.phi, np.random.default_rng(1)).next(100_000)
    w = MspbeTracker.zeros(4)
    for t in range(len(b)):
        w = mspbe_tracker_step(w, b.phi[t], b.r[t], b.phi_next[t], mdp.gamma, 1.0 / (t + 1))
    w0, w1, w2 = exact_mspbe_moments(mdp, feats)
    assert _rel(w.w0, w0) < 0.03 and _rel(w.w1, w1) < 0.03 and _rel(w.w2, w2) < 0.03


def test_msbr_tracker_converges_to_moments(whitened_problem):
    mdp, feats = whitened_problem
    b = FiniteStream(mdp, feats.phi, np.random.default_rng(2), double=True).next(100_000)
    u = MsbrTracker.zeros(4)
    for t in range(len(b)):
        u = msbr_tracker_step(u, b.phi[t], b.r[t], b.r2[t], b.phi_next[t], b.phi_next2[t],
                              mdp.gamma, 1.0 / (t + 1))
    ex = exact_msbr_moments(mdp, feats)
    assert abs(u.u0 - ex[0]) < 0.03 * abs(ex[0])
    for got, want in zip((u.u1, u.u2, u.u3), ex[1:]):
        assert _rel(got, want) < 0.03


def test_nl_tracker_converges_to_moments():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, 3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    s, s1, s2 = sample_batch(mdp, 100_000, np.random.default_rng(4), double=True)
    R = mdp.reward
    u = NlMsbrTracker()
    for t in range(s.size):
        u = nl_msbr_tracker_step(u, R[s[t], s1[t]], R[s[t], s2[t]], s[t], s1[t], s2[t], a, b,
                                 mdp.gamma, 1.0 / (t + 1))
    assert _rel(u.u, exact_nl_moments(mdp, a, b)) < 0.03


# --- compiled loop vs readable loop -------------------------------------------------

def _pair(run, env, double, iters=3000, **kw):
    theta0 = GaussianModel.isotropic(np.zeros(env.feats.n_features), 4.0)
    out = []
    for fast in (True, False):
        stream = FiniteStream(env.mdp, env.feats.phi, np.random.default_rng(5), double=double)
        out.append(run(stream, env.mdp.gamma, FAST, theta0, iters, np.random.default_rng(6),
                       record_every=100, chunk=1000, fast=fast, **kw))
    return out


@pytest.mark.parametrize("objective", ["mspbe", "msbr", "warp"])
def test_compiled_loop_matches_reference(objective):
    env = make_ring10()
    if objective == "mspbe":
        a, b = _pair(run_sce_mspbem, env, False)
    else:
        a, b = _pair(run_sce_msbrm, env, True, warp=0.1 if objective == "warp" else None)
    assert a.n_updates[-1] > 0
    assert np.array_equal(a.n_updates, b.n_updates)
    assert np.max(np.abs(a.mu - b.mu)) < 1e-10
    assert np.max(np.abs(a.gamma - b.gamma)) < 1e-10
    assert np.allclose(a.final_sigma, b.final_sigma, atol=1e-10)


def test_compiled_spiral_matches_reference():
    env = make_nonlinear_ring()
    mdp = random_mdp(np.random.default_rng(8), 3)
    a_vec, b_vec = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.2, -1.0])
    theta0 = GaussianModel.isotropic([0.0], 100.0)
    res = []
    for fast in (True, False):
        stream = FiniteStream(mdp, np.eye(3), np.random.default_rng(5), double=True)
        res.append(run_sce_spiral(stream, mdp, a_vec, b_vec, FAST, theta0, 3000,
                                  np.random.default_rng(6), chunk=1000, fast=fast))
    a, b = res
    assert env is not None and a.n_updates[-1] > 0
    assert np.array_equal(a.n_updates, b.n_updates)
    assert np.max(np.abs(a.mu - b.mu)) < 1e-10


def test_ceiling_aborts_both_routes():
    env = make_baird("imperfect")
    theta0 = GaussianModel.isotropic(np.zeros(8), 1.0)
    stream = FiniteStream(env.mdp, env.feats.phi, np.random.default_rng(0))
    res = run_sce_mspbem(stream, env.mdp.gamma, FAST, theta0, 2000, np.random.default_rng(1),
                         ceiling=1e-3)
    assert res.aborted is not None and res.t[-1] <= 100
    with pytest.raises(NumericalAbort):
        run_sce_mspbem(stream, env.mdp.gamma, FAST, theta0, 2000, np.random.default_rng(1),
                       ceiling=1e-3, fast=False)


def test_sce_solves_small_projected_problem():
    """Whitened ring features: the optimizer mean approaches the projected fixed point."""
    rng = np.random.default_rng(9)
    mdp, feats = random_mdp(rng, 6, k=2, gamma=0.5)
    feats = whitened_features(mdp, feats.phi)
    cfg = CeConfig(rho=0.1, lambda_mix=0.01, epsilon1=0.8, r_shape=0.1, c=0.2,
                   step_alpha=0.05, step_beta="t^-0.6")
    theta0 = GaussianModel.isotropic(np.zeros(2), 4.0)
    stream = FiniteStream(mdp, feats.phi, np.random.default_rng(10))
    res = run_sce_mspbem(stream, mdp.gamma, cfg, theta0, 100_000, np.random.default_rng(11),
                         record_every=10_000)
    assert mspbe_exact(res.final_mu, mdp, feats) < 0.05 * mspbe_exact(np.zeros(2), mdp, feats)
