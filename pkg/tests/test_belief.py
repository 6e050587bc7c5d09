"""Particle belief tests: Bayes oracle, sampling statistics, dual effect."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_euler_step

from dmpd.belief import (
    ParameterPrior,
    ParticleSet,
    PredictedBelief,
    PriorComponent,
    belief_entropy,
    default_prior,
    friendly_probability,
    init_particles,
    posterior_weights,
    propagate_predicted_weights,
    resample_predicted,
    update_weights,
)
from dmpd.dynamics import (
    DriverParams,
    DynamicsConfig,
    EgoControl,
    JointState,
    NoiseModel,
    VehicleState,
    batch_deterministic_step,
    step,
)

CFG = DynamicsConfig()


def one_vehicle_scene(ego_x=-50.0, ego_y=-0.6, veh_v=0.8, veh_x=0.0):
    return JointState(
        ego=VehicleState(1.0, 0.0, ego_x, ego_y),
        traffic=[VehicleState(veh_v, 0.0, veh_x, 0.0)],
    )


def params_with(v_desired, yield_gain=0.0):
    return DriverParams(v_desired, 0.6, 0.3, 1.0, 1.4, yield_gain)


def point_prior(vec, n_v=1):
    return ParameterPrior(n_v, [PriorComponent(1.0, vec, vec)])


# ---------------------------------------------------------------------------
# init_particles

def test_init_uniform_weights():
    ps = init_particles(default_prior(2), 4, np.random.default_rng(0))
    assert np.allclose(ps.weights, 0.25)
    assert ps.particles.shape == (4, 2, 6)


def test_point_mass_prior_identical_particles():
    vec = params_with(1.1, 0.5).as_array()
    ps = init_particles(point_prior(vec), 16, np.random.default_rng(0))
    assert np.allclose(ps.particles, vec)


def test_prior_monte_carlo_mean():
    prior = default_prior(1)
    ps = init_particles(prior, 100_000, np.random.default_rng(42))
    emp = ps.particles[:, 0, :].mean(axis=0)
    se = np.sqrt(prior.variance() / 100_000)
    assert np.all(np.abs(emp - prior.mean()) < 3.0 * se)


def test_init_rejects_bad_count():
    with pytest.raises(ValueError):
        init_particles(default_prior(1), 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# update_weights

def likelihood_ratio_fixture(ratio):
    """Two particles whose direct-domain likelihood ratio is exactly ``ratio``."""
    scene = one_vehicle_scene()
    u = EgoControl(0.0, 0.0)
    pa, pb = params_with(1.0), params_with(1.3)
    det_a = oracle_euler_step(scene, u, [pa], 0.1, CFG)
    det_b = oracle_euler_step(scene, u, [pb], 0.1, CFG)
    dv = det_a.traffic[0].v - det_b.traffic[0].v
    var = dv * dv / (2.0 * math.log(ratio))
    noise = NoiseModel.diagonal([var] * 8)
    particles = np.stack([pa.as_array(), pb.as_array()])[:, None, :]
    ps = ParticleSet(particles, np.array([0.5, 0.5]))
    return ps, det_a, scene, u, noise


def test_update_four_to_one_ratio():
    ps, observed, scene, u, noise = likelihood_ratio_fixture(4.0)
    out = update_weights(ps, observed, scene, u, 0.1, noise, CFG)
    assert np.allclose(out.weights, [0.8, 0.2], atol=1e-12)
    assert not out.degenerate


def test_update_flat_likelihood_keeps_weights():
    vec = params_with(1.1).as_array()
    particles = np.stack([vec, vec])[:, None, :]
    ps = ParticleSet(particles, np.array([0.3, 0.7]))
    scene = one_vehicle_scene()
    u = EgoControl(0.0, 0.0)
    observed = oracle_euler_step(scene, u, [params_with(1.1)], 0.1, CFG)
    out = update_weights(ps, observed, scene, u, 0.1, NoiseModel.diagonal([1e-3] * 8), CFG)
    assert np.allclose(out.weights, [0.3, 0.7], atol=1e-12)


def brute_force_posterior(particles, trajectory, controls, dt, noise, cfg):
    """Direct product-of-densities posterior over a discrete particle set."""
    logw = np.zeros(len(particles))
    for j, theta_vec in enumerate(particles):
        theta = [DriverParams.from_array(theta_vec[i]) for i in range(theta_vec.shape[0])]
        for t in range(len(controls)):
            det = oracle_euler_step(trajectory[t], controls[t], theta, dt, cfg)
            r = trajectory[t + 1].as_vector() - det.as_vector()
            logw[j] += float(noise.logpdf(r))
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def bayes_oracle_fixture(n_p=5, n_steps=3, seed=123):
    rng = np.random.default_rng(seed)
    prior = default_prior(1)
    ps = init_particles(prior, n_p, rng)
    truth = [DriverParams.from_array(prior.sample(rng, 1)[0, 0])]
    noise = NoiseModel.diagonal([4e-4, 4e-5, 4e-5, 4e-5] * 2)
    scene = one_vehicle_scene(ego_x=-0.2, ego_y=-0.4, veh_v=0.9)
    controls = [EgoControl(0.2, 0.05), EgoControl(0.1, 0.0), EgoControl(0.0, -0.05)]
    trajectory = [scene]
    for t in range(n_steps):
        scene = step(scene, controls[t], truth, 0.1, noise, rng, CFG)
        trajectory.append(scene)
    return ps, trajectory, controls, noise


def test_three_step_posterior_matches_brute_force():
    ps, trajectory, controls, noise = bayes_oracle_fixture()
    out = ps
    for t in range(3):
        out = update_weights(out, trajectory[t + 1], trajectory[t], controls[t], 0.1, noise, CFG)
    expected = brute_force_posterior(ps.particles, trajectory, controls, 0.1, noise, CFG)
    assert np.all(np.abs(out.weights - expected) <= 1e-10 * np.maximum(expected, 1e-300))


def test_degenerate_update_freezes_and_flags():
    vec = params_with(1.1).as_array()
    ps = ParticleSet(np.stack([vec, vec])[:, None, :], np.array([0.4, 0.6]))
    scene = one_vehicle_scene()
    absurd = JointState(ego=VehicleState(1.0, 0.0, 1e6, 0.0),
                        traffic=[VehicleState(0.8, 0.0, -1e6, 0.0)])
    out = update_weights(ps, absurd, scene, EgoControl(0, 0), 0.1,
                         NoiseModel.diagonal([1e-6] * 8), CFG)
    assert out.degenerate
    assert np.allclose(out.weights, [0.4, 0.6])


# ---------------------------------------------------------------------------
# posterior_weights properties

@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_posterior_normalized_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n))
    ll = rng.normal(-100, 30, n)
    out, flag = posterior_weights(w, ll)
    assert not flag
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    perm = rng.permutation(n)
    out_p, _ = posterior_weights(w[perm], ll[perm])
    assert np.allclose(out_p, out[perm], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
@settings(max_examples=50, deadline=None)
def test_posterior_likelihood_monotonicity(seed, bump):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(5))
    ll = rng.normal(-50, 10, 5)
    base, _ = posterior_weights(w, ll)
    ll2 = ll.copy()
    ll2[2] += bump
    bumped, _ = posterior_weights(w, ll2)
    assert bumped[2] >= base[2] - 1e-12


# ---------------------------------------------------------------------------
# resample_predicted

def test_resample_concentrated():
    vecs = np.stack([params_with(1.0 + 0.1 * i).as_array() for i in range(4)])[:, None, :]
    ps = ParticleSet(vecs, np.array([0.0, 1.0, 0.0, 0.0]))
    pb = resample_predicted(ps, 6, np.random.default_rng(0))
    assert np.allclose(pb.particles, vecs[1])
    assert np.allclose(pb.current_weights, 1.0 / 6.0)


def test_resample_uniform_chi_square():
    from scipy.stats import chisquare
    n_p = 8
    vecs = np.stack([params_with(1.0 + 0.05 * i).as_array() for i in range(n_p)])[:, None, :]
    ps = ParticleSet(vecs, np.full(n_p, 1.0 / n_p))
    rng = np.random.default_rng(2024)
    counts = np.zeros(n_p)
    for _ in range(10_000):
        pb = resample_predicted(ps, n_p, rng)
        # Identify draws by the v_desired value they carry.
        idx = np.rint((pb.particles[:, 0, 0] - 1.0) / 0.05).astype(int)
        np.add.at(counts, idx, 1)
    assert chisquare(counts).pvalue > 0.01


# ---------------------------------------------------------------------------
# propagate_predicted_weights

def test_propagate_identical_particles_unchanged():
    vec = params_with(1.1).as_array()
    pb = PredictedBelief(np.stack([vec, vec, vec])[:, None, :],
                         [np.array([0.2, 0.5, 0.3])])
    scene = one_vehicle_scene()
    u = EgoControl(0.1, 0.0)
    expected = oracle_euler_step(scene, u, [params_with(1.1)], 0.1, CFG)
    out = propagate_predicted_weights(pb, expected, scene, u, 0, 0.1,
                                      NoiseModel.diagonal([1e-3] * 8), CFG)
    assert np.allclose(out.current_weights, [0.2, 0.5, 0.3], atol=1e-12)
    assert len(out.weights_by_step) == 2


def test_propagate_two_particle_gaussian_ratio():
    scene = one_vehicle_scene()
    u = EgoControl(0.0, 0.0)
    pa, pb_params = params_with(1.0), params_with(1.3)
    det_a = oracle_euler_step(scene, u, [pa], 0.1, CFG)
    det_b = oracle_euler_step(scene, u, [pb_params], 0.1, CFG)
    noise = NoiseModel.diagonal([2e-4] * 8)
    pb = PredictedBelief(
        np.stack([pa.as_array(), pb_params.as_array()])[:, None, :],
        [np.array([0.5, 0.5])],
    )
    out = propagate_predicted_weights(pb, det_a, scene, u, 0, 0.1, noise, CFG)
    r = det_a.as_vector() - det_b.as_vector()
    expected_ratio = math.exp(0.5 * float(noise.quadform(r)))
    got = out.current_weights
    assert got[0] / got[1] == pytest.approx(expected_ratio, rel=1e-9)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_propagate_requires_consistent_step_index():
    vec = params_with(1.1).as_array()
    pb = PredictedBelief(vec[None, None, :], [np.array([1.0])])
    scene = one_vehicle_scene()
    with pytest.raises(ValueError):
        propagate_predicted_weights(pb, scene, scene, EgoControl(0, 0), 3, 0.1,
                                    NoiseModel.diagonal([1e-3] * 8), CFG)


# ---------------------------------------------------------------------------
# dual effect fixture

def rollout_weights(pb, scene, plan, noise, dt=0.1):
    """Noiseless per-particle rollout driving the predicted-weight chain."""
    states = np.broadcast_to(scene.as_matrix(), (pb.n_hat,) + scene.as_matrix().shape).copy()
    for k, u in enumerate(plan):
        dets = batch_deterministic_step(states, u.as_array(), pb.particles, dt, CFG)
        expected = JointState.from_matrix(dets.mean(axis=0))
        pb = propagate_predicted_weights(pb, expected, states, u, k, dt, noise, CFG)
        states = dets
    return pb


def dual_effect_fixture():
    scene = JointState(
        ego=VehicleState(1.0, 0.0, 0.3, -0.5),
        traffic=[VehicleState(1.0, 0.0, 0.0, 0.0)],
    )
    vecs = np.stack([
        params_with(1.00, yield_gain=0.0).as_array(),
        params_with(1.02, yield_gain=0.0).as_array(),
        params_with(1.01, yield_gain=1.0).as_array(),
    ])[:, None, :]
    pb = PredictedBelief(vecs, [np.full(3, 1.0 / 3.0)])
    noise = NoiseModel.diagonal([4e-4, 4e-5, 4e-5, 4e-5] * 2)
    hold = [EgoControl(0.0, 0.0)] * 8
    probe = [EgoControl(0.0, 0.3)] * 8
    return scene, pb, noise, hold, probe


def test_dual_effect_plans_change_predicted_weights():
    scene, pb, noise, hold, probe = dual_effect_fixture()
    w_hold = rollout_weights(pb, scene, hold, noise).current_weights
    w_probe = rollout_weights(pb, scene, probe, noise).current_weights
    assert np.max(np.abs(w_hold - w_probe)) > 1e-3
    assert belief_entropy(w_probe) < belief_entropy(w_hold)


# ---------------------------------------------------------------------------
# entropy and summaries

def test_entropy_uniform():
    assert belief_entropy(np.full(4, 0.25)) == pytest.approx(1.3862943611198906188, abs=1e-12)


def test_entropy_point_mass():
    assert belief_entropy(np.array([0.0, 1.0, 0.0])) == 0.0


def test_entropy_frozen_scalar():
    # -(0.8 ln 0.8 + 0.2 ln 0.2), high-precision scalar evaluation.
    assert belief_entropy(np.array([0.8, 0.2])) == pytest.approx(
        0.50040242353818787953, abs=1e-12)


def test_friendly_probability():
    vecs = np.stack([params_with(1.0, 0.05).as_array(), params_with(1.0, 0.9).as_array()])
    particles = vecs[:, None, :]
    assert friendly_probability(particles, np.array([0.25, 0.75]), 1) == pytest.approx(0.75)


def test_weight_validation():
    vec = params_with(1.0).as_array()
    with pytest.raises(ValueError):
        ParticleSet(vec[None, None, :], np.array([0.5]))
