import math

import numpy as np
import pytest
from scipy import integrate

from prefedit.field import ConstantField, MLPField, analytic_gaussian_field
from prefedit.io import write_trajectories
from prefedit.sampling import (ZERO_NOISE, NoiseSchedule, flow_time_drift, mean_gain, ode_sample,
                               sde_drift, sde_sample, step_mean, transition_logprob)


def test_sde_drift_examples():
    assert sde_drift([2.0], [1.0], 0.5, 0.4)[0] == pytest.approx(2.32, abs=1e-12)
    assert sde_drift([0.0], [1.0], 1.0, 1.0)[0] == pytest.approx(0.5, abs=1e-12)
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal(sde_drift(v, [5.0, 6.0], 0.7, 0.0), v)
    np.testing.assert_array_equal(sde_drift(v, [5.0, 6.0], 0.0, 0.0), v)


def test_sde_drift_errors():
    with pytest.raises(ValueError, match="singular"):
        sde_drift([1.0], [1.0], 0.0, 0.1)
    with pytest.raises(ValueError):
        sde_drift([1.0], [1.0], 1.5, 0.1)


def test_flow_time_drift_matches_hand_formula(rng):
    v, x = rng.standard_normal((2, 5, 2))
    t, s = 0.35, 0.3
    expected = v - s ** 2 / (2 * (1 - t)) * (x - t * v)
    np.testing.assert_allclose(flow_time_drift(v, x, t, s), expected, atol=1e-14)


def test_mean_gain_is_derivative_of_step_mean(rng):
    x = rng.standard_normal((1, 2))
    v = rng.standard_normal((1, 2))
    t, s, dt = 0.4, 0.3, 0.025
    h = 1e-6
    e = np.array([[h, 0.0]])
    num = (step_mean(v + e, x, t, s, dt) - step_mean(v - e, x, t, s, dt))[0, 0] / (2 * h)
    assert num == pytest.approx(mean_gain(t, s, dt), rel=1e-8)


def test_ode_examples():
    tr = ode_sample(ConstantField((1.0, 0.0)), np.zeros((1, 2)), steps=4)
    np.testing.assert_allclose(tr.terminal, [[1.0, 0.0]], atol=1e-15)
    x0 = np.array([[0.3, -0.4]])
    np.testing.assert_array_equal(ode_sample(ConstantField((0.0, 0.0)), x0, steps=1).terminal, x0)
    with pytest.raises(ValueError):
        ode_sample(ConstantField((0.0, 0.0)), x0, steps=0)


def test_ode_identity_flow_keeps_covariance():
    x0 = np.random.default_rng(0).standard_normal((10_000, 2))
    cov = np.cov(ode_sample(analytic_gaussian_field(1.0), x0, steps=100).terminal.T)
    np.testing.assert_allclose(cov, np.eye(2), atol=0.05)


def test_zero_noise_equals_ode_exactly():
    f = MLPField.create(hidden=(16,), seed=3)
    x0 = np.random.default_rng(0).standard_normal((50, 2))
    ode = ode_sample(f, x0, steps=20)
    sde = sde_sample(f, x0, steps=20, schedule=ZERO_NOISE, seed=9)
    np.testing.assert_array_equal(sde.states, ode.states)
    assert sde.deterministic


def test_marginal_preservation_gaussian():
    a = 2.0
    f = analytic_gaussian_field(a)
    x0 = np.random.default_rng(11).standard_normal((10_000, 2))
    sde = sde_sample(f, x0, steps=100, schedule=NoiseSchedule("constant", 0.3), seed=12)
    ode = ode_sample(f, x0, steps=100)
    for k in (25, 50, 75):
        t = k / 100
        target = (1 - t) ** 2 + t ** 2 * a ** 2
        var = sde.states[:, k].var(axis=0)
        np.testing.assert_allclose(var, target, rtol=0.05)
        assert np.all(np.abs(sde.states[:, k].mean(axis=0) - ode.states[:, k].mean(axis=0)) < 0.05)


def test_first_step_is_deterministic_and_logprobs_recompute():
    f = MLPField.create(hidden=(8,), seed=0)
    tr = sde_sample(f, np.zeros((4, 2)), steps=5, seed=1)
    assert not tr.stochastic[0] and tr.stochastic[1:].all()
    assert np.isnan(tr.logprobs[:, 0]).all()
    np.testing.assert_array_equal(tr.recompute_logprobs()[:, 1:], tr.logprobs[:, 1:])
    np.testing.assert_allclose(tr.variances[1:], 0.3 ** 2 / 5)


def test_sde_is_deterministic_and_batch_independent():
    f = MLPField.create(hidden=(8,), seed=0)
    x0 = np.random.default_rng(2).standard_normal((6, 2))
    a = sde_sample(f, x0, steps=10, seed=42)
    b = sde_sample(f, x0, steps=10, seed=42)
    np.testing.assert_array_equal(a.states, b.states)
    # a trajectory depends only on its own seed, not on its batch neighbours
    part = sde_sample(f, x0[2:4], steps=10, seed=list(a.seeds[2:4]))
    np.testing.assert_array_equal(part.states, a.states[2:4])
    assert not np.array_equal(sde_sample(f, x0, steps=10, seed=43).states, a.states)


def test_scaled_schedule():
    s = NoiseSchedule("scaled", 0.5)
    assert s.sigma(0.5) == pytest.approx(0.5)
    assert math.isinf(s.sigma(0.0))
    tr = sde_sample(analytic_gaussian_field(1.0), np.zeros((3, 2)), steps=10, schedule=s, seed=0)
    assert np.all(np.isfinite(tr.states))
    with pytest.raises(ValueError):
        NoiseSchedule("cosine", 0.1)
    with pytest.raises(ValueError):
        NoiseSchedule("constant", -1.0)


def test_transition_logprob_examples():
    assert transition_logprob([0.0], [0.0], 1.0, dim=1) == pytest.approx(-0.918939, abs=1e-6)
    sd = math.sqrt(0.3)
    d = transition_logprob([1.0 + sd], [1.0], 0.3) - transition_logprob([1.0], [1.0], 0.3)
    assert d == pytest.approx(-0.5, abs=1e-14)
    with pytest.raises(ValueError):
        transition_logprob([0.0], [0.0], 0.0)
    with pytest.raises(ValueError):
        transition_logprob([0.0, 1.0], [0.0, 1.0], 1.0, dim=1)


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (1.3, 0.02), (-2.0, 4.0)])
def test_transition_density_integrates_to_one(mean, var):
    total, _ = integrate.quad(lambda x: math.exp(transition_logprob([x], [mean], var)), -np.inf, np.inf)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_trajectory_csv(tmp_path):
    tr = sde_sample(ConstantField((1.0, 0.0)), np.zeros((2, 2)), steps=3, seed=0)
    write_trajectories(tr, tmp_path / "traj.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "traj_id,step,t,dim0,dim1,logprob"
    assert len(lines) == 1 + 2 * 4
    assert lines[1].endswith(",")  # initial state has no transition
