import numpy as np
import pytest

from prefedit.field import ConstantField, MLPField
from prefedit.flow import NonFiniteError, SGD, TrainConfig, flow_matching_loss, interpolate, train_flow
from prefedit.io import read_reward_curve, write_loss_curve
from prefedit.toy import pair_sampler, point_mass, two_mode_mixture


@pytest.mark.parametrize("t,expected", [(0.0, (0, 0)), (1.0, (2, 4)), (0.5, (1, 2))])
def test_interpolate_examples(t, expected):
    np.testing.assert_array_equal(interpolate((0, 0), (2, 4), t), expected)


def test_interpolate_is_affine_in_t(rng):
    x0, x1 = rng.standard_normal((2, 10, 3))
    t = rng.uniform(size=10)
    np.testing.assert_allclose(interpolate(x0, x1, t), x0 + t[:, None] * (x1 - x0), atol=1e-15)


def test_interpolate_errors():
    with pytest.raises(ValueError, match="dimension"):
        interpolate((0, 0), (1, 2, 3), 0.5)
    with pytest.raises(ValueError):
        interpolate((0,), (1,), 1.5)


def test_loss_examples():
    x0, x1 = np.zeros((1, 2)), np.array([[1.0, 0.0]])
    assert flow_matching_loss(ConstantField((0.0, 0.0)), x0, x1, 0.37)[0] == 1.0
    assert flow_matching_loss(ConstantField((1.0, 0.0)), x0, x1, 0.37)[0] == 0.0


def test_loss_gradient_matches_finite_differences(rng):
    f = MLPField.create(2, 0, (6,), seed=4)
    x0, x1 = rng.standard_normal((2, 8, 2))
    t = rng.uniform(size=8)
    loss, g = flow_matching_loss(f, x0, x1, t)
    assert loss >= 0
    h = 1e-5
    num = np.zeros_like(g)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = h
        lp = flow_matching_loss(f.with_params(f.params + e), x0, x1, t, with_grad=False)[0]
        lm = flow_matching_loss(f.with_params(f.params - e), x0, x1, t, with_grad=False)[0]
        num[i] = (lp - lm) / (2 * h)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4


def test_point_mass_training_reduces_loss():
    cfg = TrainConfig(steps=500, lr=0.02, batch_size=128, seed=0)
    res = train_flow(MLPField.create(hidden=(32, 32), seed=0), pair_sampler(point_mass((1.5, -1.0))), cfg)
    assert res.smoothed_final_loss(20) < 0.1 * np.mean(res.losses[:20])


def test_zero_steps_leaves_parameters():
    f = MLPField.create(seed=0)
    res = train_flow(f, pair_sampler(two_mode_mixture()), TrainConfig(steps=0, lr=0.1))
    np.testing.assert_array_equal(res.field.params, f.params)
    assert res.losses == []


def test_training_is_deterministic_and_does_not_mutate_input():
    f = MLPField.create(hidden=(8,), seed=0)
    before = f.params.copy()
    cfg = TrainConfig(steps=30, lr=0.05, seed=7, lr_schedule="cosine")
    a = train_flow(f, pair_sampler(two_mode_mixture()), cfg)
    b = train_flow(f, pair_sampler(two_mode_mixture()), cfg)
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.field.params, b.field.params)
    np.testing.assert_array_equal(f.params, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step():
    cfg = TrainConfig(steps=200, lr=1e4, momentum=0.9, seed=0)
    with pytest.raises(NonFiniteError) as err:
        train_flow(MLPField.create(hidden=(8,), seed=0), pair_sampler(two_mode_mixture()), cfg)
    assert err.value.step > 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=10, lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, lr=0.1, lr_schedule="step")


def test_sgd_clips_gradient_norm():
    opt = SGD(lr=1.0, momentum=0.0, max_grad_norm=1.0)
    out = opt.step(np.zeros(2), np.array([30.0, 40.0]))
    np.testing.assert_allclose(out, [-0.6, -0.8])


def test_loss_curve_csv(tmp_path):
    write_loss_curve([1.5, 0.25], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text() == "step,loss\n0,1.5\n1,0.25\n"
    assert read_reward_curve(tmp_path / "loss.csv") == [{"step": 0.0, "loss": 1.5}, {"step": 1.0, "loss": 0.25}]
