import numpy as np
import pytest

from t2md import tensor as T
from t2md.diffusion import add_noise, build_schedule, ddpm_step, mse_loss, predict_x0, sample
from t2md.gradcheck import gradient_error


def test_schedule_endpoints_and_monotonicity():
    s = build_schedule(1000)
    assert s.beta(1) == 1e-4 and s.beta(1000) == 0.02
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and np.all((s.betas > 0) & (s.betas < 1))
    assert s.alpha_bar(0) == 1.0 and ab[-1] < 0.01


def test_two_step_schedule_arithmetic():
    s = build_schedule(2, 0.1, 0.2)
    assert np.allclose(s.alpha_bars, [0.9, 0.72])


def test_quadratic_interpolation():
    s = build_schedule(5, 0.01, 0.09)
    assert np.allclose(np.sqrt(s.betas), np.linspace(0.1, 0.3, 5))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_add_noise_limits_and_range():
    s = build_schedule(10)
    z0, eps = np.ones((2, 3)), np.full((2, 3), 2.0)
    s_clean = type(s)(s.T, np.full(s.T, 1e-300))
    assert np.allclose(add_noise(s_clean, z0, 1, eps), z0)
    s_noise = type(s)(s.T, np.full(s.T, 1.0 - 1e-16))
    assert np.allclose(add_noise(s_noise, z0, 5, eps), eps)
    with pytest.raises(ValueError):
        add_noise(s, z0, 0, eps)
    with pytest.raises(ValueError):
        add_noise(s, z0, 11, eps)


def test_add_noise_variance_monte_carlo():
    # constant beta chosen so that alpha_bar at t=1 is exactly 0.75
    s = type(build_schedule(2))(2, np.array([0.25, 0.5]))
    rng = np.random.default_rng(0)
    zt = add_noise(s, np.zeros(10_000), 1, rng.standard_normal(10_000))
    assert abs(zt.var() - 0.25) < 0.02


def test_mse_loss_examples_and_gradient():
    assert mse_loss(np.zeros(2), np.ones(2)).item() == 1.0
    assert mse_loss(np.ones(3), np.ones(3)).item() == 0.0
    rng = np.random.default_rng(0)
    eps = rng.standard_normal(6)
    pred = T.tensor(rng.standard_normal(6), requires_grad=True)
    with T.precision(np.float64):
        pred = T.tensor(pred.data.astype(np.float64), requires_grad=True)
        T.backward(mse_loss(eps, pred))
        assert np.allclose(pred.grad, 2 * (pred.data - eps) / 6)
        assert gradient_error(lambda p: mse_loss(eps, p), [pred.data]) < 1e-6
    with pytest.raises(T.ShapeError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_ddpm_step_examples():
    s = build_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(0)
    zt = rng.standard_normal((2, 3))
    assert np.allclose(ddpm_step(s, zt, np.zeros_like(zt), 7), zt / np.sqrt(s.alpha(7)))
    noise = rng.standard_normal(zt.shape)
    assert np.array_equal(ddpm_step(s, zt, zt * 0.1, 1, noise), ddpm_step(s, zt, zt * 0.1, 1))


@pytest.mark.parametrize("T_steps", [2, 100, 1000])
def test_one_step_inversion_every_t(T_steps):
    s = build_schedule(T_steps)
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((3, 4, 2, 2))
    for t in range(1, T_steps + 1):
        eps = rng.standard_normal(z0.shape)
        zt = add_noise(s, z0, t, eps)
        ab, ab_prev, beta = s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t)
        posterior_mean = (np.sqrt(ab_prev) * beta / (1 - ab) * z0 + np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * zt)
        assert np.max(np.abs(ddpm_step(s, zt, eps, t) - posterior_mean)) < 1e-5
        assert np.max(np.abs(predict_x0(s, zt, t, eps) - z0)) < 1e-5
    eps = rng.standard_normal(z0.shape)
    assert np.max(np.abs(ddpm_step(s, add_noise(s, z0, 1, eps), eps, 1) - z0)) < 1e-5


def _mixture_denoiser(schedule, modes, sigma0):
    """Exact epsilon-prediction for a mixture of isotropic Gaussians."""
    def eps_hat(z, t, _ctx):
        ab = schedule.alpha_bar(t)[:, None]
        var = ab * sigma0 ** 2 + 1 - ab
        d2 = np.stack([((z - np.sqrt(ab) * m) ** 2).sum(-1) for m in modes], -1)
        logw = -0.5 * d2 / var
        w = np.exp(logw - logw.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        x0 = sum(w[:, [k]] * (m + np.sqrt(ab) * sigma0 ** 2 / var * (z - np.sqrt(ab) * m)) for k, m in enumerate(modes))
        return (z - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    return eps_hat


def test_sampler_reaches_training_modes():
    s = build_schedule(1000)
    sigma0 = 0.1
    modes = [np.full(4, 1.0), np.full(4, -1.0)]
    z = sample(_mixture_denoiser(s, modes, sigma0), s, (500, 4), None, seed=0)
    near = np.min([np.max(np.abs(z - m), axis=1) for m in modes], axis=0) <= 3 * sigma0
    assert near.mean() >= 0.9
    both = [np.mean(np.abs(z - m).max(1) <= 3 * sigma0) for m in modes]
    assert min(both) > 0.3


def test_sampler_determinism_and_finiteness():
    s = build_schedule(50, 1e-3, 0.2)

    def untrained(z, t, c):
        return np.zeros_like(z) * 0.0 + 0.01 * z

    a = sample(untrained, s, (3, 4, 2, 2), None, seed=5)
    b = sample(untrained, s, (3, 4, 2, 2), None, seed=5)
    assert a.tobytes() == b.tobytes() and np.isfinite(a).all()
