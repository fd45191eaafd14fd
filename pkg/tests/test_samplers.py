import numpy as np
import pytest

from guidelab.errors import DomainError, SamplingError
from guidelab.gmm import GaussianMixture, OracleDenoiser
from guidelab.guidance import GuidanceConfig, TsgSchedule
from guidelab.samplers import (SamplerConfig, balanced_labels, euler_maruyama_step,
                               euler_ode_step, heun_ode_step, langevin_churn_step,
                               make_sigma_grid, offset_time_sample, sample)

MU = np.array([1.0, 2.0])


@pytest.fixture(scope="module")
def single():
    return GaussianMixture(MU[None, :], np.array([1.0]))


def gaussian_denoiser(z, sigma):
    return MU + (z - MU) / (1.0 + sigma ** 2)


def zero_denoiser(z, sigma):
    return np.zeros_like(z)


def test_grid_shapes():
    assert np.array_equal(make_sigma_grid(SamplerConfig(steps=1), 20.0), [20.0, 0.0])
    grid = make_sigma_grid(SamplerConfig(steps=64, sigma_min=0.01), 20.0)
    assert len(grid) == 65 and grid[0] == 20.0 and grid[-1] == 0.0
    assert np.all(np.diff(grid) < 0)
    ratio = grid[:-2] / grid[1:-1]
    assert np.max(np.abs(ratio - ratio[0])) < 1e-10
    with pytest.raises(DomainError):
        make_sigma_grid(SamplerConfig(sigma_min=0.0), 20.0)
    with pytest.raises(DomainError):
        make_sigma_grid(SamplerConfig(sigma_min=30.0), 20.0)


def test_config_validation_and_round_trip():
    with pytest.raises(DomainError):
        SamplerConfig(steps=0)
    with pytest.raises(DomainError):
        SamplerConfig(beta=-0.1)
    with pytest.raises(DomainError):
        SamplerConfig(solver="rk4")
    cfg = SamplerConfig("langevin_churn", 17, 0.02, 10.0, 0.3, 5, 100)
    assert SamplerConfig.from_config(cfg.to_config()) == cfg


def test_euler_to_zero_returns_denoised_point(rng):
    z = rng.standard_normal((10, 2)) * 3
    assert np.allclose(euler_ode_step(gaussian_denoiser, z, 3.0, 0.0), gaussian_denoiser(z, 3.0),
                       rtol=0, atol=1e-14)


def test_zero_denoiser_contracts_linearly(rng):
    z = rng.standard_normal((10, 2))
    assert np.allclose(euler_ode_step(zero_denoiser, z, 4.0, 1.0), z / 4.0, rtol=0, atol=1e-15)


def test_zero_size_steps_are_identity(rng):
    z = rng.standard_normal((10, 2))
    assert np.array_equal(euler_ode_step(gaussian_denoiser, z, 2.0, 2.0), z)
    assert np.array_equal(heun_ode_step(gaussian_denoiser, z, 2.0, 2.0), z)


def test_steps_reject_zero_sigma(rng):
    z = rng.standard_normal((3, 2))
    for step in (lambda: euler_ode_step(gaussian_denoiser, z, 0.0, 0.0),
                 lambda: heun_ode_step(gaussian_denoiser, z, 0.0, 0.0),
                 lambda: langevin_churn_step(gaussian_denoiser, z, 0.0, 0.1, rng)):
        with pytest.raises(DomainError):
            step()


def test_heun_equals_euler_for_constant_slope(rng):
    z = rng.standard_normal((10, 2))
    c = np.array([0.3, -0.2])
    constant_slope = lambda x, s: x - s * c
    assert np.allclose(heun_ode_step(constant_slope, z, 2.0, 1.0),
                       euler_ode_step(constant_slope, z, 2.0, 1.0), rtol=0, atol=1e-14)
    assert np.array_equal(heun_ode_step(gaussian_denoiser, z, 0.5, 0.0),
                          euler_ode_step(gaussian_denoiser, z, 0.5, 0.0))


def _order(single, solver):
    o = OracleDenoiser(single)
    ref = sample(o, None, SamplerConfig(solver, steps=4096, seed=1), 200, labels=0)
    ns = np.array([16, 32, 64, 128, 256])
    errs = [np.sqrt(np.mean(np.sum((sample(o, None, SamplerConfig(solver, steps=n, seed=1), 200,
                                           labels=0) - ref) ** 2, 1))) for n in ns]
    return -np.polyfit(np.log(ns), np.log(errs), 1)[0], errs


def test_convergence_orders(single):
    euler, _ = _order(single, "euler_ode")
    heun, errs = _order(single, "heun_ode")
    assert abs(euler - 1) < 0.3
    assert abs(heun - 2) < 0.3
    assert 3.0 < errs[-2] / errs[-1] < 5.0


def test_sde_without_churn_is_the_ode(single, rng):
    z = rng.standard_normal((10, 2))
    assert np.array_equal(euler_maruyama_step(gaussian_denoiser, z, 3.0, 2.0, 0.0, rng, 20.0),
                          euler_ode_step(gaussian_denoiser, z, 3.0, 2.0))
    o = OracleDenoiser(single)
    a = sample(o, None, SamplerConfig("euler_maruyama_sde", steps=20, beta=0.0, seed=3), 50, 0)
    b = sample(o, None, SamplerConfig("euler_ode", steps=20, seed=3), 50, 0)
    assert np.array_equal(a, b)


def test_sde_noise_variance(rng):
    z = np.zeros((100_000, 1))
    identity = lambda x, s: x
    beta, s, s_next, s_max = 0.7, 3.0, 2.5, 20.0
    out = euler_maruyama_step(identity, z, s, s_next, beta, rng, s_max)
    target = 2 * beta * s ** 2 * abs(s_next - s) / s_max
    assert abs(out.var() / target - 1) < 0.02


def test_sde_terminal_mean(single):
    x = sample(OracleDenoiser(single), None,
               SamplerConfig("euler_maruyama_sde", steps=256, beta=1.0, seed=2), 10_000, 0)
    assert np.all(np.abs(x.mean(0) - MU) < 0.05)


def test_langevin_small_step_is_nearly_identity(rng):
    z = rng.standard_normal((10, 2))
    out = langevin_churn_step(gaussian_denoiser, z, 1.0, 1e-12, rng)
    assert np.max(np.abs(out - z)) < 1e-5
    with pytest.raises(DomainError):
        langevin_churn_step(gaussian_denoiser, z, 1.0, -1.0, rng)


def test_langevin_relaxes_to_noisy_marginal(rng):
    sigma = 1.0
    z = np.tile(MU, (10_000, 1))
    for _ in range(500):
        z = langevin_churn_step(gaussian_denoiser, z, sigma, 0.05, rng)
    cov = np.cov(z, rowvar=False)
    assert np.allclose(cov, (1 + sigma ** 2) * np.eye(2), rtol=0, atol=0.05 * (1 + sigma ** 2))


def test_langevin_preserves_marginal_moments(single, rng):
    sigma, n = 1.5, 20_000
    z = single.forward_perturb(single.sample_data(n, 0)[0], single.schedule.time(sigma), 1)
    m0, v0 = z.mean(0), z.var(0)
    for _ in range(200):
        z = langevin_churn_step(gaussian_denoiser, z, sigma, 0.01, rng)
    var = 1 + sigma ** 2
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / n)
    assert np.all(np.abs(z.mean(0) - m0) < 3 * np.sqrt(2) * se_mean)
    assert np.all(np.abs(z.var(0) - v0) < 3 * np.sqrt(2) * se_var)


def test_noiseless_langevin_ascends_log_density(pair, rng):
    o = OracleDenoiser(pair)
    sigma = 0.8
    t = pair.schedule.time(sigma)
    z = rng.standard_normal((500, 2)) * 3
    source = lambda x, s: o.denoise(x, pair.schedule.time(s))
    for _ in range(20):
        z_next = langevin_churn_step(source, z, sigma, 0.01, rng, noise=False)
        assert np.all(pair.log_density(z_next, t) >= pair.log_density(z, t) - 1e-12)
        z = z_next


class CountingOracle(OracleDenoiser):
    calls = 0

    def denoise(self, *args, **kwargs):
        CountingOracle.calls += 1
        return super().denoise(*args, **kwargs)


def test_empty_request_makes_no_evaluations(pair):
    CountingOracle.calls = 0
    x = sample(CountingOracle(pair), None, SamplerConfig(steps=8), 0)
    assert x.shape == (0, 2) and CountingOracle.calls == 0


def test_sampling_is_deterministic(small_net):
    g = GuidanceConfig("tsg", w_tsg=2.0, tsg=TsgSchedule(s=1.0))
    cfg = SamplerConfig(steps=6, seed=7, batch_size=16)
    labels = balanced_labels(40, 2)
    a = sample(small_net, g, cfg, 40, labels)
    b = sample(small_net, g, cfg, 40, labels)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(small_net, g, SamplerConfig(steps=6, seed=8,
                                                                    batch_size=16), 40, labels))


def test_trajectory(pair):
    x, traj = sample(OracleDenoiser(pair), None, SamplerConfig(steps=10, seed=0), 20_000, 1,
                     return_trajectory=True)
    assert traj.states.shape == (11, 20_000, 2)
    assert np.array_equal(traj.states[-1], x)
    assert np.all(np.diff(traj.times) < 0)
    assert abs(traj.states[0].std() / pair.sigma_max - 1) < 0.02


def test_zero_offset_is_plain_sampling(small_net):
    cfg = SamplerConfig(steps=6, seed=1)
    labels = balanced_labels(30, 2)
    assert np.array_equal(offset_time_sample(small_net, 0.0, cfg, 30, labels),
                          sample(small_net, None, cfg, 30, labels))
    assert not np.array_equal(offset_time_sample(small_net, 0.05, cfg, 30, labels),
                              sample(small_net, None, cfg, 30, labels))


def test_oracle_offset_probe_traces_decrease(pair):
    labels = balanced_labels(4000, 2)
    cfg = SamplerConfig(steps=32, seed=0)
    traces = [np.trace(np.cov(offset_time_sample(OracleDenoiser(pair), d, cfg, 4000,
                                                 labels)[labels == 0], rowvar=False))
              for d in (-0.05, -0.02, 0.0, 0.02, 0.05)]
    assert np.all(np.diff(traces) < 0)
    assert abs(traces[2] - 2.0) < 0.15


def test_non_finite_state_names_the_step(pair):
    class Broken(OracleDenoiser):
        def denoise(self, z, t, cond=None, layer_embeddings=None):
            return np.full_like(np.asarray(z, float), np.nan) if t < 0.2 else z

    with pytest.raises(SamplingError) as info:
        sample(Broken(pair), None, SamplerConfig(steps=8, sigma_min=0.1), 4, 0)
    # sigma drops below 4 (t < 0.2) inside the third step
    assert info.value.step == 2


def test_label_count_must_match(pair):
    with pytest.raises(DomainError):
        sample(OracleDenoiser(pair), None, SamplerConfig(steps=2), 5, labels=[0, 1])


def test_balanced_labels():
    assert np.bincount(balanced_labels(11, 2)).tolist() == [6, 5]
