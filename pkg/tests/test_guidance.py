import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guidelab.denoiser import MlpDenoiser
from guidelab.errors import ConfigurationError, DomainError
from guidelab.gmm import IndependentConditionLaw, OracleDenoiser
from guidelab.guidance import (GuidanceConfig, GuidanceRng, TsgSchedule, _perturbed_layers,
                               cfg_denoise, draw_independent_condition, guided_denoise,
                               icg_denoise, tsg_denoise, tsg_perturb_embedding)


class Counting(MlpDenoiser):
    calls = 0

    def denoise(self, *args, **kwargs):
        type(self).calls += 1
        return super().denoise(*args, **kwargs)


def _counting(model):
    m = Counting(model.dim, model.n_classes, model.width, model.depth, model.emb_dim,
                 model.schedule, model.seed, model.input_scaling, model.params, model.metadata)
    Counting.calls = 0
    return m


def _configs(w):
    sched = TsgSchedule(kind="power", s=1.0)
    return [
        GuidanceConfig("cfg", w_cfg=w),
        GuidanceConfig("icg", w_icg=w),
        GuidanceConfig("icg", w_icg=w, icg_mode="gaussian_noise"),
        GuidanceConfig("tsg", w_tsg=w, tsg=sched),
        GuidanceConfig("icg_and_tsg", w_icg=w, w_tsg=w, tsg=sched),
    ]


@pytest.fixture
def probe(rng):
    return rng.standard_normal((64, 2)) * 3, 0.4, rng.integers(0, 2, 64)


def test_unit_weight_reproduces_conditional_output(small_net, probe):
    z, t, y = probe
    plain = small_net.denoise(z, t, y)
    for g in _configs(1.0):
        assert np.array_equal(guided_denoise(small_net, z, t, y, g, GuidanceRng(5)), plain), g.rule


def test_rule_none_ignores_weights(small_net, probe):
    z, t, y = probe
    g = GuidanceConfig("none", w_cfg=3.0, w_icg=3.0, w_tsg=3.0)
    assert np.array_equal(guided_denoise(small_net, z, t, y, g, GuidanceRng(0)),
                          small_net.denoise(z, t, y))


def test_rules_are_affine_in_weight(small_net, probe):
    z, t, y = probe
    outs = [[guided_denoise(small_net, z, t, y, g, GuidanceRng(9)) for g in _configs(w)]
            for w in (0.0, 1.0, 2.0)]
    for d0, d1, d2 in zip(*outs):
        assert np.max(np.abs(d2 - 2 * d1 + d0)) < 1e-10


def test_cfg_zero_weight_is_null_branch(small_net, probe):
    z, t, y = probe
    assert np.allclose(cfg_denoise(small_net, z, t, y, 0.0), small_net.denoise(z, t, None),
                       rtol=0, atol=1e-12)


@pytest.mark.parametrize("rule,count", [("none", 1), ("cfg", 2), ("icg", 2), ("tsg", 2),
                                        ("icg_and_tsg", 3)])
def test_evaluation_counts(small_net, probe, rule, count):
    z, t, y = probe
    model = _counting(small_net)
    g = GuidanceConfig(rule, w_cfg=2.0, w_icg=2.0, w_tsg=2.0)
    guided_denoise(model, z, t, y, g, GuidanceRng(0))
    assert Counting.calls == count == g.evaluations


def test_cfg_needs_null_token(small_net, probe):
    z, t, y = probe
    small_net.metadata["p_drop"] = 0.0
    with pytest.raises(ConfigurationError, match="ICG"):
        guided_denoise(small_net, z, t, y, GuidanceConfig("cfg", w_cfg=2), GuidanceRng(0))
    icg = guided_denoise(small_net, z, t, y, GuidanceConfig("icg", w_icg=2), GuidanceRng(0))
    assert np.all(np.isfinite(icg))


def test_cfg_oracle_matches_closed_form(pair, rng):
    z = rng.standard_normal((500, 2)) * 4
    t = rng.uniform(0.01, 1, 500)
    y = rng.integers(0, 2, 500)
    w = 3.0
    d = cfg_denoise(OracleDenoiser(pair), z, t, y, w)
    s2 = pair.schedule.sigma(t)[:, None] ** 2
    direction = ((d - z) / s2 - pair.cond_score(z, t, y)) / (w - 1)
    ref = np.where(y[:, None] == 0, pair.cfg_direction_closed_form(z, t, 0),
                   pair.cfg_direction_closed_form(z, t, 1))
    assert np.max(np.abs(direction - ref)) < 1e-12


def _icg_mean_direction(pair, z0, t, y, law, n=10_000, w=2.0):
    z = np.broadcast_to(z0, (n, 2))
    g = GuidanceConfig("icg", w_icg=w, icg_law=law)
    d = icg_denoise(OracleDenoiser(pair), z, t, y, w, g, GuidanceRng(11))
    s2 = pair.schedule.sigma(t) ** 2
    return (((d - z) / s2 - pair.cond_score(z, t, y)) / (w - 1)).mean(0)


def test_icg_unbiased_for_cfg_at_posterior(pair):
    z0, t, y = np.array([0.7, -0.4]), 0.06, 0
    post = pair.posterior_weight(z0, t)
    est = _icg_mean_direction(pair, z0, t, y, IndependentConditionLaw.categorical(post))
    ref = pair.cfg_direction_closed_form(z0, t, y)
    assert np.linalg.norm(est - ref) < 0.02 * np.linalg.norm(ref)


def test_icg_uniform_at_origin(pair):
    t = pair.schedule.time(1.0)
    est = _icg_mean_direction(pair, np.zeros(2), t, 0, IndependentConditionLaw())
    assert np.linalg.norm(est - [-1.0, 0.0]) < 0.02


def test_fixed_law_is_point_mass(rng):
    draws = draw_independent_condition("random_condition", rng, 1000, 3,
                                       law=IndependentConditionLaw("fixed", k=2))
    assert np.all(draws == 2)


def test_gaussian_condition_std(rng):
    draws = draw_independent_condition("gaussian_noise", rng, 100_000 // 8, 2, scale=1.5,
                                       reference_std=0.8, emb_dim=8)
    assert abs(draws.std() / 1.2 - 1) < 0.02
    assert abs(draws.mean()) < 0.01
    with pytest.raises(ConfigurationError):
        draw_independent_condition("gaussian_noise", rng, 3, 2)


def test_gaussian_mode_at_zero_scale_uses_zero_condition(small_net, probe):
    z, t, y = probe
    g = GuidanceConfig("icg", w_icg=2.0, icg_mode="gaussian_noise", icg_scale=0.0)
    d_cond = small_net.denoise(z, t, y)
    expected = d_cond + (d_cond - small_net.denoise(z, t, np.zeros(small_net.emb_dim)))
    assert np.allclose(guided_denoise(small_net, z, t, y, g, GuidanceRng(1)), expected,
                       rtol=0, atol=1e-12)


def test_independent_draws_ignore_the_input(rng):
    z = rng.standard_normal((10_000, 2))
    draws = draw_independent_condition("random_condition", rng, 10_000, 2)
    for j in range(2):
        assert abs(np.corrcoef(draws, z[:, j])[0, 1]) < 0.03


def test_tsg_schedule_values(rng):
    e = rng.uniform(-1, 1, (4, 16))
    sched = TsgSchedule(kind="power", s=2.0, alpha=1.0, std_scaling=False)
    assert np.allclose(sched.noise_std(np.full(4, 0.5), e), 1.0)
    const = TsgSchedule(kind="constant", s=0.7, std_scaling=True)
    assert np.allclose(const.noise_std(np.full(4, 0.3), e), 0.7 * e.std(-1))
    assert np.array_equal(tsg_perturb_embedding(e, np.full(4, 0.5), TsgSchedule(s=0.0), rng), e)
    gated = TsgSchedule(kind="constant", s=1.0, t_min=0.2, t_max=0.8)
    t = np.array([0.1, 0.5, 0.9, 0.2])
    out = tsg_perturb_embedding(e, t, gated, rng)
    assert np.array_equal(out[[0, 2]], e[[0, 2]])
    assert not np.allclose(out[[1, 3]], e[[1, 3]])


def test_tsg_noise_statistics(rng):
    e = np.zeros((100_000, 1))
    out = tsg_perturb_embedding(e, np.full(100_000, 0.5),
                                TsgSchedule(kind="power", s=2.0, std_scaling=False), rng)
    assert abs(out.std() - 1.0) < 0.02


def test_tsg_schedule_validation():
    with pytest.raises(DomainError):
        TsgSchedule(t_min=0.6, t_max=0.4)
    with pytest.raises(DomainError):
        TsgSchedule(s=-1.0)
    with pytest.raises(DomainError):
        TsgSchedule(layer_count=-1)


def test_tsg_perturbs_only_leading_layers(small_net, rng):
    z = rng.standard_normal((5, 2))
    sched = TsgSchedule(kind="constant", s=1.0, layer_count=1)
    layers = _perturbed_layers(small_net, z, 0.5, 0, sched, rng)
    clean = small_net.base_embedding(0.5, 0, 5)
    assert not np.allclose(layers[0], clean)
    assert np.array_equal(layers[1], clean)


def test_tsg_without_noise_or_layers_is_unguided(small_net, probe):
    z, t, y = probe
    plain = small_net.denoise(z, t, y)
    for sched in (TsgSchedule(s=0.0), TsgSchedule(s=1.0, layer_count=0)):
        assert np.array_equal(tsg_denoise(small_net, z, t, y, 3.0, sched, GuidanceRng(0)), plain)


def test_tsg_works_unconditionally(small_net, probe):
    z, t, _ = probe
    out = tsg_denoise(small_net, z, t, None, 2.0, TsgSchedule(s=1.0), GuidanceRng(0))
    assert out.shape == z.shape and not np.allclose(out, small_net.denoise(z, t, None))


def test_tsg_redraws_noise_per_call(small_net, probe):
    z, t, y = probe
    rng = GuidanceRng(0)
    a = tsg_denoise(small_net, z, t, y, 2.0, TsgSchedule(s=1.0), rng)
    b = tsg_denoise(small_net, z, t, y, 2.0, TsgSchedule(s=1.0), rng)
    assert not np.array_equal(a, b)


def test_combined_with_unit_icg_weight_is_tsg(small_net, probe):
    z, t, y = probe
    sched = TsgSchedule(kind="power", s=2.0)
    combined = guided_denoise(small_net, z, t, y,
                              GuidanceConfig("icg_and_tsg", w_icg=1.0, w_tsg=2.5, tsg=sched),
                              GuidanceRng(3))
    alone = guided_denoise(small_net, z, t, y, GuidanceConfig("tsg", w_tsg=2.5, tsg=sched),
                           GuidanceRng(3))
    assert np.array_equal(combined, alone)


def test_oracle_has_no_time_embedding(pair, probe):
    z, t, y = probe
    with pytest.raises(ConfigurationError):
        tsg_denoise(OracleDenoiser(pair), z, t, y, 2.0, TsgSchedule(), GuidanceRng(0))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GuidanceConfig("pag")
    with pytest.raises(ConfigurationError):
        GuidanceConfig("cfg", w_cfg=-1)
    with pytest.raises(ConfigurationError):
        GuidanceConfig("none").with_weight(2.0)


@given(rule=st.sampled_from(["none", "cfg", "icg", "tsg", "icg_and_tsg"]),
       w=st.floats(0, 10), mode=st.sampled_from(["random_condition", "gaussian_noise"]),
       kind=st.sampled_from(["constant", "power"]), s=st.floats(0, 5),
       gate=st.tuples(st.floats(0, 1), st.floats(0, 1)).map(sorted),
       layers=st.one_of(st.none(), st.integers(0, 8)), scaling=st.booleans(),
       law=st.sampled_from([IndependentConditionLaw(), IndependentConditionLaw("fixed", k=1),
                            IndependentConditionLaw.categorical([0.3, 0.7])]))
def test_config_round_trip(rule, w, mode, kind, s, gate, layers, scaling, law):
    g = GuidanceConfig(rule, w_cfg=w, w_icg=w / 2, w_tsg=w + 1, icg_mode=mode, icg_law=law,
                       tsg=TsgSchedule(kind, s, 1.5, gate[0], gate[1], scaling, layers), seed=4)
    assert GuidanceConfig.from_config(g.to_config()) == g
