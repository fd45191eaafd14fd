import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guidelab.denoiser import (NULL, MlpDenoiser, TrainConfig, embed_time, load_checkpoint,
                               gradient_check, mmse_floor, save_checkpoint, smooth, train,
                               write_loss_csv)
from guidelab.errors import CheckpointError, DomainError, TrainingError


def _batch(pair, rng, n=64):
    x, y = pair.sample_data(n, int(rng.integers(1 << 30)))
    t = rng.uniform(0.01, 1.0, n)
    z = pair.forward_perturb(x, t, int(rng.integers(1 << 30)))
    y = np.where(rng.random(n) < 0.3, NULL, y)
    return x, z, t, y


def test_gradients_match_central_differences(pair, small_net, rng):
    x, z, t, y = _batch(pair, rng)
    before = {k: v.copy() for k, v in small_net.params.items()}
    assert gradient_check(small_net, x, z, t, y, n_params=20, h=1e-5, seed=1) < 1e-4
    assert all(np.array_equal(before[k], small_net.params[k]) for k in before)


def test_gradient_check_detects_a_wrong_gradient(pair, small_net, rng, monkeypatch):
    x, z, t, y = _batch(pair, rng)
    original = MlpDenoiser.loss_and_grad

    def broken(self, *args):
        loss, g = original(self, *args)
        g = {k: v * 1.01 for k, v in g.items()}
        return loss, g

    monkeypatch.setattr(MlpDenoiser, "loss_and_grad", broken)
    assert gradient_check(small_net, x, z, t, y, n_params=40, seed=1) > 1e-3


def test_embedding_is_deterministic_and_bounded(rng):
    t = rng.uniform(0, 1, 100)
    e = embed_time(t)
    assert np.array_equal(e, embed_time(t))
    assert np.all(np.abs(e) <= 1.0)


@given(st.floats(0.0, 0.999))
def test_embedding_resolves_small_time_steps(t):
    assert np.linalg.norm(embed_time(t) - embed_time(t + 1e-3)) > 0


def test_odd_embedding_dimension_rejected():
    with pytest.raises(DomainError):
        embed_time(0.5, dim=7)


def test_condition_table_has_null_row(small_net):
    table = small_net.params["cond_table"]
    assert table.shape == (small_net.n_classes + 1, small_net.emb_dim)
    e_null = small_net.cond_embedding(None, 1)[0]
    assert np.array_equal(e_null, table[small_net.n_classes])
    assert np.array_equal(small_net.cond_embedding(NULL, 1)[0], e_null)


def test_denoise_is_pure_and_deterministic(small_net, rng):
    z = rng.standard_normal((50, 2))
    before = {k: v.copy() for k, v in small_net.params.items()}
    a = small_net.denoise(z, 0.3, 1)
    b = small_net.denoise(z, 0.3, 1)
    assert np.array_equal(a, b)
    assert a.shape == z.shape
    assert all(np.array_equal(before[k], small_net.params[k]) for k in before)


def test_layer_override_with_base_vector_is_identity(small_net, rng):
    z = rng.standard_normal((100, 2))
    t = rng.uniform(0.01, 1, 100)
    y = rng.integers(0, 2, 100)
    e = small_net.base_embedding(t, y, 100)
    assert np.array_equal(small_net.denoise(z, t, y),
                          small_net.denoise(z, t, y, layer_embeddings=[e] * small_net.depth))


def test_zero_condition_differs_from_null_token(small_net, rng):
    z = rng.standard_normal((10, 2))
    zero = np.zeros(small_net.emb_dim)
    assert not np.allclose(small_net.denoise(z, 0.5, zero), small_net.denoise(z, 0.5, None))


def test_domain_errors(small_net):
    z = np.zeros((3, 2))
    with pytest.raises(DomainError):
        small_net.denoise(z, 0.5, 2)
    with pytest.raises(DomainError):
        small_net.denoise(z, 0.5, 0, layer_embeddings=[np.zeros(8)])
    with pytest.raises(DomainError):
        small_net.denoiser_score(z, 0.0, 0)
    with pytest.raises(DomainError):
        small_net.time_derivative(z, 0.99, 0, h=0.02)


def test_score_identity(small_net, rng):
    z = rng.standard_normal((100, 2))
    t = rng.uniform(0.01, 1, 100)
    s = small_net.denoiser_score(z, t, 0)
    sigma = small_net.schedule.sigma(t)[:, None]
    assert np.max(np.abs(sigma ** 2 * s + z - small_net.denoise(z, t, 0))) < 1e-12


def test_score_of_identity_denoiser_is_zero(small_net, rng):
    model = small_net.copy()
    model.input_scaling = False
    for k in model.params:
        if k != "S":
            model.params[k][...] = 0.0
    z = rng.standard_normal((5, 2))
    assert np.array_equal(model.denoiser_score(z, 0.4, 0), np.zeros_like(z))


def test_time_derivative_richardson(small_net, rng):
    z = rng.standard_normal((20, 2))
    ref = small_net.time_derivative(z, 0.4, 1, h=1e-4)
    e1 = np.linalg.norm(small_net.time_derivative(z, 0.4, 1, h=1e-2) - ref)
    e2 = np.linalg.norm(small_net.time_derivative(z, 0.4, 1, h=5e-3) - ref)
    assert 3.0 <= e1 / e2 <= 5.0


def test_time_derivative_of_time_constant_network(small_net, rng):
    model = small_net.copy()
    model.input_scaling = False
    for l in range(model.depth):
        model.params[f"P{l}"][...] = 0.0
    z = rng.standard_normal((10, 2))
    assert np.array_equal(model.time_derivative(z, 0.5, 0), np.zeros_like(z))


def test_checkpoint_round_trip(small_net, tmp_path, rng):
    path = tmp_path / "m.npz"
    save_checkpoint(small_net, path)
    loaded = load_checkpoint(path, expect_dim=2)
    z = rng.standard_normal((100, 2))
    t = rng.uniform(0.01, 1, 100)
    assert np.array_equal(loaded.denoise(z, t, 1), small_net.denoise(z, t, 1))
    assert all(np.array_equal(loaded.params[k], v) for k, v in small_net.params.items())
    assert loaded.metadata["p_drop"] == 0.1
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_dim=3)


def test_truncated_checkpoint_raises(small_net, tmp_path):
    path = tmp_path / "m.npz"
    save_checkpoint(small_net, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_train_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(p_drop=1.5)
    with pytest.raises(DomainError):
        TrainConfig(steps=0)


def test_training_is_deterministic_and_records_p(pair):
    cfg = TrainConfig(steps=30, batch_size=32, p_drop=0.2, seed=4)
    a = train(pair, cfg, width=8, depth=2, emb_dim=8)
    b = train(pair, cfg, width=8, depth=2, emb_dim=8)
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert np.array_equal(a.losses, b.losses)
    assert a.model.metadata["p_drop"] == 0.2
    assert a.model.has_null_token


def test_null_token_untouched_without_label_dropping(pair):
    cfg = TrainConfig(steps=50, batch_size=32, p_drop=0.0, optimizer="adam", seed=1)
    init = MlpDenoiser.for_mixture(pair, width=8, depth=2, emb_dim=8, seed=1)
    result = train(pair, cfg, model=init)
    null_row = pair.n_components
    assert np.array_equal(result.model.params["cond_table"][null_row],
                          init.params["cond_table"][null_row])
    assert not result.model.has_null_token


def test_snapshots_at_fractions(pair):
    cfg = TrainConfig(steps=40, batch_size=16)
    result = train(pair, cfg, snapshots=(0.25, 0.5, 1.0), width=8, depth=2, emb_dim=8)
    assert sorted(result.snapshots) == [0.25, 0.5, 1.0]
    assert result.snapshots[0.25].metadata["steps_done"] == 10
    assert all(np.array_equal(result.snapshots[1.0].params[k], v)
               for k, v in result.model.params.items())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_step(pair):
    cfg = TrainConfig(steps=200, batch_size=16, lr=50.0, divergence_threshold=1e6)
    with pytest.raises(TrainingError) as info:
        train(pair, cfg, width=8, depth=2, emb_dim=8)
    assert 0 <= info.value.step < 200


def test_smooth_and_floor(pair):
    assert np.allclose(smooth(np.arange(10.0), 5), np.arange(2.0, 8.0))
    # closed form of the log-uniform average of d s^2 / (1 + s^2)
    lo, hi = np.log(0.005), np.log(20.0)
    exact = 2 * 0.5 * (np.log1p(20.0 ** 2) - np.log1p(0.005 ** 2)) / (hi - lo)
    assert mmse_floor(pair) == pytest.approx(exact, rel=1e-6)


def test_loss_trace_csv(pair, tmp_path):
    result = train(pair, TrainConfig(steps=5, batch_size=8), width=8, depth=2, emb_dim=8)
    path = tmp_path / "loss.csv"
    write_loss_csv(result.losses, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1], result.losses)
