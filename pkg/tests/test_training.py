import json

import numpy as np
import pytest

import oracles
from contralab import autodiff as ad
from contralab.datasets import make_gaussian_mixture
from contralab.models import DiscriminatorParams, ModelConfig
from contralab.training import (
    PRESETS,
    AdamState,
    CrConfig,
    ConfigError,
    TrainConfig,
    Trainer,
    TrainHistory,
    TrainingAborted,
    adam_step,
    adv_d_loss,
    adv_g_loss,
    apply_preset,
    consistency_regularization,
    run_training,
)


@pytest.fixture(scope="module")
def gmm():
    return make_gaussian_mixture(4, 40, seed=0)


def _small(**kw):
    model = ModelConfig(num_classes=4, g_hidden=[16], d_hidden=[16], proj_dim=8)
    base = dict(batch_size=16, iterations=6, eval_interval=3, eval_samples_per_class=16, n_dis=2, model=model)
    base.update(kw)
    return TrainConfig(**base)


def _snapshot(net):
    return {k: p.data.copy() for k, p in net.params.items()}


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_adam_first_step_cancels_bias():
    p = {"x": ad.parameter([[0.0]])}
    adam_step(p, {"x": np.array([[1.0]])}, AdamState(0.9, 0.999), 1e-3)
    assert p["x"].data[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = {"x": ad.parameter([[0.7, -1.2]])}
    state = AdamState(0.5, 0.999)
    for _ in range(10):
        adam_step(p, {"x": np.zeros((1, 2))}, state, 0.1)
    np.testing.assert_array_equal(p["x"].data, [[0.7, -1.2]])


def test_adam_matches_scalar_oracle_on_quadratic():
    p = {"x": ad.parameter([[1.0]])}
    state = AdamState(0.9, 0.999)
    grads = []
    for _ in range(100):
        g = 2 * p["x"].data.copy()
        grads.append(float(g[0, 0]))
        adam_step(p, {"x": g}, state, 1e-2)
    expected = oracles.adam_scalar(1.0, grads, 1e-2, 0.9, 0.999, 1e-8)
    assert p["x"].data[0, 0] == pytest.approx(expected[-1], abs=1e-15)
    assert abs(p["x"].data[0, 0]) < 0.5
    assert state.step == 100


def test_adam_non_finite_gradient_names_parameter():
    p = {"layer.w": ad.parameter([[1.0]])}
    with pytest.raises(ad.NumericError, match="layer.w"):
        adam_step(p, {"layer.w": np.array([[np.nan]])}, AdamState(0.9, 0.999), 1e-3)


def test_hinge_and_literal_examples():
    c = ad.constant
    assert adv_d_loss(c([[2.0], [0.5]]), c([[-2.0], [0.0]])).item() == pytest.approx(0.75)
    assert adv_d_loss(c([[1.0], [3.0]]), c([[-1.0], [-5.0]])).item() == 0.0
    assert adv_d_loss(c([[1.0]]), c([[1.0]]), "alg1_literal").item() == 0.0
    assert adv_g_loss(c([[0.0]])).item() == 0.0
    assert adv_g_loss(c([[2.0], [-2.0]])).item() == 0.0
    with pytest.raises(ad.DimensionError):
        adv_d_loss(c([[1.0]]), c([[1.0], [2.0]]))


def test_generator_loss_gradient_pushes_scores_up():
    scores = ad.parameter([[0.3], [-1.0], [2.0]])
    with ad.Tape():
        ad.backward(adv_g_loss(scores))
    assert np.all(scores.grad < 0)
    assert ad.grad_check(lambda s: adv_g_loss(s), scores.data) < 1e-8


def test_consistency_regularization_examples():
    rng = np.random.default_rng(0)
    disc = DiscriminatorParams(ModelConfig(d_hidden=[8], spectral_norm=False), "none", rng)
    x = rng.uniform(-1, 1, (5, 2))
    assert consistency_regularization(disc, x, None, 0.0, rng).item() == 0.0
    for p in disc.params.values():
        p.data[:] = 0.0
    disc.params["d.adv.b"].data[:] = 3.0
    assert consistency_regularization(disc, x, None, 0.3, rng, weights=disc.effective_weights()).item() == 0.0
    with pytest.raises(ConfigError):
        consistency_regularization(disc, x, None, -1.0, rng)


def test_consistency_regularization_linear_monte_carlo():
    rng = np.random.default_rng(1)
    disc = DiscriminatorParams(ModelConfig(d_hidden=[], spectral_norm=False), "none", rng)
    w = np.array([[0.8], [-1.5]])
    disc.params["d.adv.w"].data = w
    sigma = 0.2
    x = rng.uniform(-1, 1, (10_000, 2))
    value = consistency_regularization(disc, x, None, sigma, rng).item()
    expected = sigma**2 * float(np.sum(w**2))
    assert abs(value - expected) / expected < 0.1


def test_config_validation():
    for bad in (dict(alpha1=-1.0), dict(batch_size=0), dict(temperature=0.0), dict(n_dis=0), dict(lam=-0.1),
                dict(beta1=1.0), dict(adv_loss="wgan"), dict(loss="nope"), dict(preset="Z")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_defaults_and_presets():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.temperature, cfg.adv_loss, cfg.loss) == (1.0, 1.0, "hinge", "2c")
    e = apply_preset(TrainConfig(), "E")
    assert (e.alpha1, e.alpha2, e.beta1, e.beta2, e.n_dis) == (0.0002, 0.0002, 0.5, 0.999, 5)
    f = apply_preset(TrainConfig(), "F")
    assert (f.alpha1, f.alpha2, f.beta1, f.beta2, f.n_dis) == (0.0004, 0.0001, 0.0, 0.999, 1)
    assert sorted(PRESETS) == list("ABCDEF")
    with pytest.raises(ConfigError, match="valid: A, B"):
        apply_preset(TrainConfig(), "G")


def test_config_dict_round_trip():
    cfg = _small(loss="pnca", temperature=0.5)
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_discriminator_step_with_zero_lr_is_bit_identical(gmm):
    t = Trainer(_small(alpha1=0.0), *gmm)
    before, g_before = _snapshot(t.disc), _snapshot(t.gen)
    t.train_discriminator_step()
    assert _same(before, _snapshot(t.disc)) and _same(g_before, _snapshot(t.gen))


def test_generator_step_scope(gmm):
    t = Trainer(_small(), *gmm)
    d_before, g_before = _snapshot(t.disc), _snapshot(t.gen)
    u_before = {k: v.copy() for k, v in t.disc.u.items()}
    t.train_generator_step()
    assert _same(d_before, _snapshot(t.disc))
    assert _same(u_before, t.disc.u)
    assert not _same(g_before, _snapshot(t.gen))
    t2 = Trainer(_small(alpha2=0.0), *gmm)
    g2 = _snapshot(t2.gen)
    t2.train_generator_step()
    assert _same(g2, _snapshot(t2.gen))


def test_discriminator_step_leaves_generator(gmm):
    t = Trainer(_small(), *gmm)
    g_before = _snapshot(t.gen)
    t.train_discriminator_step()
    assert _same(g_before, _snapshot(t.gen))


def test_lambda_zero_unconditional(gmm):
    t = Trainer(_small(loss="none", lam=0.0), *gmm)
    d = t.train_discriminator_step()
    g = t.train_generator_step()
    assert d["L_C_real"] == 0.0 and g["L_C_fake"] == 0.0
    assert t.disc.class_table is None and "g.embed" not in t.gen.params


def test_lambda_zero_generator_loss_is_adversarial(gmm):
    t = Trainer(_small(lam=0.0), *gmm)
    g = t.train_generator_step()
    assert g["L_C_fake"] > 0
    tables = Trainer(_small(lam=0.0), *gmm)
    tables.train_discriminator_step()
    assert np.array_equal(tables.disc.class_table.data, Trainer(_small(lam=0.0), *gmm).disc.class_table.data)


def test_real_batch_size_checked(gmm):
    t = Trainer(_small(), *gmm)
    with pytest.raises(ConfigError):
        t.train_discriminator_step((gmm[0].samples[:3], gmm[0].labels[:3]))


def test_trainer_rejects_mismatched_data(gmm):
    with pytest.raises(ConfigError):
        Trainer(_small(model=ModelConfig(num_classes=2)), *gmm)
    with pytest.raises(ConfigError):
        Trainer(_small(model=ModelConfig(num_classes=4, data_dim=3)), *gmm)
    with pytest.raises(ConfigError):
        Trainer(_small(batch_size=10_000), *gmm)


def test_fixed_seed_determinism(gmm):
    a = Trainer(_small(), *gmm).train_discriminator_step()
    b = Trainer(_small(), *gmm).train_discriminator_step()
    assert a == b
    c = Trainer(_small(seed=1), *gmm).train_discriminator_step()
    assert c != a


@pytest.mark.parametrize("loss", ["none", "acgan", "projgan", "ntxent", "pnca", "eq7", "2c", "2c-aps"])
def test_every_loss_trains(loss, gmm, tmp_path):
    hist, final = run_training(_small(loss=loss, cr=CrConfig(True, 1.0, 0.05)), *gmm, tmp_path)
    assert [r["iteration"] for r in hist.records] == [3, 6]
    assert final["iteration"] == 6
    for r in hist.records:
        assert all(np.isfinite(r[k]) for k in ("L_D", "L_G", "frechet", "class_frechet"))
        assert 0 <= r["acc_train"] <= 1 and 0 <= r["acc_fake"] <= 1
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "wallclock" not in json.loads(lines[0])
    assert (tmp_path / "ckpt-best.json").exists() and (tmp_path / "ckpt-final.json").exists()


def test_run_training_is_bitwise_deterministic(gmm, tmp_path):
    h1, f1 = run_training(_small(), *gmm, tmp_path / "a")
    h2, f2 = run_training(_small(), *gmm, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert f1 == f2


def test_history_iterations_strictly_increase():
    h = TrainHistory()
    h.append({"iteration": 5, "class_frechet": 1.0})
    with pytest.raises(ValueError):
        h.append({"iteration": 5, "class_frechet": 0.5})
    h.append({"iteration": 6, "class_frechet": 0.5})
    assert h.best["iteration"] == 6


def test_non_finite_loss_aborts_with_partial_history(gmm, tmp_path, monkeypatch):
    real_step = Trainer.train_generator_step

    def step(self):
        out = real_step(self)
        return {**out, "L_G": float("nan")} if self.iteration == 4 else out

    monkeypatch.setattr(Trainer, "train_generator_step", step)
    with pytest.raises(TrainingAborted, match="iteration 4") as info:
        run_training(_small(iterations=10, eval_interval=1), *gmm, tmp_path)
    assert info.value.iteration == 4
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3
