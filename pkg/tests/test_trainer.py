import math

import numpy as np
import pytest

from rho_vae import data_io, trainer
from rho_vae.errors import ConfigError, InvalidParameterError, NanLossError
from rho_vae.trainer import TrainConfig


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"beta": -1.0}, "beta"),
        ({"beta": float("nan")}, "beta"),
        ({"lr": 0.0}, "lr"),
        ({"latent_dim": 0}, "latent_dim"),
        ({"batch_size": 0}, "batch_size"),
        ({"epochs": -1}, "epochs"),
        ({"posterior_kind": "full"}, "posterior_kind"),
        ({"recon_loss": "poisson"}, "recon_loss"),
    ],
)
def test_train_config_names_the_invalid_field(overrides, field):
    with pytest.raises(ConfigError) as excinfo:
        TrainConfig(**overrides)
    assert excinfo.value.field == field


def test_train_config_round_trips_through_a_dict():
    cfg = TrainConfig(posterior_kind="diag", beta=2.5, seed=11)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_elbo_loss_examples():
    x = np.array([[0.0, 1.0, 1.0, 0.0]])
    total, recon = trainer.elbo_loss(x, x, np.zeros(1), TrainConfig())
    assert float(total[0]) == pytest.approx(0.0, abs=1e-5)

    total, recon = trainer.elbo_loss(x, x, np.zeros(1), TrainConfig(recon_loss="gaussian"))
    assert float(recon[0]) == 0.0

    _, recon = trainer.elbo_loss(np.array([[1.0]]), np.array([[0.5]]), np.zeros(1), TrainConfig())
    assert float(recon[0]) == pytest.approx(math.log(2.0))


def test_elbo_loss_weights_the_kl_by_beta():
    x = np.array([[0.2, 0.7]])
    x_hat = np.array([[0.4, 0.6]])
    total, recon = trainer.elbo_loss(x, x_hat, np.array([3.0]), TrainConfig(beta=0.5))
    assert float(total[0]) == pytest.approx(float(recon[0]) + 1.5)


def test_elbo_loss_rejects_pixels_outside_unit_interval():
    with pytest.raises(InvalidParameterError):
        trainer.elbo_loss(np.array([[1.5]]), np.array([[0.5]]), np.zeros(1), TrainConfig())


def test_bernoulli_gradient_vanishes_where_clamped():
    grad = trainer.elbo_loss_grad(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), TrainConfig())
    assert np.array_equal(grad, np.zeros((1, 2)))


def test_zero_epochs_leave_the_model_untouched(tiny_splits, tiny_config):
    train_set, test_set = tiny_splits
    cfg = TrainConfig.from_dict({**tiny_config.to_dict(), "epochs": 0})
    model = trainer.build_model(cfg, train_set.image_shape)
    before = {name: value.copy() for name, value in model.parameters().items()}
    result = trainer.train(train_set, test_set, cfg, model=model)
    assert result.stats == []
    assert result.csv_text == ",".join(trainer.CSV_FIELDS) + "\n"
    for name, value in model.parameters().items():
        assert np.array_equal(value, before[name])


@pytest.mark.parametrize("kind", ["diag", "ar1"])
def test_training_is_deterministic_per_seed(tiny_splits, tiny_config, kind):
    train_set, test_set = tiny_splits
    cfg = TrainConfig.from_dict({**tiny_config.to_dict(), "posterior_kind": kind})
    first = trainer.train(train_set, test_set, cfg)
    second = trainer.train(train_set, test_set, cfg)
    assert first.csv_text == second.csv_text
    assert len(first.stats) == cfg.epochs
    for stats in first.stats:
        assert stats.seconds == 0.0
        assert stats.test_loss == pytest.approx(stats.test_recon + cfg.beta * stats.test_kl)


def test_csv_log_has_one_row_per_epoch(tiny_splits, tiny_config):
    result = trainer.train(*tiny_splits, tiny_config)
    lines = result.csv_text.splitlines()
    assert lines[0] == "epoch,train_loss,test_loss,test_recon,test_kl,seconds"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]


def test_single_sample_gaussian_training_overfits():
    image = np.random.default_rng(0).uniform(0.1, 0.9, size=(1, 16))
    dataset = data_io.Dataset(images=image, rows=4, cols=4)
    cfg = TrainConfig(recon_loss="gaussian", latent_dim=2, hidden_dim=16, epochs=300, batch_size=1, lr=1e-2, seed=1)
    result = trainer.train(dataset, dataset, cfg)
    assert np.mean(result.train_recon[-20:]) < np.mean(result.train_recon[:20])
    assert result.train_recon[-1] < result.train_recon[0]


def test_non_finite_loss_aborts_with_diagnostics(tiny_splits, tiny_config, monkeypatch):
    def broken(model, x, eps, cfg, need_grad=True):
        return trainer.BatchResult(recon=np.full(len(x), np.nan), kl=np.zeros(len(x)), total=np.full(len(x), np.nan))

    monkeypatch.setattr(trainer, "loss_and_grad", broken)
    with pytest.raises(NanLossError) as excinfo:
        trainer.train(*tiny_splits, tiny_config)
    assert excinfo.value.epoch == 1
    assert excinfo.value.batch == 0
    assert "encoder.trunk.0.weight" in str(excinfo.value)


def test_generate_examples(tiny_config):
    model = trainer.build_model(tiny_config, (4, 4))
    assert trainer.generate(model, 0, np.random.default_rng(0)) == []

    first = trainer.generate(model, 3, np.random.default_rng(5))
    second = trainer.generate(model, 3, np.random.default_rng(5))
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    assert all(image.shape == (4, 4) and image.min() >= 0.0 and image.max() <= 1.0 for image in first)

    zero = trainer.build_model(tiny_config, (4, 4), init="zeros")
    images = trainer.generate(zero, 4, np.random.default_rng(6))
    assert all(np.array_equal(image, images[0]) for image in images)


def test_format_number_uses_twelve_significant_digits():
    assert trainer.format_number(1.0 / 3.0) == "0.333333333333"
    assert trainer.format_number(123456.789) == "123456.789000"


def test_compare_posteriors_runs_both_kinds(tiny_splits, tiny_config):
    comparison = trainer.compare_posteriors(*tiny_splits, tiny_config)
    assert comparison.diag.config.posterior_kind == "diag"
    assert comparison.ar1.config.posterior_kind == "ar1"
    lines = comparison.csv_text.splitlines()
    assert lines[0] == "epoch,diag_test_loss,ar1_test_loss"
    assert len(lines) == 1 + tiny_config.epochs
    assert "difference ar1 - diag" in comparison.summary()


@pytest.mark.slow
def test_ar1_beats_diag_on_correlated_images_across_seeds():
    wins = 0
    for seed in range(5):
        train_set, test_set = data_io.synth_splits(4000, 1000, 8, 0.8, seed)
        cfg = TrainConfig(
            recon_loss="bernoulli", beta=1.0, latent_dim=8, hidden_dim=64, epochs=10, batch_size=64, seed=seed
        )
        comparison = trainer.compare_posteriors(train_set, test_set, cfg)
        diag, ar1 = comparison.diag.stats[-1], comparison.ar1.stats[-1]
        # Both posteriors must carry information; a collapsed run compares noise.
        assert diag.test_kl > 1.0 and ar1.test_kl > 1.0
        if ar1.test_loss <= diag.test_loss:
            wins += 1
    assert wins >= 4
