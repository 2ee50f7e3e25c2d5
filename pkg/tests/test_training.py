import numpy as np
import pytest

from geodist import geometry as g
from geodist.denoiser import DenoiserConfig, DenoiserModel, loss_weight
from geodist.training import (DivergenceError, TrainConfig, denoising_loss, epoch_seed, sample_sigma, train,
                              training_loss)

TINY = DenoiserConfig(16, 2)


def tiny_train_config(**kw):
    base = dict(epochs=3, iters_per_epoch=4, batch_size=128, points_per_epoch=1024, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_sigma_is_lognormal():
    s = sample_sigma(200_000, np.random.default_rng(0), -1.2, 1.2)
    assert np.log(s).mean() == pytest.approx(-1.2, abs=0.01)
    assert np.log(s).std() == pytest.approx(1.2, abs=0.01)
    with pytest.raises(ValueError):
        sample_sigma(0, np.random.default_rng(0))


def test_loss_matches_direct_formula():
    m = DenoiserModel(TINY, seed=0, dtype=np.float64)
    m.segment("final.out_gain")[...] = 0.8
    rng = np.random.default_rng(1)
    x = rng.standard_normal((32, 3))
    sigma = np.exp(rng.normal(-1.2, 1.2, 32))
    n = rng.standard_normal((32, 3))
    got = denoising_loss(m, x, sigma, n, accumulate=False)
    d = np.stack([m.denoise((x + sigma[:, None] * n)[i:i + 1], sigma[i])[0] for i in range(32)])
    want = np.mean(loss_weight(sigma, 1.0) * np.sum((d - x) ** 2, axis=1))
    assert got == pytest.approx(want, rel=1e-10)


def test_loss_at_init_equals_weighted_skip_error():
    # zero output gain: D = c_skip * y, so the loss has a closed form
    m = DenoiserModel(TINY, seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((64, 3))
    sigma = np.exp(rng.normal(-1.2, 1.2, 64))
    n = rng.standard_normal((64, 3))
    y = x + sigma[:, None] * n
    c_skip = 1 / (sigma**2 + 1)
    want = np.mean(loss_weight(sigma, 1.0) * np.sum((c_skip[:, None] * y - x) ** 2, axis=1))
    assert denoising_loss(m, x, sigma, n, accumulate=False) == pytest.approx(want, rel=1e-12)


def test_divergence_raises():
    m = DenoiserModel(TINY, seed=0)
    m.params[:] = np.nan
    with pytest.raises(DivergenceError):
        training_loss(m, np.zeros((8, 3)), np.random.default_rng(0))


def test_bad_batch_shape():
    m = DenoiserModel(TINY)
    with pytest.raises(ValueError):
        denoising_loss(m, np.zeros((8, 2)), np.ones(8), np.zeros((8, 2)))


def test_zero_epochs_returns_init_model():
    mesh = g.icosphere(2)
    model, report = train(mesh, TINY, tiny_train_config(epochs=0, seed=4))
    np.testing.assert_array_equal(model.params, DenoiserModel(TINY, seed=4).params)
    assert report.records == []


def test_training_is_deterministic():
    mesh = g.icosphere(2)
    a, ra = train(mesh, TINY, tiny_train_config(seed=9))
    b, rb = train(mesh, TINY, tiny_train_config(seed=9))
    np.testing.assert_array_equal(a.params, b.params)
    assert ra.losses == rb.losses
    c, _ = train(mesh, TINY, tiny_train_config(seed=10))
    assert not np.array_equal(a.params, c.params)


def test_training_reduces_loss_and_keeps_rows_unit():
    mesh = g.icosphere(3)
    tc = tiny_train_config(epochs=12, iters_per_epoch=8, batch_size=512, points_per_epoch=4096, lr=5e-3)
    model, report = train(mesh, DenoiserConfig(32, 2), tc)
    first, last = np.mean(report.losses[:2]), np.mean(report.losses[-2:])
    assert last < first
    for name in model.weight_segments:
        np.testing.assert_allclose(np.linalg.norm(model.segment(name).astype(np.float64), axis=1), 1, atol=1e-6)


def test_callbacks_eval_and_checkpoint_cadence():
    mesh = g.icosphere(2)
    seen, ckpts = [], []
    tc = tiny_train_config(epochs=4, eval_every=2, checkpoint_every=3)
    _, report = train(mesh, TINY, tc, eval_fn=lambda m: 0.5, checkpoint_fn=lambda m, e, c: ckpts.append(e),
                      callback=lambda e, m, r: seen.append(e))
    assert seen == [0, 1, 2, 3]
    assert ckpts == [2]
    assert [r.chamfer for r in report.records] == [None, 0.5, None, 0.5]


def test_report_csv(tmp_path):
    mesh = g.icosphere(2)
    _, report = train(mesh, TINY, tiny_train_config(epochs=2))
    report.write_csv(tmp_path / "r.csv", header_comment="prov")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:2] == ["# prov", "epoch,loss,chamfer,seconds"]
    assert len(lines) == 4


def test_lr_schedule():
    tc = TrainConfig(epochs=10, iters_per_epoch=10, lr=1e-2, lr_decay_iters=20, lr_final_frac=0.1)
    assert tc.lr_at(0) == 1e-2
    assert tc.lr_at(20) == 1e-2
    assert tc.lr_at(80) == pytest.approx(1e-2 / 2)
    assert tc.lr_at(99) == pytest.approx(1e-2 / np.sqrt(99 / 20) * (1 - 0.9 * 9 / 10))
    assert TrainConfig().lr_at(10**6) == TrainConfig().lr


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=-1), dict(lr=0.0), dict(p_std=0.0),
                                dict(lr_final_frac=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_epoch_seeds_differ():
    a = np.random.default_rng(epoch_seed(0, 1)).random()
    b = np.random.default_rng(epoch_seed(0, 2)).random()
    assert a != b
