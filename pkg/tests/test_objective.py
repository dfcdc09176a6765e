import csv
import math

import numpy as np
import pytest

from avdct.diffnet import grad_check
from avdct.errors import ConfigError, DivergenceError, InvalidInputError, InvalidParameterError
from avdct.evalkit import synthetic_recording, segment_frames
from avdct.objective import (
    LossConfig,
    _pack,
    _unpack,
    elbo_backward,
    elbo_loss,
    init_model,
    kl_divergence,
    kl_from_scale,
    kl_gradient,
    loss_and_grads,
    mle_scale,
    train,
    zero_fraction,
)
from models import random_decoder, random_encoder
from oracles import laplace_kl_quad

RATIOS = (0.1, 0.5, 1.0, 2.0, 10.0)


def test_kl_hand_value():
    assert kl_from_scale(2e-5, 1e-5, 64) == pytest.approx(128 + 64 * math.log(0.5) - 64, rel=1e-14)
    assert kl_from_scale(2e-5, 1e-5, 64) == pytest.approx(19.638580444163, rel=1e-12)


@pytest.mark.parametrize("ratio", RATIOS)
@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_kl_matches_quadrature(ratio, direction):
    lam = 1e-5
    f = ratio * lam
    closed = kl_from_scale(f, lam, 64, direction)
    p, q = (f, lam) if direction == "forward" else (lam, f)
    numeric = 64 * laplace_kl_quad(p, q)
    if ratio == 1.0:
        assert abs(closed) <= 1e-12 and abs(numeric) <= 1e-12
    else:
        assert closed == pytest.approx(numeric, rel=1e-6)


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_kl_zero_only_at_prior_scale(direction):
    ratios = np.geomspace(0.01, 100, 401)
    kl = kl_from_scale(ratios * 1e-5, 1e-5, 64, direction)
    assert kl_from_scale(1e-5, 1e-5, 64, direction) == 0.0
    assert np.all(kl[ratios != 1.0] > 0)
    assert np.argmin(kl) == 200


def test_kl_direction_and_lambda_validation():
    with pytest.raises(InvalidParameterError):
        kl_from_scale(1.0, 0.0, 4)
    with pytest.raises(InvalidParameterError):
        kl_from_scale(1.0, 1.0, 4, "sideways")


def test_mle_scale_is_mean_abs_with_floor():
    assert mle_scale([1.0, -3.0]) == 2.0
    assert mle_scale(np.zeros(4)) == 1e-12
    np.testing.assert_array_equal(mle_scale([[1.0, -1.0], [0.0, 4.0]]), [1.0, 2.0])


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_kl_gradient_finite_differences(direction):
    rng = np.random.default_rng(0)
    latent = rng.normal(size=(3, 8)) * 0.1
    lam = 0.05
    report = grad_check(
        lambda d: float(np.sum(kl_divergence(d["y"], lam, direction))),
        {"y": latent},
        {"y": kl_gradient(latent, lam, direction)},
    )
    assert report.passed, report


def test_kl_gradient_zero_row():
    np.testing.assert_array_equal(kl_gradient(np.zeros((2, 4)), 1e-5), np.zeros((2, 4)))


def test_elbo_terms():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    z = x + 0.5
    y = np.array([[1e-5, -1e-5], [2e-5, 2e-5]])
    cfg = LossConfig(epsilon=0.5)
    total, rec, kl = elbo_loss(x, z, y, cfg)
    assert rec == 0.25
    assert kl == pytest.approx((0.0 + kl_from_scale(2e-5, 1e-5, 2)) / 2, rel=1e-14)
    assert total == pytest.approx(rec + 0.5 * kl, rel=1e-14)


def test_elbo_shape_mismatch():
    with pytest.raises(InvalidInputError):
        elbo_loss(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((3, 4)), LossConfig())


def test_elbo_backward_finite_differences():
    rng = np.random.default_rng(1)
    x, z, y = rng.normal(size=(3, 2, 3, 5))
    cfg = LossConfig(lam=0.3, epsilon=0.7)
    gz, gy = elbo_backward(x, z, y, cfg)
    report = grad_check(lambda d: elbo_loss(x, d["z"], d["y"], cfg)[0], {"z": z, "y": y}, {"z": gz, "y": gy})
    assert report.passed, report


def test_config_validation():
    for bad in (dict(lam=0), dict(rho=1.5), dict(epsilon=-1), dict(kl_direction="x"), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            LossConfig(**bad).validate()


def test_zero_fraction():
    assert zero_fraction(np.array([[0, 1], [0, 0]])) == 0.75


def test_full_model_gradients_small():
    rng = np.random.default_rng(2)
    enc = random_encoder(4, 2, rng)
    dec = random_decoder(2, 4, 1, rng)
    frames = rng.normal(size=(2, 2, 4))
    cfg = LossConfig(lam=0.1, epsilon=0.05)
    _, _, _, grads = loss_and_grads(frames, enc, dec, cfg)
    params = _pack(enc, dec)

    def fn(p):
        return loss_and_grads(frames, *_unpack(p), cfg)[0]

    analytic = {k: v for k, v in grads.items() if k not in ("enc.t", "dec.dec_t")}
    report = grad_check(fn, params, analytic)
    assert report.passed, report


def _tiny_corpus():
    rec = synthetic_recording(channels=4, samples=16 * 40, amplitude=10, seed=3)
    return segment_frames(rec, 16)


def test_training_is_deterministic_and_clamps_thresholds():
    frames = _tiny_corpus()
    cfg = LossConfig(max_epochs=3, rho=1.0, lr=1e-2)
    runs = []
    for _ in range(2):
        enc, dec = init_model(4, 16, 3, 2, seed=0)
        ckpt, hist = train(frames, enc, dec, cfg, seed=5)
        runs.append((ckpt, hist))
    assert runs[0][1].losses() == runs[1][1].losses()
    assert len(runs[0][1]) == 3 and not runs[0][1].stopped_by_rho
    for k, v in runs[0][0].params.items():
        np.testing.assert_array_equal(v, runs[1][0].params[k])
    assert np.all(runs[0][0].params["enc.t"] >= 0)
    assert np.all(runs[0][0].params["dec.dec_t"] >= 0)
    assert runs[0][0].hyper["C"] == 4 and runs[0][0].hyper["tau"] == 2


def test_training_stops_when_rho_reached():
    frames = _tiny_corpus()
    enc, dec = init_model(4, 16, 3, 2)
    seen = []
    _, hist = train(frames, enc, dec, LossConfig(max_epochs=50, rho=0.0), on_epoch=seen.append)
    assert hist.stopped_by_rho and len(hist) == 1 and len(seen) == 1


def test_training_reverse_kl_runs():
    frames = _tiny_corpus()
    enc, dec = init_model(4, 16, 3, 2)
    _, hist = train(frames, enc, dec, LossConfig(max_epochs=2, rho=1.0, kl_direction="reverse"))
    assert all(math.isfinite(l) for l in hist.losses())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported():
    frames = _tiny_corpus() * 1e160
    enc, dec = init_model(4, 16, 3, 2)
    with pytest.raises(DivergenceError) as info:
        train(frames, enc, dec, LossConfig(max_epochs=2))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_history_csv(tmp_path):
    frames = _tiny_corpus()
    enc, dec = init_model(4, 16, 3, 2)
    _, hist = train(frames, enc, dec, LossConfig(max_epochs=2, rho=1.0))
    hist.write_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["epoch", "loss", "recon", "kl", "zero_fraction"]
    assert [float(r[1]) for r in rows[1:]] == hist.losses()
