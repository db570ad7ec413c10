import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driveby import aae
from driveby.aae import (
    AaeModel,
    Adam,
    Mlp,
    TrainConfig,
    classify,
    discriminator_loss,
    discriminator_loss_grad,
    generator_loss,
    generator_loss_grad,
    init_model,
    reconstruct,
    train,
)
from driveby.errors import (
    BundleCorrupt,
    ConfigInvalid,
    DimensionMismatch,
    EmptyBatch,
    SchemaMismatch,
    TooFewSamples,
)


def small_model(seed=0, n_in=12, latent=3):
    return init_model(n_in, latent, seed=seed, hidden=(7, 5), disc_hidden=(6, 4))


def identity_model(n=5, disc_bias=0.0):
    eye = Mlp([np.eye(n)], [np.zeros(n)], ["linear"])
    disc = Mlp([np.zeros((n, 1))], [np.array([disc_bias])], ["sigmoid"])
    return AaeModel(eye, eye.copy(), disc, n, 0)


def finite_difference(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = f()
            p[idx] = keep - h
            down = f()
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


def test_default_architecture():
    m = init_model(seed=1)
    assert m.encoder.shapes == [(900, 256), (256, 64), (64, 8)]
    assert m.decoder.shapes == [(8, 64), (64, 256), (256, 900)]
    assert m.discriminator.shapes == [(8, 64), (64, 32), (32, 1)]
    assert m.decoder.activations[-1] == "sigmoid"
    assert m.encoder.activations == ["tanh", "tanh", "linear"]


def test_init_determinism_and_seed_sensitivity():
    a, b, c = init_model(seed=3), init_model(seed=3), init_model(seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.encoder.params(), b.encoder.params()))
    assert not np.array_equal(a.encoder.weights[0], c.encoder.weights[0])
    # fan-in scaled uniform bounds
    assert np.abs(a.encoder.weights[0]).max() <= 1 / np.sqrt(900)


def test_identity_reconstruction():
    m = identity_model()
    x = np.linspace(0, 1, 5)
    x_bar, y = reconstruct(m, x)
    np.testing.assert_array_equal(x_bar, x)
    np.testing.assert_array_equal(y, x)
    with pytest.raises(DimensionMismatch):
        reconstruct(m, np.ones(4))


def test_loss_reference_values():
    m = identity_model()
    y = np.random.default_rng(0).normal(size=(4, 5))
    assert discriminator_loss(m, y, y) == pytest.approx(np.log(4))
    x = np.random.default_rng(1).uniform(size=(3, 5))
    assert generator_loss(m, x) == pytest.approx(np.log(2))
    assert generator_loss(identity_model(disc_bias=800.0), x) == pytest.approx(0.0, abs=1e-300)


def test_discriminator_loss_perfect_limit():
    n = 2
    disc = Mlp([np.array([[50.0], [0.0]])], [np.array([0.0])], ["sigmoid"])
    eye = Mlp([np.eye(n)], [np.zeros(n)], ["linear"])
    m = AaeModel(eye, eye.copy(), disc, n, 0)
    y_fake = np.array([[-1.0, 0.0]])
    y_true = np.array([[1.0, 0.0]])
    assert discriminator_loss(m, y_fake, y_true) < 1e-20
    assert discriminator_loss(m, y_true, y_fake) > 99


def test_empty_batches():
    m = small_model()
    with pytest.raises(EmptyBatch):
        discriminator_loss(m, np.empty((0, 3)), np.empty((0, 3)))
    with pytest.raises(EmptyBatch):
        generator_loss(m, np.empty((0, 12)))


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    m = small_model(seed)
    x = r.uniform(size=(4, 12))
    y, yt = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    _, g = discriminator_loss_grad(m, y, yt)
    fd = finite_difference(lambda: discriminator_loss(m, y, yt), m.discriminator.params())
    assert rel_error(g, fd) < 1e-6
    _, ge, gd = generator_loss_grad(m, x)
    fd = finite_difference(lambda: generator_loss(m, x), m.encoder.params() + m.decoder.params())
    assert rel_error(ge + gd, fd) < 1e-6


@given(scale=st.floats(-1e6, 1e6), seed=st.integers(0, 100))
def test_property_discriminator_strictly_inside(scale, seed):
    m = init_model(seed=seed % 5)
    y = np.random.default_rng(seed).normal(size=(6, 8)) * scale
    d = aae.discriminate(m, y)
    assert np.all((d > 0) & (d < 1))


def test_adam_first_step_matches_formula():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.1, 0.0])
    opt = Adam([p], lr=0.01)
    opt.step([g])
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_adam_minimises_quadratic():
    p = np.array([3.0, -4.0])
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2 * p])
    assert np.linalg.norm(p) < 1e-2


def test_train_config_validation():
    with pytest.raises(ConfigInvalid):
        TrainConfig(split_ratio=1.0)
    with pytest.raises(ConfigInvalid):
        TrainConfig(threshold_percentile=0)


def test_train_needs_ten_samples():
    m = small_model()
    with pytest.raises(TooFewSamples):
        train(m, np.random.default_rng(0).uniform(size=(9, 12)), TrainConfig(epochs=1))


def test_train_deterministic_and_threshold():
    m = small_model()
    x = np.random.default_rng(5).uniform(size=(20, 12))
    cfg = TrainConfig(epochs=20, batch_size=4, seed=11)
    a, b = train(m, x, cfg), train(m, x, cfg)
    for p, q in zip(a.model.encoder.params(), b.model.encoder.params()):
        assert np.array_equal(p, q)
    assert a.threshold == b.threshold
    # calibration tail: last 20% of the samples, not used for fitting
    errs = aae.reconstruction_errors(a.model, x[16:])
    np.testing.assert_array_equal(errs, a.validation_errors)
    assert a.threshold == np.percentile(errs, 90)
    # input model untouched
    assert np.array_equal(m.encoder.weights[0], small_model().encoder.weights[0])


def test_constant_dataset_converges():
    x = np.tile(np.linspace(0.2, 0.8, 12), (12, 1))
    res = train(small_model(2), x, TrainConfig(epochs=400, batch_size=4, learning_rate=1e-2))
    rec = res.history[:, 0]
    assert rec[-1] < 1e-3
    assert rec[-1] < 0.05 * rec[0]


def test_classify_rule_and_csv(tmp_path):
    m = identity_model()
    x = np.random.default_rng(0).uniform(size=(3, 5))
    det = classify(m, 0.0, x)
    assert np.all(det.errors == 0.0)
    assert det.verdicts == ["nominal"] * 3
    det = aae.DetectionResult(["a", "b", "c"], np.array([0.1, 0.2, 0.3]), 0.2)
    assert det.verdicts == ["nominal", "nominal", "anomalous"]
    path = tmp_path / "d.csv"
    det.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sample_id", "error", "threshold", "verdict"]
    assert rows[3] == ["c", "0.3", "0.2", "anomalous"]


def test_error_is_mean_squared():
    m = identity_model()
    m.decoder = Mlp([np.zeros((5, 5))], [np.full(5, 0.5)], ["linear"])
    x = np.array([0.0, 1.0, 0.5, 0.5, 0.5])
    assert aae.reconstruction_errors(m, x)[0] == pytest.approx(0.1)


def test_persistence_round_trip(tmp_path):
    m = small_model(7)
    m.threshold = 0.1 + 1e-17
    path = tmp_path / "m.json"
    aae.save_model(m, path)
    back = aae.load_model(path)
    for p, q in zip(m.encoder.params() + m.discriminator.params(),
                    back.encoder.params() + back.discriminator.params()):
        assert np.array_equal(p, q)
    assert back.threshold == m.threshold
    doc = json.load(open(path))
    assert isinstance(doc["encoder"]["weights"][0][0], str)
    doc["schema"] = "other"
    json.dump(doc, open(path, "w"))
    with pytest.raises(SchemaMismatch):
        aae.load_model(path)
    path.write_text("{not json")
    with pytest.raises(BundleCorrupt):
        aae.load_model(path)
