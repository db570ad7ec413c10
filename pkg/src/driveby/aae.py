"""Adversarial autoencoder for spectral anomaly detection.

Plain numpy multilayer perceptrons with hand-written backpropagation. The
encoder maps a normalised spectrum to a latent code, the decoder maps it
back, and a discriminator learns to tell encoded codes from draws of a
standard Gaussian prior. Losses are evaluated on discriminator logits
through softplus, which keeps ``log D`` finite for saturated outputs.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BundleCorrupt,
    ConfigInvalid,
    DimensionMismatch,
    EmptyBatch,
    IoFailure,
    SchemaMismatch,
    TooFewSamples,
)
from .preprocess import SAMPLE_LINES, SpectralSample

MODEL_SCHEMA = "driveby.aae/1"

ENCODER_HIDDEN = (256, 64)
DISCRIMINATOR_HIDDEN = (64, 32)
LATENT_DIM = 8

_ACTS = ("tanh", "sigmoid", "linear")


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.logaddexp(0.0, z)


@dataclass
class Mlp:
    """Stack of affine maps ``a = h @ W + b`` followed by per-layer activations."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations)
        )

    def forward(self, x: np.ndarray, keep: bool = False, final_logits: bool = False):
        """Returns the output, or ``(output, cache)`` when ``keep``.

        With ``final_logits`` the last activation is skipped.
        """
        h = x
        cache = [h]
        n = len(self.weights)
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            a = h @ w + b
            if k == n - 1 and final_logits:
                h = a
            else:
                h = _activate(a, act)
            cache.append(h)
        return (h, cache) if keep else h

    def backward(self, cache, grad_out: np.ndarray, final_logits: bool = False):
        """Gradients w.r.t. parameters (same order as ``params``) and input."""
        n = len(self.weights)
        g = grad_out
        grads = [None] * (2 * n)
        for k in range(n - 1, -1, -1):
            h_out = cache[k + 1]
            if not (k == n - 1 and final_logits):
                g = g * _activation_slope(h_out, self.activations[k])
            grads[2 * k] = cache[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grads, g


def _activate(a, act):
    if act == "tanh":
        return np.tanh(a)
    if act == "sigmoid":
        return sigmoid(a)
    return a


def _activation_slope(h, act):
    # derivative written in terms of the activation output
    if act == "tanh":
        return 1.0 - h * h
    if act == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(h)


def _init_mlp(rng: np.random.Generator, dims, activations) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-lim, lim, size=fan_out))
    return Mlp(weights, biases, list(activations))


@dataclass
class AaeModel:
    encoder: Mlp
    decoder: Mlp
    discriminator: Mlp
    latent_dim: int
    rng_seed: int
    threshold: float | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (
            self.encoder.out_dim == self.latent_dim
            and self.decoder.in_dim == self.latent_dim
            and self.discriminator.in_dim == self.latent_dim
        ):
            raise DimensionMismatch("encoder, decoder and discriminator disagree on latent width")
        if self.discriminator.out_dim != 1 or self.discriminator.activations[-1] != "sigmoid":
            raise DimensionMismatch("discriminator must end in a single sigmoid unit")

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim

    def copy(self) -> "AaeModel":
        return AaeModel(
            self.encoder.copy(),
            self.decoder.copy(),
            self.discriminator.copy(),
            self.latent_dim,
            self.rng_seed,
            self.threshold,
            dict(self.manifest),
        )


def init_model(
    input_dim: int = SAMPLE_LINES,
    latent_dim: int = LATENT_DIM,
    seed: int = 0,
    hidden: tuple[int, ...] = ENCODER_HIDDEN,
    disc_hidden: tuple[int, ...] = DISCRIMINATOR_HIDDEN,
) -> AaeModel:
    """Fresh model with fan-in scaled symmetric uniform weights.

    The default widths give an encoder 900 -> 256 -> 64 -> 8 (tanh, tanh,
    linear), the mirrored decoder with a sigmoid output, and a
    discriminator 8 -> 64 -> 32 -> 1. Smaller widths are accepted so that
    gradient checks can run on toy instances.
    """
    if input_dim < 1 or latent_dim < 1:
        raise DimensionMismatch("input_dim and latent_dim must be positive")
    rng = np.random.default_rng(seed)
    enc_dims = (input_dim, *hidden, latent_dim)
    enc = _init_mlp(rng, enc_dims, ["tanh"] * len(hidden) + ["linear"])
    dec = _init_mlp(rng, enc_dims[::-1], ["tanh"] * len(hidden) + ["sigmoid"])
    disc = _init_mlp(
        rng, (latent_dim, *disc_hidden, 1), ["tanh"] * len(disc_hidden) + ["sigmoid"]
    )
    return AaeModel(enc, dec, disc, latent_dim, int(seed))


def _as_batch(model: AaeModel, x) -> np.ndarray:
    if isinstance(x, SpectralSample):
        x = x.values
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], SpectralSample):
        x = np.vstack([s.values for s in x])
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input width {x.shape[1]} != model input {model.input_dim}")
    return x


def reconstruct(model: AaeModel, x):
    """``(x_bar, y)``; a single sample returns 1-D vectors."""
    single = isinstance(x, SpectralSample) or np.ndim(x) == 1
    xb = _as_batch(model, x)
    y = model.encoder.forward(xb)
    x_bar = model.decoder.forward(y)
    if single:
        return x_bar[0], y[0]
    return x_bar, y


def discriminate(model: AaeModel, y) -> np.ndarray:
    """Discriminator probabilities, one per latent row."""
    return model.discriminator.forward(np.atleast_2d(y))[:, 0]


def _check_batch(n: int):
    if n == 0:
        raise EmptyBatch("empty batch")


def discriminator_loss(model: AaeModel, y_batch, y_true_batch) -> float:
    """``-mean[log D(y_true) + log(1 - D(y))]`` over the batch."""
    y = np.atleast_2d(np.asarray(y_batch, dtype=float))
    yt = np.atleast_2d(np.asarray(y_true_batch, dtype=float))
    _check_batch(len(y) if y.size else 0)
    _check_batch(len(yt) if yt.size else 0)
    if len(y) != len(yt):
        raise DimensionMismatch("encoded and prior batches differ in size")
    z_fake = model.discriminator.forward(y, final_logits=True)[:, 0]
    z_true = model.discriminator.forward(yt, final_logits=True)[:, 0]
    return float(np.mean(softplus(-z_true) + softplus(z_fake)))


def discriminator_loss_grad(model: AaeModel, y_batch, y_true_batch):
    """Loss and gradients w.r.t. discriminator parameters."""
    y = np.atleast_2d(np.asarray(y_batch, dtype=float))
    yt = np.atleast_2d(np.asarray(y_true_batch, dtype=float))
    _check_batch(len(y))
    n = len(y)
    disc = model.discriminator
    z_fake, c_fake = disc.forward(y, keep=True, final_logits=True)
    z_true, c_true = disc.forward(yt, keep=True, final_logits=True)
    loss = float(np.mean(softplus(-z_true[:, 0]) + softplus(z_fake[:, 0])))
    # d softplus(z)/dz = sigmoid(z)
    g_fake, _ = disc.backward(c_fake, sigmoid(z_fake) / n, final_logits=True)
    g_true, _ = disc.backward(c_true, -sigmoid(-z_true) / n, final_logits=True)
    return loss, [a + b for a, b in zip(g_fake, g_true)]


def generator_loss(model: AaeModel, x_batch) -> float:
    """Mean squared reconstruction error plus ``-mean log D(encoder(x))``."""
    x = _as_batch(model, x_batch) if np.size(x_batch) else np.empty((0, model.input_dim))
    _check_batch(len(x))
    y = model.encoder.forward(x)
    x_bar = model.decoder.forward(y)
    z = model.discriminator.forward(y, final_logits=True)[:, 0]
    return float(np.mean((x - x_bar) ** 2) + np.mean(softplus(-z)))


def _generator_parts(model: AaeModel, x: np.ndarray, recon: bool, adversarial: bool):
    n = len(x)
    y, c_enc = model.encoder.forward(x, keep=True)
    g_y = np.zeros_like(y)
    loss = 0.0
    g_dec = None
    if recon:
        x_bar, c_dec = model.decoder.forward(y, keep=True)
        diff = x_bar - x
        loss += float(np.mean(diff**2))
        g_dec, gy = model.decoder.backward(c_dec, 2.0 * diff / diff.size)
        g_y += gy
    if adversarial:
        z, c_disc = model.discriminator.forward(y, keep=True, final_logits=True)
        loss += float(np.mean(softplus(-z)))
        _, gy = model.discriminator.backward(c_disc, -sigmoid(-z) / n, final_logits=True)
        g_y += gy
    g_enc, _ = model.encoder.backward(c_enc, g_y)
    return loss, g_enc, g_dec


def generator_loss_grad(model: AaeModel, x_batch):
    """Loss and gradients w.r.t. encoder and decoder parameters.

    The discriminator is held fixed; its parameters get no gradient here.
    """
    x = _as_batch(model, x_batch)
    _check_batch(len(x))
    loss, g_enc, g_dec = _generator_parts(model, x, True, True)
    return loss, g_enc, g_dec


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    split_ratio: float = 0.8
    threshold_percentile: float = 90.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigInvalid(f"split_ratio {self.split_ratio} outside (0, 1)")
        if not 0.0 < self.threshold_percentile <= 100.0:
            raise ConfigInvalid(f"threshold_percentile {self.threshold_percentile} outside (0, 100]")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigInvalid("epochs, batch_size and learning_rate must be positive")


@dataclass
class TrainResult:
    model: AaeModel
    threshold: float
    validation_errors: np.ndarray
    history: np.ndarray


def reconstruction_errors(model: AaeModel, x) -> np.ndarray:
    """Per-sample mean squared error over the spectral lines."""
    xb = _as_batch(model, x)
    x_bar, _ = reconstruct(model, xb)
    return np.mean((xb - x_bar) ** 2, axis=1)


def split_calibration(n: int, split_ratio: float) -> int:
    """Number of leading samples used for fitting; the rest calibrate."""
    n_fit = int(round(n * split_ratio))
    return min(max(n_fit, 1), n - 1)


def train(model: AaeModel, samples, cfg: TrainConfig | None = None) -> TrainResult:
    """Fit on the leading ``split_ratio`` of ``samples``; calibrate on the rest.

    Each minibatch runs a reconstruction step on encoder and decoder, then a
    discriminator step against prior draws, then an encoder step on the
    adversarial term. The threshold is the configured percentile (linear
    interpolation) of reconstruction errors over the held-out tail. The
    input model is not modified.
    """
    cfg = cfg or TrainConfig()
    x = _as_batch(model, samples) if len(samples) else np.empty((0, model.input_dim))
    if len(x) < 10:
        raise TooFewSamples(f"training needs at least 10 samples, got {len(x)}")
    model = model.copy()
    n_fit = split_calibration(len(x), cfg.split_ratio)
    x_fit, x_cal = x[:n_fit], x[n_fit:]
    rng = np.random.default_rng(cfg.seed)

    opt_ae = Adam(model.encoder.params() + model.decoder.params(), cfg.learning_rate)
    opt_disc = Adam(model.discriminator.params(), cfg.learning_rate)
    opt_gen = Adam(model.encoder.params(), cfg.learning_rate)

    history = np.empty((cfg.epochs, 3))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_fit)
        sums = np.zeros(3)
        for start in range(0, n_fit, cfg.batch_size):
            xb = x_fit[order[start : start + cfg.batch_size]]
            # reconstruction phase
            rec, g_enc, g_dec = _generator_parts(model, xb, True, False)
            opt_ae.step(g_enc + g_dec)
            # regularisation phase
            y = model.encoder.forward(xb)
            y_true = rng.standard_normal(y.shape)
            d_loss, g_disc = discriminator_loss_grad(model, y, y_true)
            opt_disc.step(g_disc)
            adv, g_enc, _ = _generator_parts(model, xb, False, True)
            opt_gen.step(g_enc)
            sums += (rec * len(xb), d_loss * len(xb), adv * len(xb))
        history[epoch] = sums / n_fit

    errors = reconstruction_errors(model, x_cal)
    threshold = float(np.percentile(errors, cfg.threshold_percentile, method="linear"))
    model.threshold = threshold
    model.manifest = {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "split_ratio": cfg.split_ratio,
        "threshold_percentile": cfg.threshold_percentile,
        "seed": cfg.seed,
        "n_fit": int(n_fit),
        "n_calibration": int(len(x_cal)),
    }
    return TrainResult(model=model, threshold=threshold, validation_errors=errors, history=history)


@dataclass
class DetectionResult:
    sample_ids: list[str]
    errors: np.ndarray
    threshold: float

    @property
    def anomalous(self) -> np.ndarray:
        return self.errors > self.threshold

    @property
    def verdicts(self) -> list[str]:
        return ["anomalous" if a else "nominal" for a in self.anomalous]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "error", "threshold", "verdict"])
            for sid, e, v in zip(self.sample_ids, self.errors, self.verdicts):
                w.writerow([sid, repr(float(e)), repr(float(self.threshold)), v])


def classify(model: AaeModel, threshold: float | None, x, sample_ids=None) -> DetectionResult:
    """Flag samples whose reconstruction error exceeds ``threshold``."""
    if threshold is None:
        threshold = model.threshold
    if threshold is None:
        raise ValueError("no threshold given and the model carries none")
    errors = reconstruction_errors(model, x)
    if sample_ids is None:
        sample_ids = [f"s{k:03d}" for k in range(errors.size)]
    return DetectionResult(list(sample_ids), errors, float(threshold))


# persistence


def _mlp_to_dict(net: Mlp) -> dict:
    return {
        "shapes": [list(s) for s in net.shapes],
        "activations": net.activations,
        "weights": [[repr(float(v)) for v in w.ravel()] for w in net.weights],
        "biases": [[repr(float(v)) for v in b] for b in net.biases],
    }


def _mlp_from_dict(d: dict) -> Mlp:
    weights, biases = [], []
    for shape, w, b in zip(d["shapes"], d["weights"], d["biases"]):
        wa = np.array([float(v) for v in w], dtype=float)
        ba = np.array([float(v) for v in b], dtype=float)
        if wa.size != shape[0] * shape[1] or ba.size != shape[1]:
            raise BundleCorrupt(f"weight count does not match layer shape {shape}")
        weights.append(wa.reshape(shape))
        biases.append(ba)
    for act in d["activations"]:
        if act not in _ACTS:
            raise BundleCorrupt(f"unknown activation {act!r}")
    return Mlp(weights, biases, list(d["activations"]))


def model_to_dict(model: AaeModel) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "latent_dim": model.latent_dim,
        "seed": model.rng_seed,
        "threshold": None if model.threshold is None else repr(float(model.threshold)),
        "manifest": model.manifest,
        "encoder": _mlp_to_dict(model.encoder),
        "decoder": _mlp_to_dict(model.decoder),
        "discriminator": _mlp_to_dict(model.discriminator),
    }


def model_from_dict(d: dict) -> AaeModel:
    if d.get("schema") != MODEL_SCHEMA:
        raise SchemaMismatch(f"expected schema {MODEL_SCHEMA}, got {d.get('schema')!r}")
    try:
        thr = d["threshold"]
        return AaeModel(
            _mlp_from_dict(d["encoder"]),
            _mlp_from_dict(d["decoder"]),
            _mlp_from_dict(d["discriminator"]),
            int(d["latent_dim"]),
            int(d["seed"]),
            None if thr is None else float(thr),
            dict(d.get("manifest", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleCorrupt(f"malformed model document: {exc}") from exc


def save_model(model: AaeModel, path) -> None:
    tmp = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "w") as fh:
            json.dump(model_to_dict(model), fh, sort_keys=True)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path) -> AaeModel:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise IoFailure(f"missing model file {path}") from exc
    except json.JSONDecodeError as exc:
        raise BundleCorrupt(f"{path}: {exc}") from exc
    return model_from_dict(d)
