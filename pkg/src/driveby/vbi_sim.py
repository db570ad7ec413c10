"""Synthetic direct and drive-by datasets for a simply supported beam.

The bridge is an Euler-Bernoulli beam solved by modal superposition. Point
masses (the added-mass damage surrogate) couple the sine modes through the
modal mass matrix; the coupled eigenproblem is solved once and the response is
integrated in the resulting uncoupled coordinates.

Vehicle-bridge interaction is uncoupled: the light vehicle's axle weights act
on the beam as moving constant loads, and each wheel's sprung mass is then
driven through its suspension by the beam deflection under the contact point
plus a road roughness profile.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.linalg import eigh, expm
from scipy.signal import butter, sosfilt

from .errors import UnstableTimestep, VehicleFasterThanBeam
from .spectral import MultiChannelRecord

GRAVITY = 9.81
CHANNEL_NAMES = ("front_right", "front_left", "rear_right", "rear_left")


@dataclass
class BeamModel:
    length: float
    flexural_rigidity: float
    mass_per_length: float
    damping_ratio: float | Sequence[float] = 0.01
    n_modes: int = 4
    added_masses: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.length <= 0 or self.flexural_rigidity <= 0 or self.mass_per_length <= 0:
            raise ValueError("length, EI and mass per length must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        self.added_masses = [(float(x), float(m)) for x, m in self.added_masses]
        for x, m in self.added_masses:
            if not 0.0 <= x <= self.length:
                raise ValueError(f"added mass position {x} outside [0, {self.length}]")
            if m < 0:
                raise ValueError("added mass must be non-negative")

    @classmethod
    def tuned(cls, length: float, f1: float, mass_per_length: float, **kwargs) -> "BeamModel":
        """Beam whose bare first frequency equals ``f1`` Hz."""
        ei = mass_per_length * (2.0 * length**2 * f1 / math.pi) ** 2
        return cls(length=length, flexural_rigidity=ei, mass_per_length=mass_per_length, **kwargs)

    def with_added_masses(self, masses: Sequence[tuple[float, float]]) -> "BeamModel":
        data = asdict(self)
        data["added_masses"] = list(self.added_masses) + [tuple(m) for m in masses]
        return BeamModel(**data)

    def damping_ratios(self) -> np.ndarray:
        z = np.broadcast_to(np.asarray(self.damping_ratio, dtype=float), (self.n_modes,))
        return z.copy()


@dataclass
class VehicleModel:
    mass: float = 20.0
    axle_spacing: float = 0.8
    speed: float = 0.17
    suspension_freq: float = 30.0
    suspension_damping: float = 0.3
    motor_freq: float = 15.0
    motor_amplitude: float = 0.2

    def __post_init__(self):
        if self.mass <= 0 or self.speed <= 0:
            raise ValueError("vehicle mass and speed must be positive")

    @property
    def wheel_mass(self) -> float:
        return self.mass / 4.0

    @property
    def axle_load(self) -> float:
        return self.mass / 2.0 * GRAVITY

    @property
    def suspension_stiffness(self) -> float:
        return self.wheel_mass * (2.0 * math.pi * self.suspension_freq) ** 2

    @property
    def suspension_damper(self) -> float:
        return 2.0 * self.suspension_damping * self.wheel_mass * 2.0 * math.pi * self.suspension_freq


@dataclass
class ScenarioConfig:
    scenario: str = "indirect"
    crossings: int = 1
    duration: float = 15.0
    sample_rate: float = 500.0
    seed: int = 0
    n_walkers: int = 2
    walker_band: tuple[float, float] = (1.5, 3.0)
    walker_rms: float = 50.0
    walker_speed: tuple[float, float] = (1.0, 1.5)
    noise_rms: float = 0.002
    roughness_rms: float = 1e-5
    roughness_band: tuple[float, float] = (0.5, 50.0)
    n_damaged: int = 10

    def __post_init__(self):
        if self.scenario not in ("direct", "indirect", "driving_test"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.crossings < 1:
            raise ValueError("crossings must be >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.walker_band = tuple(self.walker_band)
        self.walker_speed = tuple(self.walker_speed)
        self.roughness_band = tuple(self.roughness_band)


# ---------------------------------------------------------------------------
# modal model


def _sine_modes(beam: BeamModel, x) -> np.ndarray:
    """``sin(n pi x / L)`` for n = 1..n_modes, zero off the span; shape (n_modes, len(x))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = np.arange(1, beam.n_modes + 1)[:, np.newaxis]
    phi = np.sin(n * np.pi * x[np.newaxis, :] / beam.length)
    on = (x >= 0.0) & (x <= beam.length)
    return phi * on


def bare_frequencies(beam: BeamModel) -> np.ndarray:
    n = np.arange(1, beam.n_modes + 1)
    return n**2 * np.pi / (2.0 * beam.length**2) * math.sqrt(
        beam.flexural_rigidity / beam.mass_per_length
    )


def modal_basis(beam: BeamModel) -> tuple[np.ndarray, np.ndarray]:
    """Natural frequencies (Hz) and mass-normalised coefficient matrix.

    Column ``r`` of the coefficient matrix expresses mode ``r`` in the sine
    basis, scaled to unit modal mass.
    """
    f_bare = bare_frequencies(beam)
    m_gen = beam.mass_per_length * beam.length / 2.0
    if not beam.added_masses:
        return f_bare, np.eye(beam.n_modes) / math.sqrt(m_gen)
    mass = np.eye(beam.n_modes) * m_gen
    for x, m in beam.added_masses:
        phi = _sine_modes(beam, [x])[:, 0]
        mass += m * np.outer(phi, phi)
    stiff = np.diag(m_gen * (2.0 * np.pi * f_bare) ** 2)
    w2, vecs = eigh(stiff, mass)
    # deterministic sign: largest coefficient positive
    sign = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(beam.n_modes)])
    vecs = vecs * sign
    return np.sqrt(w2) / (2.0 * np.pi), vecs


def beam_modal_frequencies(beam: BeamModel) -> list[float]:
    """Natural frequencies in Hz, lowest first."""
    return [float(f) for f in modal_basis(beam)[0]]


def mode_shapes(beam: BeamModel, x) -> np.ndarray:
    """Unit-modal-mass mode shapes at positions ``x``; shape (n_modes, len(x))."""
    _, coeffs = modal_basis(beam)
    return coeffs.T @ _sine_modes(beam, x)


def _foh_matrices(omega: float, zeta: float, dt: float):
    a = np.array([[0.0, 1.0], [-omega**2, -2.0 * zeta * omega]])
    blk = np.zeros((4, 4))
    blk[:2, :2] = a * dt
    blk[1, 2] = dt
    blk[2, 3] = 1.0
    e = expm(blk)
    return e[:2, :2], e[:2, 2], e[:2, 3]


@numba.njit(cache=True)
def _foh_recurrence(phi, g1, g2, u):
    n = u.shape[0]
    x = np.zeros((n, 2))
    for k in range(n - 1):
        du = u[k + 1] - u[k]
        x[k + 1, 0] = phi[0, 0] * x[k, 0] + phi[0, 1] * x[k, 1] + g1[0] * u[k] + g2[0] * du
        x[k + 1, 1] = phi[1, 0] * x[k, 0] + phi[1, 1] * x[k, 1] + g1[1] * u[k] + g2[1] * du
    return x


def oscillator_response(omega: float, zeta: float, force: np.ndarray, dt: float):
    """Response of ``q'' + 2 zeta omega q' + omega^2 q = force`` from rest.

    The forcing is taken as piecewise linear between samples and each step is
    the exact discrete-time solution, so the scheme is stable for any ``dt``.

    Returns
    -------
    disp, vel, acc : ndarray
    """
    force = np.ascontiguousarray(force, dtype=float)
    phi, g1, g2 = _foh_matrices(omega, zeta, dt)
    x = _foh_recurrence(phi, g1, g2, force)
    disp, vel = x[:, 0], x[:, 1]
    acc = force - 2.0 * zeta * omega * vel - omega**2 * disp
    return disp, vel, acc


def modal_response(beam: BeamModel, modal_force: np.ndarray, dt: float):
    """Integrate every mode of ``beam`` under ``modal_force`` (n_modes, n_t).

    Raises :class:`UnstableTimestep` when the highest mode is not resolved by
    the sampling (frequency at or above Nyquist).
    """
    freqs, _ = modal_basis(beam)
    if freqs[-1] >= 0.5 / dt:
        raise UnstableTimestep(
            f"mode at {freqs[-1]:.2f} Hz is not resolved at sample rate {1.0 / dt:.1f} Hz"
        )
    zeta = beam.damping_ratios()
    out = np.zeros((3,) + modal_force.shape)
    for r in range(beam.n_modes):
        out[:, r] = oscillator_response(2.0 * np.pi * freqs[r], zeta[r], modal_force[r], dt)
    return out[0], out[1], out[2]


def modal_energy(beam: BeamModel, disp: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Total mechanical energy in unit-modal-mass coordinates, per time step."""
    omega = 2.0 * np.pi * modal_basis(beam)[0]
    return 0.5 * np.sum(vel**2 + (omega[:, np.newaxis] * disp) ** 2, axis=0)


# ---------------------------------------------------------------------------
# excitation


def band_limited_noise(rng, n, sample_rate, band, rms, order=2, warmup=None):
    """Butterworth band-pass filtered Gaussian noise scaled to an exact RMS."""
    if rms == 0 or n == 0:
        return np.zeros(n)
    lo, hi = band
    nyq = 0.5 * sample_rate
    hi = min(hi, 0.95 * nyq)
    sos = butter(order, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    if warmup is None:
        warmup = int(round(10.0 / lo * sample_rate / 10.0)) + int(sample_rate)
    raw = sosfilt(sos, rng.standard_normal(n + warmup))[warmup:]
    return raw * (rms / np.sqrt(np.mean(raw**2)))


def walker_paths(rng, n_walkers, t, length, speed_range):
    """Positions of pedestrians pacing the span back and forth, shape (n_walkers, n_t)."""
    paths = np.empty((n_walkers, t.size))
    for w in range(n_walkers):
        speed = rng.uniform(*speed_range)
        start = rng.uniform(0.0, 2.0 * length)
        s = np.mod(start + speed * t, 2.0 * length)
        paths[w] = np.where(s <= length, s, 2.0 * length - s)
    return paths


def pedestrian_modal_force(beam, cfg: ScenarioConfig, rng, t):
    """Generalised force of the walkers on every mode, shape (n_modes, n_t)."""
    coeffs = modal_basis(beam)[1]
    total = np.zeros((beam.n_modes, t.size))
    if cfg.n_walkers == 0 or cfg.walker_rms == 0:
        return total
    paths = walker_paths(rng, cfg.n_walkers, t, beam.length, cfg.walker_speed)
    for w in range(cfg.n_walkers):
        force = band_limited_noise(rng, t.size, cfg.sample_rate, cfg.walker_band, cfg.walker_rms)
        total += coeffs.T @ _sine_modes(beam, paths[w]) * force
    return total


def roughness_profile(rng, n, sample_rate, band, rms):
    """Band-limited white displacement profile sampled along the wheel path (m)."""
    if rms == 0:
        return np.zeros(n)
    return band_limited_noise(rng, n, sample_rate, band, rms, order=4)


def _check_rate(cfg: ScenarioConfig, highest: float):
    if cfg.sample_rate <= 2.0 * highest:
        raise UnstableTimestep(
            f"sample rate {cfg.sample_rate} Hz does not exceed twice the highest modelled "
            f"frequency {highest:.2f} Hz"
        )


def _add_noise(rng, data, rms):
    if rms > 0:
        data = data + rms * rng.standard_normal(data.shape)
    return data


# ---------------------------------------------------------------------------
# scenarios


def simulate_direct(beam: BeamModel, cfg: ScenarioConfig, seed=None) -> list[MultiChannelRecord]:
    """Pedestrian-excited beam observed at quarter, mid and three-quarter span.

    One record of ``cfg.duration`` seconds per ``cfg.crossings``. Records are
    independent and seeded from a split of the master seed.
    """
    freqs = beam_modal_frequencies(beam)
    _check_rate(cfg, freqs[-1])
    seeds = derive_seeds(cfg.seed if seed is None else seed, cfg.crossings)
    dt = 1.0 / cfg.sample_rate
    n = int(round(cfg.duration * cfg.sample_rate))
    t = np.arange(n) * dt
    sensors = np.array([0.25, 0.5, 0.75]) * beam.length
    shapes = mode_shapes(beam, sensors)
    records = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        force = pedestrian_modal_force(beam, cfg, rng, t)
        _, _, acc = modal_response(beam, force, dt)
        data = _add_noise(rng, shapes.T @ acc, cfg.noise_rms)
        records.append(MultiChannelRecord(data, cfg.sample_rate, label=f"direct_{i:03d}"))
    return records


def _wheel_response(vehicle: VehicleModel, z: np.ndarray, dt: float) -> np.ndarray:
    """Sprung-mass acceleration for base displacement ``z`` through spring and damper."""
    m = vehicle.wheel_mass
    k = vehicle.suspension_stiffness
    c = vehicle.suspension_damper
    zdot = np.gradient(z, dt)
    omega = math.sqrt(k / m)
    zeta = c / (2.0 * math.sqrt(k * m))
    # relative coordinate: w = x - z, w'' + 2 zeta omega w' + omega^2 w = -z''
    # absolute acceleration x'' = -(c w' + k w) / m; drive it with the base force
    # (c z' + k z) / m acting on x directly instead, which avoids differentiating twice
    _, _, acc = oscillator_response(omega, zeta, (c * zdot + k * z) / m, dt)
    return acc


def simulate_crossing(
    beam: BeamModel,
    vehicle: VehicleModel,
    cfg: ScenarioConfig,
    seed: int | None = None,
    label: str = "crossing",
) -> MultiChannelRecord:
    """One drive-by crossing; four sprung-mass acceleration channels.

    Channels are ordered front-right, front-left, rear-right, rear-left. The
    record spans ``L / speed`` seconds from the front axle entering the span.
    ``cfg.scenario == "driving_test"`` replaces the bridge with rigid ground
    and uses ``cfg.duration``.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = 1.0 / cfg.sample_rate
    on_bridge = cfg.scenario != "driving_test"
    duration = beam.length / vehicle.speed if on_bridge else cfg.duration
    if duration < 2.0:
        raise VehicleFasterThanBeam(
            f"crossing lasts {duration:.2f} s at {vehicle.speed} m/s; at least 2 s required"
        )
    highest = max(beam_modal_frequencies(beam)[-1] if on_bridge else 0.0, vehicle.suspension_freq,
                  vehicle.motor_freq)
    _check_rate(cfg, highest)
    n = int(round(duration * cfg.sample_rate))
    t = np.arange(n) * dt
    x_front = vehicle.speed * t
    x_rear = x_front - vehicle.axle_spacing

    # roughness: one profile per wheel track, indexed by travelled distance
    lag = int(round(vehicle.axle_spacing / vehicle.speed * cfg.sample_rate))
    tracks = [
        roughness_profile(rng, n + lag, cfg.sample_rate, cfg.roughness_band, cfg.roughness_rms)
        for _ in range(2)
    ]

    if on_bridge:
        coeffs = modal_basis(beam)[1]
        force = -vehicle.axle_load * (
            coeffs.T @ (_sine_modes(beam, x_front) + _sine_modes(beam, x_rear))
        )
        force = force + pedestrian_modal_force(beam, cfg, rng, t)
        disp, _, _ = modal_response(beam, force, dt)
        defl_front = np.sum(mode_shapes(beam, x_front) * disp, axis=0)
        defl_rear = np.sum(mode_shapes(beam, x_rear) * disp, axis=0)
    else:
        defl_front = defl_rear = np.zeros(n)

    channels = []
    for axle, defl, offset in (("front", defl_front, lag), ("rear", defl_rear, 0)):
        for side in (0, 1):
            z = defl + tracks[side][offset : offset + n]
            channels.append(_wheel_response(vehicle, z, dt))
    data = np.vstack(channels)
    if vehicle.motor_amplitude:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        data = data + vehicle.motor_amplitude * np.sin(2.0 * np.pi * vehicle.motor_freq * t + phase)
    data = _add_noise(rng, data, cfg.noise_rms)
    return MultiChannelRecord(data, cfg.sample_rate, label=label)


def derive_seeds(master: int, count: int) -> list[int]:
    """Independent per-item seeds split deterministically from ``master``."""
    children = np.random.SeedSequence(master).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


@dataclass
class DatasetBundle:
    records: list[MultiChannelRecord]
    labels: list[str]
    seeds: list[int]
    manifest: dict

    def select(self, label: str) -> list[MultiChannelRecord]:
        return [r for r, lab in zip(self.records, self.labels) if lab == label]


def generate_dataset(
    beam: BeamModel,
    vehicle: VehicleModel,
    cfg: ScenarioConfig,
    damaged_variant: BeamModel | None = None,
) -> DatasetBundle:
    """Nominal crossings plus, optionally, ``cfg.n_damaged`` on a modified beam."""
    n_damaged = cfg.n_damaged if damaged_variant is not None else 0
    seeds = derive_seeds(cfg.seed, cfg.crossings + n_damaged)
    records, labels = [], []
    for i in range(cfg.crossings + n_damaged):
        damaged = i >= cfg.crossings
        b = damaged_variant if damaged else beam
        lab = "damaged" if damaged else "nominal"
        idx = i - cfg.crossings if damaged else i
        if cfg.scenario == "direct":
            one = ScenarioConfig(**{**asdict(cfg), "crossings": 1})
            rec = simulate_direct(b, one, seed=seeds[i])[0]
            rec.label = f"{lab}_{idx:03d}"
        else:
            rec = simulate_crossing(b, vehicle, cfg, seed=seeds[i], label=f"{lab}_{idx:03d}")
        records.append(rec)
        labels.append(lab)
    manifest = {
        "scenario": cfg.scenario,
        "config": asdict(cfg),
        "beam": asdict(beam),
        "vehicle": asdict(vehicle),
        "damaged_beam": asdict(damaged_variant) if damaged_variant is not None else None,
        "frequencies_hz": {
            "nominal": beam_modal_frequencies(beam),
            "damaged": beam_modal_frequencies(damaged_variant) if damaged_variant else None,
        },
        "records": [
            {"label": r.label, "condition": lab, "seed": s}
            for r, lab, s in zip(records, labels, seeds)
        ],
    }
    return DatasetBundle(records=records, labels=labels, seeds=seeds, manifest=manifest)
