"""Cross-power spectral density estimation and frequency domain decomposition.

The CPSD matrix of an ``m``-channel record is estimated per frequency bin with
Welch averaging over Hann-windowed, mean-removed segments. Zero padding puts
the estimate on a grid of spacing ``target_df`` regardless of segment length.
The first singular value of every bin matrix forms the spectrum used for peak
picking and by both damage detectors downstream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks, get_window, peak_prominences

from .errors import (
    GridMismatch,
    InvalidOverlap,
    NoPeakInBand,
    NonHermitianInput,
    RecordTooShort,
)

DEFAULT_TARGET_DF = 0.01
DEFAULT_SEGMENT_S = 10.0
MOTOR_BAND = (13.0, 17.0)
HERMITIAN_RTOL = 1e-9


@dataclass
class MultiChannelRecord:
    """Acceleration time series from ``m`` sensors, shape ``(m, n_t)``."""

    data: np.ndarray
    sample_rate: float
    label: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ValueError("record data must be a 2-D (channels, samples) array")
        if data.shape[0] < 1 or data.shape[1] < 2:
            raise RecordTooShort(f"record {self.label!r} has shape {data.shape}")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        self.data = data
        self.sample_rate = float(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_channel(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.samples_per_channel / self.sample_rate

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.samples_per_channel) / self.sample_rate


@dataclass
class CpsdStack:
    """Per-bin CPSD matrices, ``matrices[k]`` is ``m x m`` at ``freqs[k]``."""

    freqs: np.ndarray
    matrices: np.ndarray
    df: float
    n_segments: int = 1
    label: str = ""

    @property
    def n_bins(self) -> int:
        return len(self.freqs)


@dataclass
class SingularSpectrum:
    freqs: np.ndarray
    values: np.ndarray
    df: float
    label: str = ""

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.freqs.shape != self.values.shape:
            raise ValueError("freqs and values must have equal length")


@dataclass
class PeakReport:
    peak_freq: float
    peak_value: float
    search_band: tuple[float, float]
    secondary_peaks: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "peak_freq": self.peak_freq,
            "peak_value": self.peak_value,
            "search_band": list(self.search_band),
            "secondary_peaks": [list(p) for p in self.secondary_peaks],
        }


def default_segment_length(record: MultiChannelRecord) -> int:
    """10 s segments, or the whole record when it is shorter."""
    return min(record.samples_per_channel, int(round(DEFAULT_SEGMENT_S * record.sample_rate)))


def _fft_layout(sample_rate: float, seg_len: int, target_df: float) -> tuple[int, int]:
    # nfft is a multiple of fs/df so that every `step`-th bin lands on the grid
    base = sample_rate / target_df
    n0 = int(round(base))
    if n0 < 2 or abs(base - n0) > 1e-6 * base:
        raise ValueError(
            f"sample_rate / target_df = {base} must be an integer number of lines"
        )
    step = max(1, math.ceil(seg_len / n0))
    return n0 * step, step


def compute_cpsd(
    record: MultiChannelRecord,
    seg_len: int | None = None,
    overlap: float = 0.5,
    target_df: float = DEFAULT_TARGET_DF,
) -> CpsdStack:
    """Welch estimate of the one-sided CPSD matrix.

    Parameters
    ----------
    record : MultiChannelRecord
        Input signals.
    seg_len : int, optional
        Segment length in samples. Defaults to :func:`default_segment_length`.
    overlap : float
        Fractional overlap between consecutive segments, ``0 <= overlap < 1``.
    target_df : float
        Spacing of the output frequency grid in Hz. Segments are zero padded
        (and the padded spectrum subsampled when a segment is longer than
        ``fs / target_df``) so the grid is exactly ``k * target_df``.

    Returns
    -------
    CpsdStack
        Density-scaled matrices (units^2/Hz) from DC to Nyquist.
    """
    if not 0.0 <= overlap < 1.0:
        raise InvalidOverlap(f"overlap must be in [0, 1), got {overlap}")
    n_t = record.samples_per_channel
    if seg_len is None:
        seg_len = default_segment_length(record)
    seg_len = int(seg_len)
    if seg_len < 2:
        raise RecordTooShort(f"segment length {seg_len} is below 2 samples")
    if seg_len > n_t:
        raise RecordTooShort(
            f"record {record.label!r} has {n_t} samples, fewer than one segment ({seg_len})"
        )
    fs = record.sample_rate
    nfft, step = _fft_layout(fs, seg_len, target_df)
    hop = seg_len - int(round(overlap * seg_len))
    hop = max(hop, 1)
    starts = range(0, n_t - seg_len + 1, hop)

    window = get_window("hann", seg_len)
    m = record.channels
    n_bins = nfft // (2 * step) + 1
    acc = np.zeros((m, m, n_bins), dtype=complex)
    iu, ju = np.triu_indices(m)
    n_seg = 0
    for s in starts:
        seg = record.data[:, s : s + seg_len]
        seg = (seg - seg.mean(axis=1, keepdims=True)) * window
        spec = np.fft.rfft(seg, n=nfft, axis=1)[:, ::step][:, :n_bins]
        acc[iu, ju] += spec[iu] * np.conj(spec[ju])
        n_seg += 1

    scale = 1.0 / (fs * np.sum(window**2) * n_seg)
    acc *= scale
    freqs = np.arange(n_bins) * target_df
    one_sided = np.full(n_bins, 2.0)
    one_sided[0] = 1.0
    if np.isclose(freqs[-1], fs / 2.0):
        one_sided[-1] = 1.0
    acc *= one_sided
    # lower triangle by conjugation: Hermitian by construction; auto-spectra are real
    acc[ju, iu] = np.conj(acc[iu, ju])
    d = np.arange(m)
    acc[d, d] = acc[d, d].real
    return CpsdStack(
        freqs=freqs,
        matrices=np.ascontiguousarray(np.moveaxis(acc, -1, 0)),
        df=target_df,
        n_segments=n_seg,
        label=record.label,
    )


def pool_cpsd(stacks: Sequence[CpsdStack]) -> CpsdStack:
    """Average CPSD stacks sharing one grid (pooled FDD over several records)."""
    if not stacks:
        raise ValueError("nothing to pool")
    ref = stacks[0]
    for st in stacks[1:]:
        if st.freqs.shape != ref.freqs.shape or not np.allclose(st.freqs, ref.freqs):
            raise GridMismatch("CPSD stacks are on different frequency grids")
        if st.matrices.shape != ref.matrices.shape:
            raise GridMismatch("CPSD stacks have different channel counts")
    total = np.zeros_like(ref.matrices)
    for st in stacks:
        total += st.matrices
    return CpsdStack(
        freqs=ref.freqs.copy(),
        matrices=total / len(stacks),
        df=ref.df,
        n_segments=sum(st.n_segments for st in stacks),
        label="pooled",
    )


def check_hermitian(matrices: np.ndarray, rtol: float = HERMITIAN_RTOL) -> float:
    """Largest ``|S_ij - conj(S_ji)|`` relative to ``max|S|``; raise if above ``rtol``."""
    mats = np.asarray(matrices)
    scale = np.max(np.abs(mats)) if mats.size else 0.0
    if scale == 0.0:
        return 0.0
    dev = np.max(np.abs(mats - np.conj(np.swapaxes(mats, -1, -2)))) / scale
    if dev > rtol:
        raise NonHermitianInput(f"Hermitian symmetry violated by {dev:.3e} (relative)")
    return float(dev)


def svd_sweep(cpsd: CpsdStack, return_factors: bool = False):
    """First singular value of every CPSD bin.

    The bin matrices are Hermitian PSD, so the decomposition is taken as a
    Hermitian eigendecomposition and the singular values are the eigenvalue
    magnitudes.

    With ``return_factors=True`` also returns ``(U, sigma)`` with sigma in
    descending order per bin, such that ``U @ diag(sigma) @ U^H`` rebuilds each
    PSD bin matrix.
    """
    check_hermitian(cpsd.matrices)
    # enforce exact symmetry for the eigensolver
    mats = 0.5 * (cpsd.matrices + np.conj(np.swapaxes(cpsd.matrices, -1, -2)))
    if return_factors:
        w, v = np.linalg.eigh(mats)
        order = np.argsort(-np.abs(w), axis=-1, kind="stable")
        sigma = np.take_along_axis(np.abs(w), order, axis=-1)
        u = np.take_along_axis(v, order[:, np.newaxis, :], axis=-1)
        values = sigma[:, 0]
    else:
        w = np.linalg.eigvalsh(mats)
        values = np.max(np.abs(w), axis=-1)
    spec = SingularSpectrum(freqs=cpsd.freqs.copy(), values=values, df=cpsd.df, label=cpsd.label)
    if return_factors:
        return spec, u, sigma
    return spec


def pick_peak(
    spec: SingularSpectrum,
    band: tuple[float, float],
    min_prominence: float = 0.1,
) -> PeakReport:
    """Locate the dominant spectral peak inside ``band``.

    A candidate is an interior local maximum of the band-limited spectrum
    whose topographic prominence is at least ``min_prominence`` times the
    band maximum. The highest candidate wins, ties going to the lower
    frequency. Remaining candidates are reported as secondary peaks sorted by
    height.
    """
    lo, hi = float(band[0]), float(band[1])
    if not lo < hi:
        raise ValueError("band must satisfy lo < hi")
    if not 0.0 <= min_prominence < 1.0:
        raise ValueError("min_prominence must lie in [0, 1)")
    eps = 1e-9 * spec.df
    if lo < spec.freqs[0] - eps or hi > spec.freqs[-1] + eps:
        raise ValueError(f"band {band} exceeds the grid {spec.freqs[0]}..{spec.freqs[-1]} Hz")
    mask = (spec.freqs >= lo - eps) & (spec.freqs <= hi + eps)
    f = spec.freqs[mask]
    v = spec.values[mask]
    if v.size < 3:
        raise NoPeakInBand(f"band {band} holds fewer than three bins")
    peaks, _ = find_peaks(v)
    if peaks.size == 0:
        raise NoPeakInBand(f"no local maximum in {band} Hz")
    prom = peak_prominences(v, peaks)[0]
    floor = min_prominence * np.max(v)
    keep = prom >= floor
    if min_prominence > 0:
        keep &= prom > 0
    peaks = peaks[keep]
    if peaks.size == 0:
        raise NoPeakInBand(f"no peak in {band} Hz above the prominence floor")
    # stable sort on -height keeps ascending-frequency order among ties
    order = np.argsort(-v[peaks], kind="stable")
    peaks = peaks[order]
    best = peaks[0]
    return PeakReport(
        peak_freq=float(f[best]),
        peak_value=float(v[best]),
        search_band=(lo, hi),
        secondary_peaks=[(float(f[p]), float(v[p])) for p in peaks[1:]],
    )


def fdd(records: Sequence[MultiChannelRecord], **cpsd_kwargs) -> SingularSpectrum:
    """Pooled frequency domain decomposition over a set of records."""
    stacks = [compute_cpsd(r, **cpsd_kwargs) for r in records]
    return svd_sweep(pool_cpsd(stacks))


def identify_motor_frequency(
    records: Sequence[MultiChannelRecord],
    band: tuple[float, float] = MOTOR_BAND,
    min_prominence: float = 0.8,
    segment_s: float = 10.0,
    target_df: float = DEFAULT_TARGET_DF,
) -> PeakReport:
    """Dominant motor harmonic from driving-test records.

    Driving tests are short, so each record is split into ``segment_s``
    segments for a smoother Welch estimate; the zero-padded grid keeps the
    usual ``target_df`` spacing. The prominence floor is set high enough that
    broadband noise alone yields :class:`NoPeakInBand`.
    """
    if not records:
        raise ValueError("at least one driving-test record is required")
    stacks = []
    for rec in records:
        seg = min(rec.samples_per_channel, int(round(segment_s * rec.sample_rate)))
        stacks.append(compute_cpsd(rec, seg_len=seg, overlap=0.5, target_df=target_df))
    spec = svd_sweep(pool_cpsd(stacks))
    return pick_peak(spec, band, min_prominence=min_prominence)
