"""Turn first-singular-value spectra into detector inputs.

Order of operations is crop -> average random sets -> min-max normalise, so
every finished sample spans exactly [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BandOutsideGrid,
    DegenerateRange,
    GridMismatch,
    HeterogeneousSamples,
    SetSizeTooLarge,
)
from .spectral import SingularSpectrum

SAMPLE_LINES = 900
DEFAULT_BAND = (1.0, 10.0)


@dataclass
class SpectralSample:
    values: np.ndarray
    freqs: np.ndarray
    source_ids: list[str] = field(default_factory=list)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.freqs = np.asarray(self.freqs, dtype=float)

    def __len__(self):
        return self.values.size


@dataclass
class ObservationSequence:
    samples: list[SpectralSample]
    flat: np.ndarray
    boundaries: np.ndarray
    truth_change_index: int | None = None

    @property
    def sample_len(self) -> int:
        return self.samples[0].values.size

    @property
    def truth_change_flat(self) -> int | None:
        """Flat position where the changed regime starts, if known."""
        if self.truth_change_index is None:
            return None
        return self.truth_change_index * self.sample_len

    def __len__(self):
        return self.flat.size

    def split(self) -> list[np.ndarray]:
        return np.split(self.flat, self.boundaries[1:])


def band_crop(spec: SingularSpectrum, lo: float = 1.0, hi: float = 10.0) -> SingularSpectrum:
    """Keep the bins with ``lo <= f < hi`` (index selection, no filtering)."""
    if not lo < hi:
        raise BandOutsideGrid(f"empty band ({lo}, {hi})")
    eps = 1e-6 * spec.df
    if lo < spec.freqs[0] - eps or hi > spec.freqs[-1] + spec.df + eps:
        raise BandOutsideGrid(
            f"band ({lo}, {hi}) Hz outside grid {spec.freqs[0]}..{spec.freqs[-1]} Hz"
        )
    keep = (spec.freqs >= lo - eps) & (spec.freqs < hi - eps)
    return SingularSpectrum(
        freqs=spec.freqs[keep].copy(), values=spec.values[keep].copy(), df=spec.df, label=spec.label
    )


def _stack(specs: Sequence[SingularSpectrum]) -> np.ndarray:
    ref = specs[0].freqs
    for s in specs[1:]:
        if s.freqs.shape != ref.shape or not np.allclose(s.freqs, ref, rtol=0, atol=1e-9):
            raise GridMismatch(f"spectrum {s.label!r} is on a different grid")
    return np.vstack([s.values for s in specs])


def average_random_sets(
    specs: Sequence[SingularSpectrum],
    set_size: int,
    n_out: int,
    seed: int | np.random.Generator | None = None,
) -> list[SingularSpectrum]:
    """Pointwise means of randomly drawn crossing sets.

    Each set draws ``set_size`` distinct spectra; sets are drawn independently
    of one another, so a crossing may appear in several sets. The label of
    each output lists its sources joined by ``+``.
    """
    if not specs:
        raise ValueError("no spectra to average")
    if set_size < 1 or set_size > len(specs):
        raise SetSizeTooLarge(f"set_size {set_size} with only {len(specs)} spectra")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stack = _stack(specs)
    out = []
    for _ in range(n_out):
        pick = np.sort(rng.choice(len(specs), size=set_size, replace=False))
        chosen = stack[pick]
        # clip guards the pointwise-bounds property against last-ulp rounding
        mean = np.clip(chosen.mean(axis=0), chosen.min(axis=0), chosen.max(axis=0))
        out.append(
            SingularSpectrum(
                freqs=specs[0].freqs.copy(),
                values=mean,
                df=specs[0].df,
                label="+".join(specs[i].label for i in pick),
            )
        )
    return out


def minmax_normalize(spec) -> SpectralSample:
    """Scale to [0, 1]; the minimum maps to exactly 0 and the maximum to exactly 1."""
    if isinstance(spec, SingularSpectrum):
        values, freqs, ids = spec.values, spec.freqs, [spec.label] if spec.label else []
    else:
        values = np.asarray(spec, dtype=float)
        freqs, ids = np.arange(values.size, dtype=float), []
    lo, hi = np.min(values), np.max(values)
    if not hi > lo:
        raise DegenerateRange("constant spectrum cannot be normalised")
    scaled = (values - lo) / (hi - lo)
    return SpectralSample(values=scaled, freqs=np.array(freqs, dtype=float), source_ids=ids, normalized=True)


def make_samples(
    spectra: Sequence[SingularSpectrum],
    set_size: int,
    n_out: int,
    seed: int | np.random.Generator | None = None,
    band: tuple[float, float] = DEFAULT_BAND,
) -> list[SpectralSample]:
    """crop -> average_random_sets -> minmax_normalize."""
    cropped = [band_crop(s, *band) for s in spectra]
    averaged = average_random_sets(cropped, set_size, n_out, seed)
    samples = []
    for a in averaged:
        s = minmax_normalize(a)
        s.source_ids = a.label.split("+")
        samples.append(s)
    return samples


def assemble_sequence(
    samples: Sequence[SpectralSample], truth_change_index: int | None = None
) -> ObservationSequence:
    """Concatenate normalised samples into one observation sequence.

    ``truth_change_index`` counts samples: the first changed sample's
    position in ``samples``.
    """
    if not samples:
        raise HeterogeneousSamples("empty sample list")
    n_lines = samples[0].values.size
    for s in samples:
        if not s.normalized:
            raise HeterogeneousSamples("all samples must be min-max normalised")
        if s.values.size != n_lines:
            raise HeterogeneousSamples(
                f"sample lengths differ ({s.values.size} vs {n_lines})"
            )
    if truth_change_index is not None and not 0 <= truth_change_index <= len(samples):
        raise ValueError("truth_change_index outside the sample range")
    flat = np.concatenate([s.values for s in samples])
    boundaries = np.arange(len(samples)) * n_lines
    return ObservationSequence(
        samples=list(samples), flat=flat, boundaries=boundaries, truth_change_index=truth_change_index
    )
