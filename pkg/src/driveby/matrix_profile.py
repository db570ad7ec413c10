"""Matrix profile, arc curves and change-point detection.

Distances are z-normalised Euclidean distances between length-``l``
subsequences. Single distance profiles use FFT sliding dot products (MASS)
of the mean-centred query; the full self-join walks every diagonal of the
distance matrix, updating the centred cross-product in O(1) per step from
first differences of the sequence. Neither path subtracts a product of
window means, so large offsets do not cost precision. A subsequence with zero variance z-normalises to the zero
vector, so two constant subsequences are at distance 0 and a constant against
a non-constant one is at ``sqrt(l)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidLength, LengthMismatch, SequenceTooShort
from .preprocess import ObservationSequence

DETECTION_THRESHOLD = 0.6
# about 1 Hz of spectrum at 0.01 Hz lines: wide enough to hold a modal peak
DEFAULT_SUBSEQ_LEN = 100


@dataclass
class MpResult:
    profile: np.ndarray
    index: np.ndarray
    subseq_len: int
    exclusion_radius: int


@dataclass
class CacResult:
    ac: np.ndarray
    iac: np.ndarray
    cac: np.ndarray
    edge_ignore: int
    change_index: int | None = None
    min_interior: float = 1.0
    argmin_interior: int | None = None


def default_exclusion_radius(l: int) -> int:
    return int(math.ceil(l / 4))


def znorm(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if np.ptp(a) == 0:
        return np.zeros_like(a)
    return (a - a.mean()) / a.std()


def znorm_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"subsequence shapes differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise InvalidLength("subsequences need at least two points")
    return float(np.sqrt(np.sum((znorm(a) - znorm(b)) ** 2)))


def sliding_stats(t: np.ndarray, l: int):
    """Mean, population std and exact-constancy flag of every window."""
    win = sliding_window_view(t, l)
    mu = win.mean(axis=1)
    sig = np.sqrt(np.mean((win - mu[:, np.newaxis]) ** 2, axis=1))
    const = win.max(axis=1) == win.min(axis=1)
    return mu, sig, const


def sliding_dot_product(query: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Dot products of ``query`` with every window of ``t`` via FFT convolution."""
    n, l = t.size, query.size
    nfft = 1 << (n + l - 1).bit_length()
    prod = np.fft.irfft(np.fft.rfft(t, nfft) * np.fft.rfft(query[::-1], nfft), nfft)
    return prod[l - 1 : n]


def _check_length(p: int, l: int):
    if l < 2 or l > p:
        raise InvalidLength(f"subsequence length {l} invalid for sequence of {p} points")


def _as_flat(seq) -> np.ndarray:
    if isinstance(seq, ObservationSequence):
        return np.ascontiguousarray(seq.flat, dtype=float)
    return np.ascontiguousarray(seq, dtype=float)


# below this squared distance (relative to 2l) the correlation form loses
# digits to cancellation and the distance is recomputed from the windows
_REFINE_REL = 1e-6


@numba.njit(cache=True, nogil=True)
def _direct_distance(t, i, j, l, mu_i, sig_i, mu_j, sig_j):
    acc = 0.0
    for r in range(l):
        diff = (t[i + r] - mu_i) / sig_i - (t[j + r] - mu_j) / sig_j
        acc += diff * diff
    return math.sqrt(acc)


@numba.njit(cache=True, nogil=True)
def _finish(t, l, i, j, rho, mu, sig, const):
    """Distance from a correlation, exact-recomputed near zero."""
    if const[i] and const[j]:
        return 0.0
    if const[i] or const[j]:
        return math.sqrt(l)
    d2 = 2.0 * l * (1.0 - rho)
    if d2 < 2.0 * l * _REFINE_REL:
        return _direct_distance(t, i, j, l, mu[i], sig[i], mu[j], sig[j])
    return math.sqrt(d2)


@numba.njit(cache=True)
def _profile_from_cov(t, l, q, cov, mu, sig, const):
    n_sub = cov.size
    out = np.empty(n_sub)
    for j in range(n_sub):
        if const[q] or const[j]:
            rho = 0.0
        else:
            rho = cov[j] / (l * sig[q] * sig[j])
        out[j] = _finish(t, l, q, j, rho, mu, sig, const)
    return out


def distance_profile(query_idx: int, seq, l: int) -> np.ndarray:
    """Distances from subsequence ``query_idx`` to every subsequence (MASS)."""
    t = _as_flat(seq)
    _check_length(t.size, l)
    n_sub = t.size - l + 1
    if not 0 <= query_idx < n_sub:
        raise IndexError(f"query index {query_idx} outside [0, {n_sub})")
    mu, sig, const = sliding_stats(t, l)
    # a zero-mean query makes the window means drop out of the dot product
    q = t[query_idx : query_idx + l] - mu[query_idx]
    cov = sliding_dot_product(q, t - t.mean())
    return _profile_from_cov(t, l, query_idx, cov, mu, sig, const)


@numba.njit(cache=True, nogil=True)
def _diagonal_join(t, l, mu, sig, const, excl):
    n_sub = t.size - l + 1
    has_const = False
    inv_norm = np.empty(n_sub)
    for i in range(n_sub):
        if const[i]:
            has_const = True
            inv_norm[i] = 0.0
        else:
            inv_norm[i] = 1.0 / (math.sqrt(l) * sig[i])
    # centred cross-product recurrence:
    # cov(i, j) = cov(i-1, j-1) + df[i] dg[j] + df[j] dg[i]
    df = np.zeros(n_sub)
    dg = np.zeros(n_sub)
    for i in range(1, n_sub):
        df[i] = 0.5 * (t[i + l - 1] - t[i - 1])
        dg[i] = (t[i + l - 1] - mu[i]) + (t[i - 1] - mu[i - 1])
    # track the best (largest) correlation; same ordering as smallest distance
    best = np.full(n_sub, -np.inf)
    idx = np.full(n_sub, n_sub, dtype=np.int64)
    for k in range(excl + 1, n_sub):
        cov = 0.0
        for r in range(l):
            cov += (t[r] - mu[0]) * (t[k + r] - mu[k])
        for i in range(n_sub - k):
            j = i + k
            if i > 0:
                cov += df[i] * dg[j] + df[j] * dg[i]
            if has_const and (const[i] or const[j]):
                r = 1.0 if (const[i] and const[j]) else 0.5
            else:
                r = cov * inv_norm[i] * inv_norm[j]
            if r > best[i] or (r == best[i] and j < idx[i]):
                best[i] = r
                idx[i] = j
            if r > best[j] or (r == best[j] and i < idx[j]):
                best[j] = r
                idx[j] = i
    prof = np.empty(n_sub)
    for i in range(n_sub):
        prof[i] = _finish(t, l, i, idx[i], best[i], mu, sig, const)
    return prof, idx


def matrix_profile(seq, l: int = DEFAULT_SUBSEQ_LEN, exclusion_radius: int | None = None) -> MpResult:
    """Self-join matrix profile and index.

    ``P[i]`` is the smallest distance from subsequence ``i`` to any ``j`` with
    ``|i - j| > exclusion_radius``; ``I[i]`` is that ``j``, ties going to the
    smallest ``j``.
    """
    t = _as_flat(seq)
    p = t.size
    if l < 2:
        raise InvalidLength(f"subsequence length {l} below 2")
    if p < 2 * l:
        raise SequenceTooShort(f"sequence of {p} points is shorter than 2 x {l}")
    if exclusion_radius is None:
        exclusion_radius = default_exclusion_radius(l)
    if exclusion_radius < 1:
        raise ValueError("exclusion_radius must be >= 1")
    n_sub = p - l + 1
    if exclusion_radius >= n_sub - 1:
        raise SequenceTooShort("no admissible neighbours outside the exclusion zone")
    mu, sig, const = sliding_stats(t, l)
    prof, idx = _diagonal_join(t, l, mu, sig, const, exclusion_radius)
    return MpResult(profile=prof, index=idx, subseq_len=l, exclusion_radius=exclusion_radius)


def idealized_arc_curve(n: int) -> np.ndarray:
    k = np.arange(n, dtype=float)
    return 2.0 * k * (n - k) / n


def arc_curve(index: np.ndarray) -> np.ndarray:
    """Number of nearest-neighbour arcs ``(i, I[i])`` spanning each location."""
    index = np.asarray(index, dtype=np.int64)
    n = index.size
    i = np.arange(n)
    lo = np.minimum(i, index)
    hi = np.maximum(i, index)
    marks = np.zeros(n + 1, dtype=np.int64)
    np.add.at(marks, lo, 1)
    np.add.at(marks, hi, -1)
    return np.cumsum(marks[:n])


def corrected_arc_curve(
    mp: MpResult, edge_ignore: int | None = None, threshold: float = DETECTION_THRESHOLD
) -> CacResult:
    """Arc curve normalised by the idealised parabola and clipped at 1.

    ``edge_ignore`` points at either end (default: the subsequence length)
    are left out of the minimum search. ``change_index`` is set when the
    interior minimum falls below ``threshold``.
    """
    n = mp.index.size
    if edge_ignore is None:
        edge_ignore = mp.subseq_len
    ac = arc_curve(mp.index).astype(float)
    iac = idealized_arc_curve(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        cac = np.where(iac > 0, ac / iac, 1.0)
    cac = np.clip(cac, 0.0, 1.0)
    res = CacResult(ac=ac, iac=iac, cac=cac, edge_ignore=edge_ignore)
    lo, hi = edge_ignore, n - edge_ignore
    if hi > lo:
        k = lo + int(np.argmin(cac[lo:hi]))
        res.argmin_interior = k
        res.min_interior = float(cac[k])
        if res.min_interior < threshold:
            res.change_index = k
    return res


def detect_change(
    seq,
    l: int = DEFAULT_SUBSEQ_LEN,
    exclusion_radius: int | None = None,
    edge_ignore: int | None = None,
    threshold: float = DETECTION_THRESHOLD,
) -> tuple[MpResult, CacResult]:
    """matrix_profile -> corrected_arc_curve on an observation sequence.

    For an :class:`ObservationSequence` the edge zone defaults to at least one
    sample length.
    """
    if edge_ignore is None and isinstance(seq, ObservationSequence):
        edge_ignore = max(l, seq.sample_len)
    mp = matrix_profile(seq, l, exclusion_radius)
    return mp, corrected_arc_curve(mp, edge_ignore=edge_ignore, threshold=threshold)
