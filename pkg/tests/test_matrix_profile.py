import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driveby.errors import InvalidLength, LengthMismatch, SequenceTooShort
from driveby.matrix_profile import (
    MpResult,
    arc_curve,
    corrected_arc_curve,
    default_exclusion_radius,
    detect_change,
    distance_profile,
    idealized_arc_curve,
    matrix_profile,
    znorm,
    znorm_distance,
)
from driveby.preprocess import assemble_sequence, minmax_normalize


def naive_profile(t, l, excl):
    """Direct definition: z-normalise every window, compare all pairs."""
    n = t.size - l + 1
    z = np.array([znorm(t[i : i + l]) for i in range(n)])
    prof = np.empty(n)
    idx = np.empty(n, dtype=int)
    for i in range(n):
        d = np.sqrt(np.sum((z - z[i]) ** 2, axis=1))
        d[max(0, i - excl) : i + excl + 1] = np.inf
        idx[i] = int(np.argmin(d))  # first minimum = smallest j
        prof[i] = d[idx[i]]
    return prof, idx


def test_znorm_distance_examples():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert znorm_distance(a, 10 * a + 3) == pytest.approx(0.0, abs=1e-12)
    # anti-correlated pair sits at the maximum distance 2 sqrt(l)
    assert znorm_distance(a, -a) == pytest.approx(2 * np.sqrt(4))
    assert znorm_distance(np.ones(4), np.ones(4)) == 0.0
    assert znorm_distance(np.ones(4), a) == pytest.approx(np.sqrt(4))
    with pytest.raises(LengthMismatch):
        znorm_distance(a, a[:3])


@pytest.mark.parametrize("l", [4, 16, 50])
def test_matches_naive_oracle(rng, l):
    t = np.cumsum(rng.standard_normal(400))
    mp = matrix_profile(t, l)
    excl = default_exclusion_radius(l)
    prof, idx = naive_profile(t, l, excl)
    np.testing.assert_allclose(mp.profile, prof, atol=1e-9)
    assert np.array_equal(mp.index, idx)


def test_distance_profile_matches_direct(rng):
    t = rng.standard_normal(300)
    l = 20
    d = distance_profile(17, t, l)
    ref = [znorm_distance(t[17 : 17 + l], t[j : j + l]) for j in range(t.size - l + 1)]
    np.testing.assert_allclose(d, ref, atol=1e-10)
    assert d[17] == pytest.approx(0.0, abs=1e-12)


def test_ties_resolve_to_smallest_j():
    # flat windows match each other exactly, so every flat candidate ties
    t = np.concatenate([np.zeros(30), np.sin(np.arange(30.0)), np.zeros(30)])
    mp = matrix_profile(t, 8, exclusion_radius=2)
    assert mp.index[0] == 3
    assert mp.index[70] == 0
    assert mp.profile[0] == 0.0 and mp.profile[70] == 0.0


def test_periodic_sequence_matches_whole_periods():
    pattern = np.array([0.0, 1.0, 3.0, 2.0, 5.0, 4.0, 1.5, 0.5])
    t = np.tile(pattern, 8)
    mp = matrix_profile(t, 8, exclusion_radius=2)
    assert np.all(mp.profile < 1e-12)
    assert np.all((mp.index - np.arange(mp.index.size)) % 8 == 0)


def test_constant_windows():
    t = np.concatenate([np.zeros(40), np.sin(np.arange(40)), np.zeros(40)])
    mp = matrix_profile(t, 10)
    assert mp.profile[0] == 0.0  # flat matches flat
    naive_p, naive_i = naive_profile(t, 10, default_exclusion_radius(10))
    np.testing.assert_allclose(mp.profile, naive_p, atol=1e-9)
    assert np.array_equal(mp.index, naive_i)


def test_preconditions(rng):
    with pytest.raises(SequenceTooShort):
        matrix_profile(rng.standard_normal(30), 16)
    with pytest.raises(InvalidLength):
        matrix_profile(rng.standard_normal(30), 1)


def test_arc_curve_matches_loop(rng):
    index = rng.integers(0, 50, size=50)
    ac = arc_curve(index)
    ref = np.zeros(50)
    for i, j in enumerate(index):
        lo, hi = min(i, j), max(i, j)
        ref[lo:hi] += 1
    np.testing.assert_array_equal(ac, ref)


def test_idealized_arc_curve():
    iac = idealized_arc_curve(101)
    assert iac[0] == 0.0
    assert np.argmax(iac) == 50
    assert iac[50] == pytest.approx(2 * 50 * 51 / 101)


def test_uniform_random_arcs_follow_parabola(rng):
    # arcs to uniformly random partners average to the idealised curve
    n = 2000
    acc = np.zeros(n)
    for _ in range(200):
        acc += arc_curve(rng.integers(0, n, size=n))
    ratio = acc[200:-200] / 200 / idealized_arc_curve(n)[200:-200]
    assert np.all(np.abs(ratio - 1) < 0.05)


def test_change_point_two_regimes(rng):
    x = np.arange(3000)
    t = np.concatenate([np.sin(x / 7.0), np.sign(np.sin(x / 11.0))]) + 0.05 * rng.standard_normal(6000)
    mp, cac = detect_change(t, 50, edge_ignore=200)
    assert abs(cac.argmin_interior - 3000) < 150
    assert cac.change_index is not None


def test_observation_sequence_edge_default(rng):
    samples = [minmax_normalize(rng.uniform(size=120)) for _ in range(6)]
    seq = assemble_sequence(samples)
    _, cac = detect_change(seq, 20)
    assert cac.edge_ignore == 120


@given(
    p=st.integers(40, 300),
    l=st.integers(3, 19),
    seed=st.integers(0, 2**31),
    walk=st.booleans(),
)
def test_property_mp_contract(p, l, seed, walk):
    r = np.random.default_rng(seed)
    t = r.standard_normal(p)
    if walk:
        t = np.cumsum(t)
    mp = matrix_profile(t, l)
    n = p - l + 1
    excl = mp.exclusion_radius
    assert mp.profile.shape == (n,) and mp.index.shape == (n,)
    assert np.all(mp.profile >= 0)
    assert np.all(mp.profile <= 2 * np.sqrt(l) + 1e-9)
    assert np.all((mp.index >= 0) & (mp.index < n))
    assert np.all(np.abs(mp.index - np.arange(n)) > excl)
    cac = corrected_arc_curve(mp)
    assert np.all((cac.cac >= 0) & (cac.cac <= 1))
    if cac.change_index is not None:
        assert cac.edge_ignore <= cac.change_index < n - cac.edge_ignore


@given(p=st.integers(60, 200), seed=st.integers(0, 1000), scale=st.floats(0.1, 100), shift=st.floats(-50, 50))
def test_property_affine_invariance(p, seed, scale, shift):
    t = np.random.default_rng(seed).standard_normal(p)
    a = matrix_profile(t, 10)
    b = matrix_profile(scale * t + shift, 10)
    np.testing.assert_allclose(a.profile, b.profile, atol=1e-6)


def test_cac_clipped_and_edges():
    n = 100
    mp = MpResult(np.zeros(n), np.arange(n)[::-1].copy(), 5, 2)
    cac = corrected_arc_curve(mp, edge_ignore=5)
    assert cac.cac.max() <= 1.0
    assert cac.min_interior == pytest.approx(cac.cac[5:95].min())
