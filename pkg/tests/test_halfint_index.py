import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapforge.halfint_index import (
    HalfIntIndexMaps,
    enumerate_bispectrum_triples,
    enumerate_coupling_triples,
    full_to_half_compress,
    half_to_full_expand,
    u_half_elements,
    u_total_elements,
    z_total_elements,
)
from snapforge.oracle import wigner_direct


def brute_triples(J):
    out = []
    for j1 in range(J + 1):
        for j2 in range(J + 1):
            for j in range(J + 1):
                if (j2 <= j1 <= j and abs(j1 - j2) <= j <= j1 + j2
                        and (j1 + j2 + j) % 2 == 0):
                    out.append((j1, j2, j))
    return sorted(out)


@pytest.mark.parametrize("J, count", [(0, 1), (2, 5), (8, 55), (14, 204)])
def test_bispectrum_counts(J, count):
    assert len(enumerate_bispectrum_triples(J)) == count


def test_empty_band_triple():
    assert enumerate_bispectrum_triples(0) == [(0, 0, 0)]


def test_triples_match_brute_force_and_grow():
    prev = 0
    for J in range(21):
        t = enumerate_bispectrum_triples(J)
        assert t == brute_triples(J)  # lexicographic too
        assert len(t) >= prev
        prev = len(t)


@pytest.mark.parametrize("J, n", [(0, 1), (8, 285), (14, 1240)])
def test_u_total(J, n):
    assert u_total_elements(J) == n


@pytest.mark.parametrize("J, n", [(0, 1), (1, 3), (8, 155)])
def test_u_half(J, n):
    assert u_half_elements(J) == n


def test_negative_twoj_rejected():
    with pytest.raises(ValueError):
        u_total_elements(-1)


@pytest.mark.parametrize("J", [0, 1, 5, 8, 14])
def test_offsets_gap_free(J):
    m = HalfIntIndexMaps.build(J)
    assert np.all(np.diff(m.u_block_offset) == [(t + 1) ** 2 for t in range(J + 1)])
    assert np.all(np.diff(m.u_half_offset) == [(t + 1) * (t // 2 + 1) for t in range(J + 1)])
    assert m.n_u == u_total_elements(J)
    assert m.n_u_half == u_half_elements(J)
    assert m.n_z == z_total_elements(J)
    assert m.n_cg == sum((a + 1) * (b + 1) for a, b, _ in m.coupling_triples)


def test_coupling_triples_cover_all_roles():
    # every role of every bispectrum triple is a stored coupling triple
    J = 6
    ct = set(enumerate_coupling_triples(J))
    for j1, j2, j in enumerate_bispectrum_triples(J):
        assert (j1, j2, j) in ct and (j, j2, j1) in ct and (j, j1, j2) in ct


def test_maps_are_immutable():
    m = HalfIntIndexMaps.build(2)
    with pytest.raises(dataclasses.FrozenInstanceError):
        m.twojmax = 3


def test_adjoint_beta_map_covers_every_triple():
    m = HalfIntIndexMaps.build(8)
    idx, fac = m.adjoint_beta_map()
    assert set(idx.tolist()) == set(range(m.n_b))
    assert np.all(fac > 0)


def test_expand_trivial_levels():
    np.testing.assert_array_equal(half_to_full_expand(np.array([2.5 + 1j]), 0), [2.5 + 1j])
    np.testing.assert_array_equal(half_to_full_expand(np.array([1.0, 0.0]), 1),
                                  np.eye(2).reshape(-1))


def test_expand_size_mismatch():
    with pytest.raises(ValueError):
        half_to_full_expand(np.zeros(4), 2)
    with pytest.raises(ValueError):
        full_to_half_compress(np.zeros(5), 2)


@settings(max_examples=60, deadline=None)
@given(twoj=st.integers(0, 8), seed=st.integers(0, 2**31 - 1))
def test_round_trip_on_wigner_blocks(twoj, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    u = wigner_direct(twoj, complex(q[0], q[1]), complex(q[2], q[3]))
    # make the block exactly symmetry-consistent before checking bitwise equality
    full = half_to_full_expand(full_to_half_compress(u, twoj), twoj)
    np.testing.assert_allclose(full, u.reshape(-1), atol=1e-12)
    again = half_to_full_expand(full_to_half_compress(full, twoj), twoj)
    np.testing.assert_array_equal(again, full)
