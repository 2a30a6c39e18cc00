"""A tour of the half-integer index maps.

Angular momenta come in half-integer steps, so every index here is stored
doubled (``twoj = 2j``).  The script counts the bispectrum components, shows
how the Wigner blocks pack into one flat array, and demonstrates the mirror
symmetry that lets half of every block be dropped.
"""

import numpy as np

from snapforge.angular_basis import compute_u_matrices, map_to_3sphere
from snapforge.halfint_index import (
    HalfIntIndexMaps,
    enumerate_bispectrum_triples,
    full_to_half_compress,
    half_to_full_expand,
)

# -----------------------------------------------------------------------------
# PART 1: how many descriptors?
# A component is a triple (j1, j2, j) with j2 <= j1 <= j, a triangle rule and
# an even sum.  The count grows roughly cubically with the band limit.
# -----------------------------------------------------------------------------
print("band limit 2J   bispectrum components   U elements   half-stored U")
for J in (0, 2, 4, 8, 14):
    m = HalfIntIndexMaps.build(J)
    print(f"{J:12d} {m.n_b:23d} {m.n_u:12d} {m.n_u_half:14d}")

print("\nfirst triples at 2J=4:", enumerate_bispectrum_triples(4)[:6])

# -----------------------------------------------------------------------------
# PART 2: flat storage
# Level 2j occupies a (2j+1) x (2j+1) block; blocks are laid end to end.
# -----------------------------------------------------------------------------
maps = HalfIntIndexMaps.build(4)
print("\nblock offsets at 2J=4:", maps.u_block_offset.tolist())
print("half offsets at 2J=4: ", maps.u_half_offset.tolist())

# -----------------------------------------------------------------------------
# PART 3: the mirror rule
# u[2j-mb][2j-ma] = (-1)^(ma-mb) conj(u[mb][ma]), so rows past the middle are
# redundant.  Compress a real Wigner block and rebuild it.
# -----------------------------------------------------------------------------
m = map_to_3sphere([0.4, -0.3, 0.9], rcut=2.0)
u3 = compute_u_matrices(m, 3).level(3)
half = full_to_half_compress(u3, 3)
back = half_to_full_expand(half, 3).reshape(4, 4)
print(f"\n2j=3 block: {u3.size} elements, {half.size} stored, "
      f"rebuild error {np.abs(back - u3).max():.1e}")
