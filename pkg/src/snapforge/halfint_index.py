"""Half-integer index bookkeeping.

Angular momenta are carried as ``twoj = 2j`` (non-negative ints) so that all
index arithmetic is exact.  A level-``twoj`` Wigner block is a
``(twoj+1) x (twoj+1)`` complex matrix stored row-major with the row index
``mb`` and column index ``ma`` both running over ``0..twoj`` (the magnetic
quantum number is ``ma - twoj/2``).

Half storage keeps rows ``mb = 0..twoj//2`` in full, i.e.
``(twoj+1)*(twoj//2+1)`` elements, which is a prefix of the full row-major
block.  For even ``twoj`` the middle row is stored completely.  The remaining
rows follow from

    u[twoj-mb, twoj-ma] = (-1)**(ma-mb) * conj(u[mb, ma])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HalfIntIndexMaps",
    "enumerate_bispectrum_triples",
    "enumerate_coupling_triples",
    "u_total_elements",
    "u_half_elements",
    "u_block_size",
    "u_half_size",
    "full_to_half_compress",
    "half_to_full_expand",
    "z_total_elements",
]


def _check_twoj(twoj: int) -> None:
    if int(twoj) != twoj or twoj < 0:
        raise ValueError(f"twoj must be a non-negative integer, got {twoj!r}")


def u_block_size(twoj: int) -> int:
    return (twoj + 1) * (twoj + 1)


def u_half_size(twoj: int) -> int:
    return (twoj + 1) * (twoj // 2 + 1)


def u_total_elements(twojmax: int) -> int:
    """Number of complex elements in all full blocks ``0..twojmax``."""
    _check_twoj(twojmax)
    return sum(u_block_size(t) for t in range(twojmax + 1))


def u_half_elements(twojmax: int) -> int:
    """Number of complex elements in all half blocks ``0..twojmax``."""
    _check_twoj(twojmax)
    return sum(u_half_size(t) for t in range(twojmax + 1))


def _admissible(twoj1: int, twoj2: int, twoj: int) -> bool:
    return (
        abs(twoj1 - twoj2) <= twoj <= twoj1 + twoj2
        and (twoj1 + twoj2 + twoj) % 2 == 0
    )


def enumerate_bispectrum_triples(twojmax: int) -> list[tuple[int, int, int]]:
    """Bispectrum triples ``(twoj1, twoj2, twoj)`` with
    ``twoj2 <= twoj1 <= twoj <= twojmax``, in lexicographic order.
    """
    _check_twoj(twojmax)
    out = []
    for j1 in range(twojmax + 1):
        for j2 in range(j1 + 1):
            for j in range(j1, twojmax + 1):
                if _admissible(j1, j2, j):
                    out.append((j1, j2, j))
    return out


def enumerate_coupling_triples(twojmax: int) -> list[tuple[int, int, int]]:
    """All Clebsch-Gordan couplings ``j1 (x) j2 -> j`` with ``twoj2 <= twoj1``.

    Unlike the bispectrum list, ``twoj`` may be smaller than ``twoj1``.
    These are the Z blocks needed by the force terms.
    """
    _check_twoj(twojmax)
    out = []
    for j1 in range(twojmax + 1):
        for j2 in range(j1 + 1):
            for j in range(j1 - j2, min(twojmax, j1 + j2) + 1, 2):
                out.append((j1, j2, j))
    return out


def z_total_elements(twojmax: int) -> int:
    """Complex elements of a full per-atom Zlist (all coupling triples)."""
    return sum(u_block_size(j) for _, _, j in enumerate_coupling_triples(twojmax))


def full_to_half_compress(full: np.ndarray, twoj: int) -> np.ndarray:
    full = np.asarray(full)
    if full.size != u_block_size(twoj):
        raise ValueError(
            f"full block for twoj={twoj} needs {u_block_size(twoj)} elements, got {full.size}"
        )
    return full.reshape(-1)[: u_half_size(twoj)].copy()


def half_to_full_expand(half: np.ndarray, twoj: int) -> np.ndarray:
    """Rebuild a full level block from its half block via the inversion symmetry."""
    half = np.asarray(half)
    nh = u_half_size(twoj)
    if half.size != nh:
        raise ValueError(f"half block for twoj={twoj} needs {nh} elements, got {half.size}")
    n = twoj + 1
    full = np.zeros((n, n), dtype=np.result_type(half.dtype, np.complex128))
    rows = twoj // 2 + 1
    full[:rows] = half.reshape(rows, n)
    ma = np.arange(n)
    for mb in range(twoj - rows + 1):
        sign = np.where((ma - mb) % 2 == 0, 1.0, -1.0)
        full[twoj - mb, twoj - ma] = sign * np.conj(full[mb, ma])
    return full.reshape(-1)


@dataclass(frozen=True)
class HalfIntIndexMaps:
    """Immutable flattened index maps for one band limit ``twojmax``.

    Attributes mirror the numba kernels' needs: everything is exposed as
    ``int64`` arrays in addition to the Python-level triple lists.
    """

    twojmax: int
    u_block_offset: np.ndarray = field(repr=False)
    u_half_offset: np.ndarray = field(repr=False)
    z_triples: tuple = field(repr=False)
    coupling_triples: tuple = field(repr=False)
    cg_offset: np.ndarray = field(repr=False)
    z_offset: np.ndarray = field(repr=False)
    coupling_lookup: dict = field(repr=False)
    bispectrum_lookup: dict = field(repr=False)

    @classmethod
    def build(cls, twojmax: int) -> "HalfIntIndexMaps":
        _check_twoj(twojmax)
        sizes = [u_block_size(t) for t in range(twojmax + 1)]
        hsizes = [u_half_size(t) for t in range(twojmax + 1)]
        u_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        h_off = np.concatenate([[0], np.cumsum(hsizes)]).astype(np.int64)

        btrip = tuple(enumerate_bispectrum_triples(twojmax))
        ctrip = tuple(enumerate_coupling_triples(twojmax))
        cg_sizes = [(j1 + 1) * (j2 + 1) for j1, j2, _ in ctrip]
        z_sizes = [u_block_size(j) for _, _, j in ctrip]
        cg_off = np.concatenate([[0], np.cumsum(cg_sizes)]).astype(np.int64)
        z_off = np.concatenate([[0], np.cumsum(z_sizes)]).astype(np.int64)
        return cls(
            twojmax=twojmax,
            u_block_offset=u_off,
            u_half_offset=h_off,
            z_triples=btrip,
            coupling_triples=ctrip,
            cg_offset=cg_off,
            z_offset=z_off,
            coupling_lookup={t: i for i, t in enumerate(ctrip)},
            bispectrum_lookup={t: i for i, t in enumerate(btrip)},
        )

    # offsets arrays carry one trailing entry = total length
    @property
    def n_u(self) -> int:
        return int(self.u_block_offset[-1])

    @property
    def n_u_half(self) -> int:
        return int(self.u_half_offset[-1])

    @property
    def n_b(self) -> int:
        return len(self.z_triples)

    @property
    def n_z(self) -> int:
        return int(self.z_offset[-1])

    @property
    def n_cg(self) -> int:
        return int(self.cg_offset[-1])

    def coupling_array(self) -> np.ndarray:
        return np.asarray(self.coupling_triples, dtype=np.int64).reshape(-1, 3)

    def bispectrum_array(self) -> np.ndarray:
        return np.asarray(self.z_triples, dtype=np.int64).reshape(-1, 3)

    def dB_terms(self) -> np.ndarray:
        """Per bispectrum triple, the coupling indices of its three force terms.

        Row ``l`` holds the indices of ``Z^j_{j1 j2}``, ``Z^{j1}_{j j2}`` and
        ``Z^{j2}_{j j1}`` for ``z_triples[l] = (j1, j2, j)``.
        """
        out = np.empty((self.n_b, 3), dtype=np.int64)
        look = self.coupling_lookup
        for l, (j1, j2, j) in enumerate(self.z_triples):
            out[l] = look[(j1, j2, j)], look[(j, j2, j1)], look[(j, j1, j2)]
        return out

    def adjoint_beta_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Map each coupling triple to ``(bispectrum index, multiplier)``.

        ``Y_j`` accumulates ``multiplier * beta[index] * Z^j_{j1 j2}`` over all
        coupling triples.  A coupling triple stands for whichever role the
        canonical bispectrum triple assigns to it; the multiplier carries the
        number of coincident roles and the ``(2j1+1)/(2j+1)`` CG weight for the
        roles in which the output level is not the largest.
        """
        n = len(self.coupling_triples)
        idx = np.empty(n, dtype=np.int64)
        fac = np.empty(n, dtype=np.float64)
        look = self.bispectrum_lookup
        for i, (j1, j2, j) in enumerate(self.coupling_triples):
            if j >= j1:
                idx[i] = look[(j1, j2, j)]
                if j1 == j:
                    fac[i] = 3.0 if j2 == j else 2.0
                else:
                    fac[i] = 1.0
            elif j >= j2:
                idx[i] = look[(j, j2, j1)]
                fac[i] = (j1 + 1) / (j + 1.0)
                if j2 == j:
                    fac[i] *= 2.0
            else:
                idx[i] = look[(j2, j, j1)]
                fac[i] = (j1 + 1) / (j + 1.0)
        return idx, fac
