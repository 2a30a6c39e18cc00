"""Geometry of the 3-sphere mapping, Wigner matrices and Clebsch-Gordan table.

Convention: the level-``twoj`` block ``u[mb, ma]`` is the ``twoj``-th
symmetric power of the SU(2) matrix ``[[conj(a), -conj(b)], [b, a]]``
(rows ``mb``, columns ``ma``), normalized to be unitary.  The Cayley-Klein
pair for a neighbor at ``(x, y, z)`` is

    theta0 = rfac0 * pi * (r - rmin0) / (Rcut - rmin0)
    a = cos(theta0) - i z sin(theta0) / r
    b = (y - i x) sin(theta0) / r

which is the ``z0 = r / tan(theta0)`` form rewritten without the ``1/tan``
singularity at ``theta0 = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .halfint_index import HalfIntIndexMaps, u_half_size

__all__ = [
    "SphereMap",
    "CGTable",
    "WignerStack",
    "CG_TWOJ_MAX",
    "map_to_3sphere",
    "switching_function",
    "compute_cg_table",
    "compute_u_matrices",
    "compute_du_matrices",
]

# float64 factorial ratios stay well conditioned through this band
CG_TWOJ_MAX = 24


@dataclass(frozen=True)
class SphereMap:
    r: float
    theta0: float
    z0: float
    a: complex
    b: complex
    da: np.ndarray  # (3,) complex, d a / d(x, y, z)
    db: np.ndarray
    displacement: np.ndarray
    rcut: float
    rmin0: float
    rfac0: float


def map_to_3sphere(displacement, rcut: float, rmin0: float = 0.0, rfac0: float = 0.99363) -> SphereMap:
    d = np.asarray(displacement, dtype=np.float64).reshape(3)
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise ValueError("zero-length displacement")
    if r >= rcut:
        raise ValueError(f"|displacement|={r} is not inside the cutoff {rcut}")
    if not rmin0 < rcut:
        raise ValueError("rmin0 must be smaller than rcut")
    if not 0.0 < rfac0 <= 1.0:
        raise ValueError("rfac0 must lie in (0, 1]")
    da = np.zeros((3, 2))
    db = np.zeros((3, 2))
    _, ar, ai, br, bi = K.cayley_klein(d[0], d[1], d[2], rcut, rmin0, rfac0, da, db)
    theta0 = rfac0 * math.pi * (r - rmin0) / (rcut - rmin0)
    tn = math.tan(theta0)
    z0 = r / tn if tn != 0.0 else math.inf
    return SphereMap(
        r=r,
        theta0=theta0,
        z0=z0,
        a=complex(ar, ai),
        b=complex(br, bi),
        da=da[:, 0] + 1j * da[:, 1],
        db=db[:, 0] + 1j * db[:, 1],
        displacement=d,
        rcut=float(rcut),
        rmin0=float(rmin0),
        rfac0=float(rfac0),
    )


def switching_function(r: float, rcut: float, rmin0: float = 0.0) -> tuple[float, float]:
    """Cosine cutoff ``fc`` and its radial derivative."""
    if rcut <= rmin0:
        raise ValueError("rcut must exceed rmin0")
    if r >= rcut:
        return 0.0, 0.0
    return K.switching(float(r), float(rcut), float(rmin0))


@dataclass(frozen=True)
class CGTable:
    """Flattened real CG coefficients.

    Block ``i`` (coupling triple ``maps.coupling_triples[i] = (j1, j2, j)``)
    starts at ``maps.cg_offset[i]`` and holds ``C(j1 m1; j2 m2 | j, m1+m2)``
    at ``[m1 * (j2 + 1) + m2]`` with ``m1``, ``m2`` as 0-based indices.
    """

    maps: HalfIntIndexMaps
    values: np.ndarray

    def block(self, j1: int, j2: int, j: int) -> np.ndarray:
        i = self.maps.coupling_lookup[(j1, j2, j)]
        o = self.maps.cg_offset
        return self.values[o[i] : o[i + 1]].reshape(j1 + 1, j2 + 1)


def _factorials(n: int) -> np.ndarray:
    f = np.ones(n + 1)
    for i in range(1, n + 1):
        f[i] = f[i - 1] * i
    return f


def compute_cg_table(twojmax: int, maps: HalfIntIndexMaps | None = None) -> CGTable:
    """Racah closed form with float64 factorials."""
    if twojmax > CG_TWOJ_MAX:
        raise ValueError(f"twojmax={twojmax} exceeds supported band {CG_TWOJ_MAX}")
    if maps is None:
        maps = HalfIntIndexMaps.build(twojmax)
    elif maps.twojmax != twojmax:
        raise ValueError("index maps were built for a different twojmax")
    fac = _factorials(3 * twojmax // 2 + 2)
    out = np.zeros(maps.n_cg)
    for i, (j1, j2, j) in enumerate(maps.coupling_triples):
        base = maps.cg_offset[i]
        dcg = math.sqrt(
            fac[(j1 + j2 - j) // 2]
            * fac[(j1 - j2 + j) // 2]
            * fac[(-j1 + j2 + j) // 2]
            / fac[(j1 + j2 + j) // 2 + 1]
        )
        for m1 in range(j1 + 1):
            aa2 = 2 * m1 - j1
            for m2 in range(j2 + 1):
                bb2 = 2 * m2 - j2
                m = (aa2 + bb2 + j) // 2
                if m < 0 or m > j:
                    continue
                zlo = max(0, -(j - j2 + aa2) // 2, -(j - j1 - bb2) // 2)
                zhi = min((j1 + j2 - j) // 2, (j1 - aa2) // 2, (j2 + bb2) // 2)
                s = 0.0
                for z in range(zlo, zhi + 1):
                    sign = -1.0 if z % 2 else 1.0
                    s += sign / (
                        fac[z]
                        * fac[(j1 + j2 - j) // 2 - z]
                        * fac[(j1 - aa2) // 2 - z]
                        * fac[(j2 + bb2) // 2 - z]
                        * fac[(j - j2 + aa2) // 2 + z]
                        * fac[(j - j1 - bb2) // 2 + z]
                    )
                cc2 = 2 * m - j
                norm = math.sqrt(
                    fac[(j1 + aa2) // 2]
                    * fac[(j1 - aa2) // 2]
                    * fac[(j2 + bb2) // 2]
                    * fac[(j2 - bb2) // 2]
                    * fac[(j + cc2) // 2]
                    * fac[(j - cc2) // 2]
                    * (j + 1)
                )
                out[base + m1 * (j2 + 1) + m2] = s * dcg * norm
    out.setflags(write=False)
    return CGTable(maps=maps, values=out)


@dataclass
class WignerStack:
    """Per-level complex blocks, flattened; ``du`` has a leading direction axis."""

    twojmax: int
    u: np.ndarray
    du: np.ndarray | None = None
    half: bool = False

    def level(self, twoj: int) -> np.ndarray:
        maps = HalfIntIndexMaps.build(self.twojmax)
        if self.half:
            o = maps.u_half_offset
            return self.u[o[twoj] : o[twoj + 1]].reshape(twoj // 2 + 1, twoj + 1)
        o = maps.u_block_offset
        return self.u[o[twoj] : o[twoj + 1]].reshape(twoj + 1, twoj + 1)


def _to_half(flat: np.ndarray, twojmax: int) -> np.ndarray:
    maps = HalfIntIndexMaps.build(twojmax)
    parts = [
        flat[..., maps.u_block_offset[t] : maps.u_block_offset[t] + u_half_size(t)]
        for t in range(twojmax + 1)
    ]
    return np.concatenate(parts, axis=-1)


def compute_u_matrices(smap: SphereMap, twojmax: int, half: bool = False) -> WignerStack:
    maps = HalfIntIndexMaps.build(twojmax)
    ur = np.zeros(maps.n_u)
    ui = np.zeros(maps.n_u)
    a, b = smap.a, smap.b
    K.u_recursion(a.real, a.imag, b.real, b.imag, twojmax, maps.u_block_offset,
                  K.rootpq_table(twojmax), ur, ui)
    u = ur + 1j * ui
    if half:
        u = _to_half(u, twojmax)
    return WignerStack(twojmax=twojmax, u=u, half=half)


def compute_du_matrices(
    smap: SphereMap,
    ustack: WignerStack,
    twojmax: int,
    fc: float,
    dfc_dr: float,
    weight: float = 1.0,
) -> WignerStack:
    """Cartesian gradient of ``weight * fc(r) * u`` w.r.t. the neighbor displacement.

    The returned stack carries ``weight * fc * u`` in ``u`` and the gradient,
    shaped ``(3, n)``, in ``du``.
    """
    maps = HalfIntIndexMaps.build(twojmax)
    n = maps.n_u
    if ustack.half:
        ustack = compute_u_matrices(smap, twojmax)
    ur = np.ascontiguousarray(ustack.u.real)
    ui = np.ascontiguousarray(ustack.u.imag)
    if ur.size != n:
        raise ValueError("u stack does not match twojmax")
    a, b = smap.a, smap.b
    da = np.stack([smap.da.real, smap.da.imag], axis=1)
    db = np.stack([smap.db.real, smap.db.imag], axis=1)
    rootpq = K.rootpq_table(twojmax)
    x, y, z = smap.displacement
    du = np.empty((3, n), dtype=np.complex128)
    dur = np.empty(n)
    dui = np.empty(n)
    outr = np.empty(n)
    outi = np.empty(n)
    for k in range(3):
        K.du_recursion_dir(k, a.real, a.imag, b.real, b.imag, da, db, twojmax,
                           maps.u_block_offset, rootpq, ur, ui, dur, dui)
        K.weighted_du(k, smap.r, x, y, z, weight, fc, dfc_dr, n, ur, ui, dur, dui, outr, outi)
        du[k] = outr + 1j * outi
    return WignerStack(twojmax=twojmax, u=weight * fc * ustack.u, du=du)
