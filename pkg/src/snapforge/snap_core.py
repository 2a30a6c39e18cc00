"""SNAP energy and force stages.

Two formulations share the U stage:

* baseline: U -> Z -> B -> dU -> dB -> forces; the full per-atom Z list is
  stored.
* adjoint: U -> Y -> dU . Y -> dE -> forces; Z is folded into
  ``Y_j = sum beta * Z^j_{j1 j2}`` as soon as it is produced.

The functions here work on the canonical layout: row-major
``(natoms, n_elements)`` complex arrays with full level blocks unless
``half=True``.  Alternative layouts and schedules live in
:mod:`snapforge.exec_variants`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .angular_basis import CGTable, compute_cg_table
from .constants import B_IMAG_TOL
from .halfint_index import HalfIntIndexMaps

__all__ = [
    "SnapParams",
    "Problem",
    "DescriptorState",
    "Context",
    "context",
    "compute_U",
    "transpose_ulisttot",
    "compute_Z",
    "compute_B",
    "compute_energy",
    "compute_dU",
    "compute_dB",
    "update_forces_baseline",
    "compute_Y",
    "compute_dE",
    "compute_fused_dE",
    "update_forces",
    "adjoint_energy",
    "baseline_pipeline",
    "adjoint_pipeline",
]


@dataclass(frozen=True)
class SnapParams:
    twojmax: int
    rcut: float
    beta: np.ndarray = field(repr=False)
    rmin0: float = 0.0
    rfac0: float = 0.99363
    weight: float = 1.0
    wself: float = 1.0
    self_contribution: bool = True

    def __post_init__(self):
        if self.twojmax < 0 or int(self.twojmax) != self.twojmax:
            raise ValueError("twojmax must be a non-negative integer")
        if not self.rcut > self.rmin0 >= 0.0:
            raise ValueError("need rcut > rmin0 >= 0")
        if not 0.0 < self.rfac0 <= 1.0:
            raise ValueError("rfac0 must lie in (0, 1]")
        beta = np.ascontiguousarray(self.beta, dtype=np.float64).reshape(-1)
        nb = len(HalfIntIndexMaps.build(self.twojmax).z_triples)
        if beta.size != nb:
            raise ValueError(f"beta has {beta.size} entries, twojmax={self.twojmax} needs {nb}")
        object.__setattr__(self, "beta", beta)

    def with_beta(self, beta) -> "SnapParams":
        return SnapParams(
            twojmax=self.twojmax, rcut=self.rcut, beta=beta, rmin0=self.rmin0,
            rfac0=self.rfac0, weight=self.weight, wself=self.wself,
            self_contribution=self.self_contribution,
        )


@dataclass
class Problem:
    """Atoms plus padded neighbor lists.

    ``neighbors[i, n]`` is the index of the ``n``-th neighbor of atom ``i`` (or
    -1 for a neighbor with no force bookkeeping), ``displacements[i, n]`` is
    ``r_k - r_i``; entries past ``counts[i]`` are padding.
    """

    positions: np.ndarray
    neighbors: np.ndarray
    displacements: np.ndarray
    counts: np.ndarray
    params: SnapParams
    box: float | None = None
    neighbor_weights: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64).reshape(n)
        maxnb = int(self.counts.max()) if n else 0
        d = np.asarray(self.displacements, dtype=np.float64).reshape(n, -1, 3)
        maxnb = max(maxnb, d.shape[1])
        self.displacements = np.zeros((n, maxnb, 3))
        self.displacements[:, : d.shape[1]] = d
        nbr = np.asarray(self.neighbors, dtype=np.int64).reshape(n, -1)
        self.neighbors = np.full((n, maxnb), -1, dtype=np.int64)
        self.neighbors[:, : nbr.shape[1]] = nbr
        w = self.neighbor_weights
        if w is None:
            self.neighbor_weights = np.full((n, maxnb), float(self.params.weight))
        else:
            w = np.asarray(w, dtype=np.float64).reshape(n, -1)
            self.neighbor_weights = np.zeros((n, maxnb))
            self.neighbor_weights[:, : w.shape[1]] = w
        mask = np.arange(maxnb)[None, :] < self.counts[:, None]
        r = np.linalg.norm(self.displacements, axis=-1)[mask]
        if np.any(r <= 0.0):
            raise ValueError("zero-length neighbor displacement")
        if np.any(r >= self.params.rcut):
            raise ValueError("neighbor displacement at or beyond the cutoff")
        if np.any((self.neighbors[mask] >= n)):
            raise ValueError("neighbor index out of range")

    @property
    def natoms(self) -> int:
        return self.positions.shape[0]

    @property
    def maxnb(self) -> int:
        return self.displacements.shape[1]

    @classmethod
    def from_lists(cls, positions, neighbor_lists, displacement_lists, params, **kw) -> "Problem":
        n = len(neighbor_lists)
        maxnb = max((len(x) for x in neighbor_lists), default=0)
        nbr = np.full((n, maxnb), -1, dtype=np.int64)
        disp = np.zeros((n, maxnb, 3))
        counts = np.zeros(n, dtype=np.int64)
        for i, (ks, ds) in enumerate(zip(neighbor_lists, displacement_lists)):
            counts[i] = len(ks)
            if len(ks):
                nbr[i, : len(ks)] = ks
                disp[i, : len(ks)] = np.asarray(ds, dtype=np.float64).reshape(-1, 3)
        return cls(positions=positions, neighbors=nbr, displacements=disp, counts=counts,
                   params=params, **kw)


@dataclass
class DescriptorState:
    """Working arrays of one pipeline run; absent arrays are ``None``."""

    ulisttot: np.ndarray | None = None
    ulist: np.ndarray | None = None
    zlist: np.ndarray | None = None
    blist: np.ndarray | None = None
    ylist: np.ndarray | None = None
    dulist: np.ndarray | None = None
    dblist: np.ndarray | None = None
    delist: np.ndarray | None = None
    forces: np.ndarray | None = None


@dataclass(frozen=True)
class Context:
    """Index maps, CG table and the int arrays the kernels consume."""

    maps: HalfIntIndexMaps
    cg: CGTable
    blk: np.ndarray
    hblk: np.ndarray
    rootpq: np.ndarray
    ctrip: np.ndarray
    cgo: np.ndarray
    zo: np.ndarray
    btrip: np.ndarray
    bz: np.ndarray
    dbt: np.ndarray
    beta_idx: np.ndarray
    beta_fac: np.ndarray
    level_start: np.ndarray
    level_triples: np.ndarray

    @property
    def twojmax(self) -> int:
        return self.maps.twojmax

    def bcoef(self, beta) -> np.ndarray:
        return self.beta_fac * np.asarray(beta, dtype=np.float64)[self.beta_idx]

    def n_elements(self, half: bool) -> int:
        return self.maps.n_u_half if half else self.maps.n_u


@lru_cache(maxsize=None)
def context(twojmax: int) -> Context:
    maps = HalfIntIndexMaps.build(twojmax)
    cg = compute_cg_table(twojmax, maps)
    ctrip = maps.coupling_array()
    dbt = maps.dB_terms()
    bidx, bfac = maps.adjoint_beta_map()
    order = np.argsort(ctrip[:, 2], kind="stable").astype(np.int64)
    counts = np.bincount(ctrip[:, 2], minlength=twojmax + 1)
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Context(
        maps=maps,
        cg=cg,
        blk=maps.u_block_offset,
        hblk=maps.u_half_offset,
        rootpq=K.rootpq_table(twojmax),
        ctrip=ctrip,
        cgo=maps.cg_offset[:-1].copy(),
        zo=maps.z_offset[:-1].copy(),
        btrip=maps.bispectrum_array(),
        bz=maps.z_offset[dbt[:, 0]].copy() if len(dbt) else np.zeros(0, np.int64),
        dbt=dbt,
        beta_idx=bidx,
        beta_fac=bfac,
        level_start=start,
        level_triples=order,
    )


def row_major_layout(n: int) -> np.ndarray:
    """Kernel stride tuple for a ``(natoms, n, 2)`` float buffer."""
    return np.array([1, 2 * n, 0, 2, 1], dtype=np.int64)


def _as_complex(buf: np.ndarray, natoms: int, n: int) -> np.ndarray:
    return buf.reshape(natoms, n, 2).view(np.complex128)[..., 0]


def _as_buffer(values: np.ndarray) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.complex128)
    return v.view(np.float64).reshape(-1)


def _geom(problem: Problem):
    p = problem.params
    return problem.displacements, problem.counts, problem.neighbor_weights, p.rcut, p.rmin0, p.rfac0


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def compute_U(problem: Problem, *, half: bool = False, store_ulist: bool = False,
              accumulation: str = "serialized", workers: int = 1):
    """Neighbor sums ``Ulisttot = wself*I + sum_k w_k fc(r_ik) u(r_ik)``.

    Returns ``(ulisttot, ulist)``; ``ulist`` is ``None`` unless requested or
    needed by the accumulation strategy.  ``accumulation`` is ``serialized``
    (per atom, neighbors in list order) or ``privatized`` (per-worker partial
    sums reduced in worker order).
    """
    ctx = context(problem.params.twojmax)
    p = problem.params
    n = ctx.n_elements(half)
    natoms, maxnb = problem.natoms, problem.maxnb
    tot = np.zeros(natoms * n * 2)
    lay = row_major_layout(n)
    disp, cnt, w, rcut, rmin0, rfac0 = _geom(problem)
    need_ulist = store_ulist or accumulation != "serialized"
    ulist = np.zeros((natoms * maxnb, n, 2)) if need_ulist else np.zeros((1, n, 2))
    if accumulation == "serialized":
        K.u_tot_atoms(disp, cnt, w, rcut, rmin0, rfac0, p.wself, p.self_contribution,
                      p.twojmax, ctx.blk, ctx.hblk, ctx.rootpq, half, tot, lay,
                      store_ulist, ulist, 0)
    elif accumulation == "privatized":
        K.u_pairs(disp, cnt, w, rcut, rmin0, rfac0, p.twojmax, ctx.blk, ctx.hblk,
                  ctx.rootpq, half, ulist, 0)
        partial = np.empty((workers, natoms, n, 2))
        K.tot_from_ulist_private(ulist, cnt, maxnb, workers, partial, 0)
        K.reduce_partials(partial, p.wself, p.self_contribution, p.twojmax, ctx.blk,
                          ctx.hblk, half, tot, lay)
    else:
        raise ValueError(f"unknown accumulation strategy {accumulation!r}")
    ul = None
    if need_ulist:
        ul = ulist.view(np.complex128)[..., 0].reshape(natoms, maxnb, n)
    return _as_complex(tot, natoms, n), ul


def transpose_ulisttot(ulisttot: np.ndarray, direction: str = "to_atom_fastest") -> np.ndarray:
    """Swap between ``(atom, index)`` and ``(index, atom)`` storage."""
    if direction not in ("to_atom_fastest", "to_index_fastest"):
        raise ValueError(f"unknown direction {direction!r}")
    return np.ascontiguousarray(ulisttot.T)


def compute_Z(ulisttot: np.ndarray, ctx: Context | None = None) -> np.ndarray:
    """Full Clebsch-Gordan products ``Z^j_{j1 j2}`` for every coupling triple."""
    natoms, n = ulisttot.shape
    ctx = ctx or _ctx_for_full(n)
    zlist = np.zeros((natoms, ctx.maps.n_z, 2))
    K.z_full(_as_buffer(ulisttot), row_major_layout(n), ctx.cg.values, ctx.ctrip, ctx.cgo,
             ctx.zo, ctx.blk, zlist)
    return zlist.view(np.complex128)[..., 0]


def compute_B(zlist: np.ndarray, ulisttot: np.ndarray, ctx: Context | None = None,
              check: bool = True) -> np.ndarray:
    """Bispectrum ``B_l = Re(Z^j_{j1 j2} : conj(U_j))``."""
    natoms, n = ulisttot.shape
    ctx = ctx or _ctx_for_full(n)
    blist = np.zeros((natoms, ctx.maps.n_b))
    resid = np.zeros(natoms)
    z = np.ascontiguousarray(zlist).view(np.float64).reshape(natoms, -1, 2)
    K.b_from_z(z, _as_buffer(ulisttot), row_major_layout(n), ctx.btrip, ctx.bz, ctx.blk,
               blist, resid)
    scale = max(1.0, float(np.abs(blist).max(initial=0.0)))
    if check and resid.max(initial=0.0) > B_IMAG_TOL * scale:
        raise FloatingPointError(
            f"bispectrum imaginary residue {resid.max():.3e} exceeds tolerance; indexing bug"
        )
    return blist


def compute_energy(blist: np.ndarray, beta) -> tuple[np.ndarray, float]:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != blist.shape[-1]:
        raise ValueError("beta length does not match the bispectrum count")
    e = blist @ beta
    return e, float(e.sum())


def compute_dU(problem: Problem, *, half: bool = False, index_order: str = "neighbor-fastest"):
    """Per-pair gradients of ``w*fc*u``; shape ``(natoms, maxnb, 3, n)``."""
    ctx = context(problem.params.twojmax)
    order = _order_code(index_order)
    n = ctx.n_elements(half)
    natoms, maxnb = problem.natoms, problem.maxnb
    dul = np.zeros((natoms * maxnb, 3, n, 2))
    disp, cnt, w, rcut, rmin0, rfac0 = _geom(problem)
    K.du_pairs(disp, cnt, w, rcut, rmin0, rfac0, problem.params.twojmax, ctx.blk, ctx.hblk,
               ctx.rootpq, half, dul, order)
    c = dul.view(np.complex128)[..., 0]
    if order == 1:
        c = c.reshape(maxnb, natoms, 3, n).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(c.reshape(natoms, maxnb, 3, n))


def compute_dB(zlist: np.ndarray, dulist: np.ndarray, counts: np.ndarray,
               ctx: Context | None = None) -> np.ndarray:
    """``dB_l/dr_k`` from the three Z : dU* terms; shape ``(natoms, maxnb, nb, 3)``."""
    natoms, maxnb, _, n = dulist.shape
    ctx = ctx or _ctx_for_full(n)
    if n != ctx.maps.n_u:
        raise ValueError("compute_dB needs full-block dU")
    dbl = np.zeros((natoms, maxnb, ctx.maps.n_b, 3))
    dul = np.ascontiguousarray(dulist).view(np.float64).reshape(natoms * maxnb, 3, n, 2)
    z = np.ascontiguousarray(zlist).view(np.float64).reshape(natoms, -1, 2)
    K.db_from_dulist(z, dul, np.asarray(counts, np.int64), maxnb, ctx.btrip, ctx.dbt, ctx.zo,
                     ctx.blk, dbl, 0)
    return dbl


def update_forces_baseline(dblist: np.ndarray, beta, problem: Problem):
    """``dE(i,k) = sum_l beta_l dB_l/dr_k``, then action/reaction forces."""
    delist = np.zeros((problem.natoms, problem.maxnb, 3))
    K.de_from_db(dblist, problem.counts, np.asarray(beta, dtype=np.float64), delist)
    return delist, update_forces(delist, problem)


def compute_Y(ulisttot: np.ndarray, beta, ctx: Context | None = None, *,
              half: bool = False, input_half: bool = False) -> np.ndarray:
    """Adjoint ``Y_j = sum beta Z^j_{j1 j2}`` without storing Z.

    ``half`` selects the output storage; ``input_half`` marks ``ulisttot`` as
    half blocks (expanded before use).
    """
    natoms, n = ulisttot.shape
    if ctx is None:
        ctx = _ctx_for_half(n) if input_half else _ctx_for_full(n)
    tot = _as_buffer(ulisttot)
    if input_half:
        nu = ctx.maps.n_u
        full = np.zeros(natoms * nu * 2)
        K.relayout(tot, row_major_layout(n), True, full, row_major_layout(nu), False,
                   natoms, ctx.twojmax, ctx.blk, ctx.hblk)
        tot = full
    ny = ctx.n_elements(half)
    y = np.zeros(natoms * ny * 2)
    K.y_atoms(tot, row_major_layout(ctx.maps.n_u), ctx.cg.values, ctx.ctrip, ctx.cgo,
              ctx.blk, ctx.hblk, ctx.bcoef(beta), y, row_major_layout(ny), half, natoms,
              ctx.twojmax)
    return _as_complex(y, natoms, ny)


def compute_dE(dulist: np.ndarray, ylist: np.ndarray, counts: np.ndarray, twojmax: int,
               *, half: bool = False) -> np.ndarray:
    """Staged contraction ``dE(i,k) = Re(sum_j Y_j : conj(dU_j))``."""
    ctx = context(twojmax)
    natoms, maxnb, _, n = dulist.shape
    dul = np.ascontiguousarray(dulist).view(np.float64).reshape(natoms * maxnb, 3, n, 2)
    delist = np.zeros((natoms, maxnb, 3))
    ny = ylist.shape[1]
    K.de_from_dulist(dul, np.asarray(counts, np.int64), maxnb, _as_buffer(ylist),
                     row_major_layout(ny), half, half, twojmax, ctx.blk, ctx.hblk, delist, 0)
    return delist


def compute_fused_dE(problem: Problem, ylist: np.ndarray, *, half: bool = False,
                     fission: bool = False):
    """Recompute u, du per pair and contract with Y in one pass (no dU storage).

    ``half`` marks ``ylist`` as half blocks and selects the symmetric half
    contraction; ``fission`` runs one pass per Cartesian direction.
    """
    ctx = context(problem.params.twojmax)
    delist = np.zeros((problem.natoms, problem.maxnb, 3))
    disp, cnt, w, rcut, rmin0, rfac0 = _geom(problem)
    ny = ylist.shape[1]
    K.fused_de(disp, cnt, w, rcut, rmin0, rfac0, problem.params.twojmax, ctx.blk, ctx.hblk,
               ctx.rootpq, _as_buffer(ylist), row_major_layout(ny), half, half, fission,
               delist, 0)
    return delist, update_forces(delist, problem)


def update_forces(delist: np.ndarray, problem: Problem) -> np.ndarray:
    forces = np.zeros((problem.natoms, 3))
    K.scatter_forces(delist, problem.counts, problem.neighbors, forces)
    return forces


def adjoint_energy(ylist: np.ndarray, ulisttot: np.ndarray, twojmax: int, *,
                   half: bool = False) -> np.ndarray:
    """Per-atom energy from the adjoint: ``E_i = Re(sum_j Y_j : conj(U_j)) / 3``.

    ``E_i`` is a homogeneous cubic in U and Y is its derivative with respect
    to ``conj(U)``, so the contraction counts each bispectrum term three times.
    """
    ctx = context(twojmax)
    natoms = ylist.shape[0]
    e = np.empty(natoms)
    oy = ctx.hblk if half else ctx.blk
    ny = ylist.shape[1]
    y = _as_buffer(ylist)
    u = _as_buffer(ulisttot)
    nu = ulisttot.shape[1]
    for i in range(natoms):
        e[i] = K.contract_y(y, i * 2 * ny, 2, 1, oy, u[i * 2 * nu : (i + 1) * 2 * nu : 2],
                            u[i * 2 * nu + 1 : (i + 1) * 2 * nu : 2], oy, half, twojmax) / 3.0
    return e


# ---------------------------------------------------------------------------
# whole pipelines on the canonical layout
# ---------------------------------------------------------------------------


def baseline_pipeline(problem: Problem) -> tuple[DescriptorState, np.ndarray]:
    """Staged baseline: returns the state and per-atom energies."""
    ctx = context(problem.params.twojmax)
    tot, _ = compute_U(problem)
    z = compute_Z(tot, ctx)
    b = compute_B(z, tot, ctx)
    du = compute_dU(problem)
    dbl = compute_dB(z, du, problem.counts, ctx)
    delist, forces = update_forces_baseline(dbl, problem.params.beta, problem)
    e, _ = compute_energy(b, problem.params.beta)
    st = DescriptorState(ulisttot=tot, zlist=z, blist=b, dulist=du, dblist=dbl,
                         delist=delist, forces=forces)
    return st, e


def adjoint_pipeline(problem: Problem, *, half: bool = False, fused: bool = True,
                     fission: bool = False) -> tuple[DescriptorState, np.ndarray]:
    ctx = context(problem.params.twojmax)
    tot, _ = compute_U(problem)
    y = compute_Y(tot, problem.params.beta, ctx, half=half)
    if fused:
        delist, forces = compute_fused_dE(problem, y, half=half, fission=fission)
        du = None
    else:
        du = compute_dU(problem, half=half)
        delist = compute_dE(du, y, problem.counts, problem.params.twojmax, half=half)
        forces = update_forces(delist, problem)
    e = adjoint_energy(y, _half_of(tot, ctx) if half else tot, problem.params.twojmax, half=half)
    st = DescriptorState(ulisttot=tot, ylist=y, dulist=du, delist=delist, forces=forces)
    return st, e


def _half_of(full: np.ndarray, ctx: Context) -> np.ndarray:
    cols = np.concatenate([
        np.arange(ctx.blk[j], ctx.blk[j] + (j + 1) * (j // 2 + 1)) for j in range(ctx.twojmax + 1)
    ])
    return np.ascontiguousarray(full[:, cols])


def _order_code(index_order: str) -> int:
    if index_order == "neighbor-fastest":
        return 0
    if index_order == "atom-fastest":
        return 1
    raise ValueError(f"unknown index order {index_order!r}")


def _ctx_for_full(n: int) -> Context:
    j = 0
    while True:
        c = context(j)
        if c.maps.n_u == n:
            return c
        if c.maps.n_u > n:
            raise ValueError(f"{n} elements is not a full-block U length")
        j += 1


def _ctx_for_half(n: int) -> Context:
    j = 0
    while True:
        c = context(j)
        if c.maps.n_u_half == n:
            return c
        if c.maps.n_u_half > n:
            raise ValueError(f"{n} elements is not a half-block U length")
        j += 1
