"""Execution strategies for the SNAP force pipeline.

A :class:`VariantSpec` describes how the pipeline runs: staging, parallel
axes, pair iteration order, storage layout of the per-atom descriptor
arrays, symmetry half storage, fusion flags and the accumulation strategy
for neighbor sums.  :func:`run_pipeline` executes a variant and reports forces,
energies, stage timings, per-array bytes and analytic work counters.

Layouts are described by :class:`LayoutView`.  All layouts address the same
logical ``(atom, element)`` complex array, and every kernel does identical
per-element arithmetic whatever the layout, so switching layout never
changes a result bit.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numba
import numpy as np

from . import _kernels as K
from .constants import B_IMAG_TOL
from .snap_core import DescriptorState, Problem, adjoint_energy, context

__all__ = [
    "VariantSpec",
    "LayoutView",
    "PipelineResult",
    "MemoryBudgetError",
    "AllocationTracker",
    "builtin_variants",
    "get_variant",
    "variant_names",
    "array_bytes",
    "aligned_zeros",
    "pack",
    "unpack",
    "run_pipeline",
    "resolve_workers",
]

STAGINGS = ("monolithic", "fissioned")
AXES = ("atoms", "atoms*neighbors", "atoms*neighbors*index")
ORDERS = ("neighbor-fastest", "atom-fastest")
LAYOUTS = ("interleaved", "split", "aosoa")
ACCUMULATIONS = ("serialized", "privatized", "concurrent-rmw")
MATERIALIZABLE = frozenset({"Ulist", "Zlist", "dUlist"})
MODES = ("deterministic", "benchmark")

ALIGNMENT = 64
LOCK_STRIPES = 64
COMPLEX_BYTES = 16
REAL_BYTES = 8


# ---------------------------------------------------------------------------
# variant description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariantSpec:
    """Declarative description of one execution strategy.

    ``descriptor_order`` selects where the atom index sits in Ulisttot and
    Ylist for the non-tiled layouts: ``atom-major`` keeps each atom's
    elements contiguous, ``atom-fastest`` makes the atom the innermost index.
    """

    name: str
    pipeline: str = "adjoint"
    staging: str = "fissioned"
    parallel_axes: str = "atoms"
    index_order: str = "neighbor-fastest"
    layout: str = "interleaved"
    tile: int = 1
    descriptor_order: str = "atom-major"
    half_symmetry: bool = False
    transpose_before_Y: bool = False
    du_fission_per_direction: bool = False
    fuse_dU_with_force: bool = False
    materialize: frozenset = field(default_factory=frozenset)
    accumulation: str = "serialized"
    aligned_complex: bool = False

    def __post_init__(self):
        object.__setattr__(self, "materialize", frozenset(self.materialize))
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ValueError(f"variant {self.name!r}: {msg}")

        if self.pipeline not in ("baseline", "adjoint"):
            bad(f"unknown pipeline {self.pipeline!r}")
        if self.staging not in STAGINGS:
            bad(f"unknown staging {self.staging!r}")
        if self.parallel_axes not in AXES:
            bad(f"unknown parallel axes {self.parallel_axes!r}")
        if self.index_order not in ORDERS:
            bad(f"unknown index order {self.index_order!r}")
        if self.layout not in LAYOUTS:
            bad(f"unknown layout {self.layout!r}")
        if self.descriptor_order not in ("atom-major", "atom-fastest"):
            bad(f"unknown descriptor order {self.descriptor_order!r}")
        if self.accumulation not in ACCUMULATIONS:
            bad(f"unknown accumulation {self.accumulation!r}")
        if not self.materialize <= MATERIALIZABLE:
            bad(f"cannot materialize {sorted(self.materialize - MATERIALIZABLE)}")
        if int(self.tile) != self.tile or self.tile < 1:
            bad("tile must be a positive integer")
        if self.layout != "aosoa" and self.tile != 1:
            bad("tile width only applies to the aosoa layout")
        if self.layout == "aosoa" and self.descriptor_order != "atom-major":
            bad("aosoa fixes the atom order inside tiles")
        if self.fuse_dU_with_force and "dUlist" in self.materialize:
            bad("a fused force kernel never stores dUlist")
        if self.du_fission_per_direction and not self.fuse_dU_with_force:
            bad("per-direction fission applies to the fused force kernel")
        if self.accumulation != "serialized":
            if self.parallel_axes == "atoms" or "Ulist" not in self.materialize:
                bad(f"{self.accumulation} accumulation needs pair-parallel U with a stored Ulist")
        if self.pipeline == "adjoint":
            if "Zlist" in self.materialize:
                bad("the adjoint pipeline never stores Zlist")
            if self.staging == "monolithic":
                bad("the adjoint pipeline is staged")
            if self.half_symmetry and not self.transpose_before_Y:
                bad("half-stored Ulisttot is expanded by the transpose before Y")
            if not self.fuse_dU_with_force and "dUlist" not in self.materialize:
                bad("staged dE reads a stored dUlist")
        else:
            if "Zlist" not in self.materialize:
                bad("the baseline pipeline stores Zlist")
            if (self.layout != "interleaved" or self.descriptor_order != "atom-major"
                    or self.half_symmetry or self.transpose_before_Y
                    or self.fuse_dU_with_force):
                bad("baseline runs on the plain interleaved full-block layout")
            if self.staging == "fissioned" and "dUlist" not in self.materialize:
                bad("staged baseline reads a stored dUlist")

    @property
    def split_planes(self) -> bool:
        return self.layout in ("split", "aosoa")

    def descriptor_layout(self, natoms: int, n: int) -> "LayoutView":
        """Layout of Ylist (and of Ulisttot as read by Y)."""
        return LayoutView(natoms, n, self.layout, self.tile,
                          atom_fastest=self.descriptor_order == "atom-fastest",
                          split=self.split_planes)

    def accumulation_layout(self, natoms: int, n: int) -> "LayoutView":
        """Layout Ulisttot is summed into.

        With a transpose before Y the sums go to an atom-major buffer (one
        contiguous slab per atom), otherwise straight to the Y input layout.
        """
        if self.transpose_before_Y:
            return LayoutView(natoms, n, "split" if self.split_planes else "interleaved")
        return self.descriptor_layout(natoms, n)


def builtin_variants() -> list[VariantSpec]:
    """The optimization ladder: baseline, V1..V7 (cumulative) and fused."""
    base = VariantSpec(
        name="baseline-z", pipeline="baseline", staging="monolithic",
        materialize=frozenset({"Zlist"}),
    )
    v1 = VariantSpec(name="v1", materialize=frozenset({"Ulist", "dUlist"}))
    v2 = replace(v1, name="v2", parallel_axes="atoms*neighbors", accumulation="concurrent-rmw")
    v3 = replace(v2, name="v3", descriptor_order="atom-fastest")
    v4 = replace(v3, name="v4", index_order="atom-fastest")
    v5 = replace(v4, name="v5", parallel_axes="atoms*neighbors*index")
    v6 = replace(v5, name="v6", transpose_before_Y=True)
    v7 = replace(v6, name="v7", aligned_complex=True)
    fused = VariantSpec(
        name="fused", parallel_axes="atoms*neighbors*index", index_order="atom-fastest",
        layout="aosoa", tile=32, half_symmetry=True, transpose_before_Y=True,
        du_fission_per_direction=True, fuse_dU_with_force=True, materialize=frozenset(),
        accumulation="serialized", aligned_complex=True,
    )
    return [base, v1, v2, v3, v4, v5, v6, v7, fused]


def variant_names() -> list[str]:
    return [v.name for v in builtin_variants()]


def get_variant(name: str) -> VariantSpec:
    for v in builtin_variants():
        if v.name == name:
            return v
    raise KeyError(f"unknown variant {name!r}; choose from {', '.join(variant_names())}")


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutView:
    """Physical placement of a logical ``(natoms, n)`` complex array.

    ``kind`` is ``interleaved`` (real and imaginary adjacent), ``split`` (two
    real planes) or ``aosoa`` (atoms grouped in tiles of ``tile`` lanes with
    the lane index innermost).  ``split`` chooses the plane arrangement for
    ``aosoa``; ``atom_fastest`` puts the atom index innermost for the
    untiled kinds.
    """

    natoms: int
    n: int
    kind: str = "interleaved"
    tile: int = 1
    atom_fastest: bool = False
    split: bool | None = None

    def __post_init__(self):
        if self.kind not in LAYOUTS:
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if self.natoms < 0 or self.n < 0:
            raise ValueError("extents must be non-negative")
        if int(self.tile) != self.tile or self.tile < 1:
            raise ValueError("tile must be a positive integer")
        if self.kind != "aosoa" and self.tile != 1:
            raise ValueError("tile width only applies to aosoa")
        if self.kind == "aosoa" and self.atom_fastest:
            raise ValueError("aosoa fixes the atom order inside tiles")
        if self.split is None:
            object.__setattr__(self, "split", self.kind != "interleaved")
        elif self.kind == "split" and not self.split:
            raise ValueError("split layout has separate planes")
        elif self.kind == "interleaved" and self.split:
            raise ValueError("interleaved layout has no planes")

    @property
    def ntiles(self) -> int:
        return -(-self.natoms // self.tile)

    @property
    def padded_natoms(self) -> int:
        return self.ntiles * self.tile

    @property
    def padding(self) -> int:
        return self.padded_natoms - self.natoms

    @property
    def size(self) -> int:
        """Float64 slots in the physical buffer."""
        return 2 * self.padded_natoms * self.n

    @property
    def nbytes(self) -> int:
        return self.size * REAL_BYTES

    @property
    def strides(self) -> np.ndarray:
        """Kernel stride tuple ``(tile, s_tile, s_lane, s_idx, s_part)``."""
        N, n, T = self.padded_natoms, self.n, self.tile
        if self.kind == "aosoa":
            if self.split:
                s = (T, n * T, 1, T, self.ntiles * n * T)
            else:
                s = (T, 2 * n * T, 2, 2 * T, 1)
        elif self.split:
            s = (1, 1, 0, N, N * n) if self.atom_fastest else (1, n, 0, 1, N * n)
        else:
            s = (1, 2, 0, 2 * N, 1) if self.atom_fastest else (1, 2 * n, 0, 2, 1)
        return np.array(s, dtype=np.int64)

    def offsets(self) -> np.ndarray:
        """Physical slot of the real part of every logical ``(atom, element)``."""
        T, s_tile, s_lane, s_idx, _ = (int(x) for x in self.strides)
        a = np.arange(self.natoms)[:, None]
        e = np.arange(self.n)[None, :]
        return (a // T) * s_tile + (a % T) * s_lane + e * s_idx

    def allocate(self, aligned: bool = True) -> np.ndarray:
        return aligned_zeros(self.size, aligned)


def aligned_zeros(count: int, aligned: bool = True) -> np.ndarray:
    """Zeroed float64 buffer.

    ``aligned`` puts the first element on a 64-byte boundary; otherwise the
    start is deliberately 8 bytes past a 16-byte boundary so that complex
    elements straddle 16-byte lines.
    """
    raw = np.zeros(count * REAL_BYTES + ALIGNMENT + REAL_BYTES, dtype=np.uint8)
    off = (-raw.ctypes.data) % ALIGNMENT
    if not aligned:
        off += REAL_BYTES
    return raw[off : off + count * REAL_BYTES].view(np.float64)


def pack(values: np.ndarray, layout: LayoutView, out: np.ndarray | None = None) -> np.ndarray:
    values = np.asarray(values)
    if values.shape != (layout.natoms, layout.n):
        raise ValueError(f"expected extents {(layout.natoms, layout.n)}, got {values.shape}")
    buf = layout.allocate() if out is None else out
    if buf.size != layout.size:
        raise ValueError("buffer size does not match the layout")
    off = layout.offsets()
    s_part = int(layout.strides[4])
    buf[off] = values.real
    buf[off + s_part] = values.imag
    return buf


def unpack(buffer: np.ndarray, layout: LayoutView) -> np.ndarray:
    buffer = np.asarray(buffer)
    if buffer.size != layout.size:
        raise ValueError(f"layout needs {layout.size} slots, buffer has {buffer.size}")
    off = layout.offsets()
    s_part = int(layout.strides[4])
    out = np.empty((layout.natoms, layout.n), dtype=np.complex128)
    out.real = buffer[off]
    out.imag = buffer[off + s_part]
    return out


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------


class MemoryBudgetError(MemoryError):
    """The arrays a variant needs exceed the configured budget."""

    def __init__(self, required: int, budget: int, arrays: dict):
        self.required = int(required)
        self.budget = int(budget)
        self.arrays = dict(arrays)
        top = max(arrays, key=arrays.get) if arrays else "-"
        super().__init__(
            f"needs {self.required:,} bytes ({top}: {arrays.get(top, 0):,}) "
            f"but the budget is {self.budget:,}"
        )


class AllocationTracker:
    """Records every named array a pipeline run allocates."""

    def __init__(self):
        self.arrays: dict[str, int] = {}

    def zeros(self, name: str, count: int, aligned: bool = True) -> np.ndarray:
        buf = aligned_zeros(count, aligned)
        self.arrays[name] = self.arrays.get(name, 0) + buf.nbytes
        return buf

    def layout(self, name: str, view: LayoutView, aligned: bool = True) -> np.ndarray:
        return self.zeros(name, view.size, aligned)

    @property
    def total(self) -> int:
        return sum(self.arrays.values())


def array_bytes(variant: VariantSpec, natoms: int, maxnb: int, twojmax: int,
                workers: int = 1) -> dict[str, int]:
    """Analytic bytes of every named array ``run_pipeline`` allocates.

    Scratch buffers private to one pair or one atom are not counted.
    """
    ctx = context(twojmax)
    nu, nh, nz, nb = ctx.maps.n_u, ctx.maps.n_u_half, ctx.maps.n_z, ctx.maps.n_b
    npairs = natoms * maxnb
    out: dict[str, int] = {}
    if variant.pipeline == "baseline":
        out["Ulisttot"] = natoms * nu * COMPLEX_BYTES
        if "Ulist" in variant.materialize:
            out["Ulist"] = npairs * nu * COMPLEX_BYTES
        out["Zlist"] = natoms * nz * COMPLEX_BYTES
        out["Blist"] = natoms * nb * REAL_BYTES
        if variant.staging == "fissioned":
            out["dUlist"] = npairs * 3 * nu * COMPLEX_BYTES
            out["dBlist"] = npairs * nb * 3 * REAL_BYTES
    else:
        nstore = nh if variant.half_symmetry else nu
        acc = variant.accumulation_layout(natoms, nstore)
        out["Ulisttot"] = acc.nbytes
        if "Ulist" in variant.materialize:
            out["Ulist"] = npairs * nstore * COMPLEX_BYTES
        if variant.accumulation == "privatized":
            out["Ulisttot_partials"] = workers * natoms * nstore * COMPLEX_BYTES
        if variant.transpose_before_Y:
            out["Ulisttot_T"] = variant.descriptor_layout(natoms, nu).nbytes
        out["Ylist"] = variant.descriptor_layout(natoms, nstore).nbytes
        if "dUlist" in variant.materialize:
            out["dUlist"] = npairs * 3 * nstore * COMPLEX_BYTES
    out["dElist"] = npairs * 3 * REAL_BYTES
    out["forces"] = natoms * 3 * REAL_BYTES
    return out


# ---------------------------------------------------------------------------
# analytic work model
# ---------------------------------------------------------------------------

# flops per stored element: recursion step (two complex products with
# real prefactors), derivative step (product rule doubles it), weighting
U_REC_FLOPS = 18
DU_REC_FLOPS = 36
DU_WEIGHT_FLOPS = 8
ACC_FLOPS = 4
CG_TERM_FLOPS = 8
DOT_FLOPS = 4


@lru_cache(maxsize=None)
def _cg_terms(twojmax: int) -> tuple[int, int]:
    """Inner Clebsch-Gordan terms summed over all coupling triples: full, half rows."""
    full = half = 0
    for j1, j2, j in context(twojmax).maps.coupling_triples:
        jsum = (j1 + j2 - j) // 2
        cnt = [min(j1, m + jsum) - max(0, m + jsum - j2) + 1 for m in range(j + 1)]
        row = sum(cnt)
        for mb in range(j + 1):
            full += cnt[mb] * row
            if mb <= j // 2:
                half += cnt[mb] * row
    return full, half


def _work_model(variant: VariantSpec, natoms: int, npairs: int, twojmax: int,
                arrays: dict[str, int]) -> tuple[dict[str, float], dict[str, float]]:
    ctx = context(twojmax)
    nu, nh, nb = ctx.maps.n_u, ctx.maps.n_u_half, ctx.maps.n_b
    nstore = nh if variant.half_symmetry else nu
    u_pair = U_REC_FLOPS * (nh - 1)
    du_dir = DU_REC_FLOPS * (nh - 1) + DU_WEIGHT_FLOPS * nu
    tfull, thalf = _cg_terms(twojmax)
    flops: dict[str, float] = {}
    moved: dict[str, float] = {}
    b = arrays.get
    if variant.pipeline == "baseline":
        bdot = sum((j + 1) ** 2 for _, _, j in ctx.maps.z_triples)
        dbdot = sum((j + 1) ** 2 + (j1 + 1) ** 2 + (j2 + 1) ** 2
                    for j1, j2, j in ctx.maps.z_triples)
        flops["U"] = npairs * (u_pair + ACC_FLOPS * nu)
        flops["Z"] = natoms * CG_TERM_FLOPS * tfull
        flops["B"] = natoms * DOT_FLOPS * bdot
        flops["dU"] = npairs * 3 * du_dir
        flops["dB"] = npairs * 3 * DOT_FLOPS * dbdot
        flops["dE"] = npairs * 3 * 2 * nb
        moved["U"] = b("Ulisttot") + b("Ulist", 0)
        moved["Z"] = b("Ulisttot") + b("Zlist")
        moved["B"] = b("Zlist") + b("Ulisttot") + b("Blist")
        moved["dU"] = b("dUlist", 0)
        moved["dB"] = b("Zlist") + b("dUlist", 0) + b("dBlist", 0)
        moved["dE"] = b("dBlist", 0) + b("dElist")
    else:
        flops["U"] = npairs * (u_pair + ACC_FLOPS * nstore)
        if variant.transpose_before_Y:
            flops["transpose"] = 0.0
            moved["transpose"] = b("Ulisttot") + b("Ulisttot_T")
        flops["Y"] = natoms * CG_TERM_FLOPS * thalf
        npass = 3 if variant.du_fission_per_direction else 1
        dE = npairs * 3 * (du_dir + DOT_FLOPS * nstore)
        if variant.fuse_dU_with_force:
            dE += npairs * npass * u_pair
        else:
            dE += npairs * u_pair
        flops["dE"] = dE
        moved["U"] = b("Ulisttot") + b("Ulist", 0) + b("Ulisttot_partials", 0)
        moved["Y"] = b("Ulisttot_T", b("Ulisttot")) + b("Ylist")
        moved["dE"] = b("Ylist") + 2 * b("dUlist", 0) + b("dElist")
    flops["forces"] = npairs * 6
    moved["forces"] = b("dElist") + b("forces")
    return flops, moved


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    variant: str
    mode: str
    forces: np.ndarray
    energies: np.ndarray
    energy: float
    delist: np.ndarray
    timings: dict
    array_bytes: dict
    flops: dict
    bytes_moved: dict
    accumulation: str
    workers: int
    summaries: dict
    state: DescriptorState | None = None

    @property
    def force_checksum(self) -> float:
        return float(np.abs(self.forces).sum())

    @property
    def force_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.forces).tobytes()).hexdigest()

    @property
    def peak_bytes(self) -> int:
        return sum(self.array_bytes.values())

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def resolve_workers(workers: int | None = None) -> int:
    """Explicit value, else ``SNAPFORGE_WORKERS``, else the CPU count."""
    if workers is None:
        env = os.environ.get("SNAPFORGE_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    workers = int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


class _Clock:
    def __init__(self):
        self.t: dict[str, float] = {}

    def __call__(self, name, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        self.t[name] = self.t.get(name, 0.0) + time.perf_counter() - t0
        return out


def _summary(name, values) -> dict:
    v = np.asarray(values)
    return {
        "shape": list(v.shape),
        "dtype": str(v.dtype),
        "abs_sum": float(np.abs(v).sum()),
    }


def run_pipeline(problem: Problem, variant: VariantSpec | str, mode: str = "deterministic",
                 workers: int | None = None, memory_budget: int | None = None,
                 keep_state: bool = False) -> PipelineResult:
    """Run one variant end to end.

    In ``deterministic`` mode a concurrent read-modify-write accumulation is
    replaced by the serialized one so that sums run in neighbor-list order.
    ``memory_budget`` (bytes) is checked against :func:`array_bytes` before
    anything is allocated.
    """
    if isinstance(variant, str):
        variant = get_variant(variant)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    variant.validate()
    nworkers = resolve_workers(workers)
    acc = variant.accumulation
    if mode == "deterministic" and acc == "concurrent-rmw":
        acc = "serialized"
    spec = replace(variant, accumulation=acc) if acc != variant.accumulation else variant
    p = problem.params
    natoms, maxnb = problem.natoms, problem.maxnb
    need = array_bytes(spec, natoms, maxnb, p.twojmax, nworkers)
    if memory_budget is not None and sum(need.values()) > memory_budget:
        raise MemoryBudgetError(sum(need.values()), memory_budget, need)

    prev = numba.get_num_threads()
    numba.set_num_threads(max(1, min(nworkers, numba.config.NUMBA_NUM_THREADS)))
    try:
        if spec.pipeline == "baseline":
            out = _run_baseline(problem, spec, nworkers, keep_state)
        else:
            out = _run_adjoint(problem, spec, nworkers, keep_state)
    finally:
        numba.set_num_threads(prev)
    forces, energies, delist, timings, tracker, summaries, state = out
    npairs = int(problem.counts.sum())
    flops, moved = _work_model(spec, natoms, npairs, p.twojmax, tracker.arrays)
    return PipelineResult(
        variant=variant.name, mode=mode, forces=forces, energies=energies,
        energy=float(energies.sum()), delist=delist, timings=timings,
        array_bytes=dict(tracker.arrays), flops=flops, bytes_moved=moved,
        accumulation=acc, workers=nworkers, summaries=summaries, state=state,
    )


def _run_baseline(problem: Problem, spec: VariantSpec, nworkers: int, keep_state: bool):
    p = problem.params
    ctx = context(p.twojmax)
    natoms, maxnb = problem.natoms, problem.maxnb
    nu, nz, nb = ctx.maps.n_u, ctx.maps.n_z, ctx.maps.n_b
    disp, cnt, w = problem.displacements, problem.counts, problem.neighbor_weights
    mem = AllocationTracker()
    clock = _Clock()
    al = spec.aligned_complex
    lay = LayoutView(natoms, nu)
    tot = mem.layout("Ulisttot", lay, al)
    zbuf = mem.zeros("Zlist", natoms * nz * 2, al)
    zlist = zbuf.reshape(natoms, nz, 2)
    blist = mem.zeros("Blist", natoms * nb).reshape(natoms, nb)
    resid = np.zeros(natoms)
    common = (p.rcut, p.rmin0, p.rfac0)
    order = 0 if spec.index_order == "neighbor-fastest" else 1
    ulist = dul = dbl = None
    if spec.staging == "monolithic":
        delist = mem.zeros("dElist", natoms * maxnb * 3).reshape(natoms, maxnb, 3)
        clock("monolithic", K.baseline_monolithic, disp, cnt, w, *common, p.wself,
              p.self_contribution, p.twojmax, ctx.blk, ctx.hblk, ctx.rootpq, ctx.cg.values,
              ctx.ctrip, ctx.cgo, ctx.zo, ctx.btrip, ctx.bz, ctx.dbt, p.beta, tot,
              lay.strides, zlist, blist, resid, delist)
    else:
        ulist = _accumulate_u(problem, spec, ctx, tot, lay.strides, False, nworkers, mem,
                              clock, order)
        clock("Z", K.z_full, tot, lay.strides, ctx.cg.values, ctx.ctrip, ctx.cgo, ctx.zo,
              ctx.blk, zlist)
        clock("B", K.b_from_z, zlist, tot, lay.strides, ctx.btrip, ctx.bz, ctx.blk, blist,
              resid)
        dul = mem.zeros("dUlist", natoms * maxnb * 3 * nu * 2, al).reshape(
            natoms * maxnb, 3, nu, 2)
        clock("dU", K.du_pairs, disp, cnt, w, *common, p.twojmax, ctx.blk, ctx.hblk,
              ctx.rootpq, False, dul, order)
        dbl = mem.zeros("dBlist", natoms * maxnb * nb * 3).reshape(natoms, maxnb, nb, 3)
        clock("dB", K.db_from_dulist, zlist, dul, cnt, maxnb, ctx.btrip, ctx.dbt, ctx.zo,
              ctx.blk, dbl, order)
        delist = mem.zeros("dElist", natoms * maxnb * 3).reshape(natoms, maxnb, 3)
        clock("dE", K.de_from_db, dbl, cnt, p.beta, delist)
    scale = max(1.0, float(np.abs(blist).max(initial=0.0)))
    if resid.max(initial=0.0) > B_IMAG_TOL * scale:
        raise FloatingPointError(f"bispectrum imaginary residue {resid.max():.3e}")
    forces = mem.zeros("forces", natoms * 3).reshape(natoms, 3)
    clock("forces", K.scatter_forces, delist, cnt, problem.neighbors, forces)
    energies = blist @ p.beta
    utot = unpack(tot, lay)
    summaries = {"Ulisttot": _summary("Ulisttot", utot), "Zlist": _summary("Zlist", zbuf),
                 "Blist": _summary("Blist", blist), "dElist": _summary("dElist", delist)}
    state = None
    if keep_state:
        state = DescriptorState(
            ulisttot=utot, zlist=zlist.view(np.complex128)[..., 0].copy(), blist=blist.copy(),
            ulist=None if ulist is None else ulist.view(np.complex128)[..., 0].copy(),
            dulist=None if dul is None else dul.view(np.complex128)[..., 0].copy(),
            dblist=None if dbl is None else dbl.copy(), delist=delist.copy(),
            forces=forces.copy(),
        )
    return forces.copy(), energies, delist.copy(), clock.t, mem, summaries, state


def _accumulate_u(problem, spec, ctx, tot, lay, half, nworkers, mem, clock, order):
    """Fill ``tot`` per the variant's U strategy; returns the Ulist buffer or None."""
    p = problem.params
    natoms, maxnb = problem.natoms, problem.maxnb
    n = ctx.n_elements(half)
    disp, cnt, w = problem.displacements, problem.counts, problem.neighbor_weights
    common = (p.rcut, p.rmin0, p.rfac0)
    store = "Ulist" in spec.materialize
    ulist = None
    if store:
        ulist = mem.zeros("Ulist", natoms * maxnb * n * 2, spec.aligned_complex).reshape(
            natoms * maxnb, n, 2)
    if spec.parallel_axes == "atoms" or not store:
        dummy = ulist if store else np.zeros((1, n, 2))
        clock("U", K.u_tot_atoms, disp, cnt, w, *common, p.wself, p.self_contribution,
              p.twojmax, ctx.blk, ctx.hblk, ctx.rootpq, half, tot, lay, store, dummy, order)
        return ulist
    clock("U", K.u_pairs, disp, cnt, w, *common, p.twojmax, ctx.blk, ctx.hblk, ctx.rootpq,
          half, ulist, order)
    selfargs = (p.twojmax, ctx.blk, ctx.hblk, half, p.wself, p.self_contribution)
    if spec.accumulation == "serialized":
        clock("U", K.tot_from_ulist_serial, ulist, cnt, maxnb, p.wself, p.self_contribution,
              p.twojmax, ctx.blk, ctx.hblk, half, tot, lay, order)
    elif spec.accumulation == "privatized":
        partial = mem.zeros("Ulisttot_partials", nworkers * natoms * n * 2).reshape(
            nworkers, natoms, n, 2)
        clock("U", K.tot_from_ulist_private, ulist, cnt, maxnb, nworkers, partial, order)
        clock("U", K.reduce_partials, partial, p.wself, p.self_contribution, *selfargs[:4],
              tot, lay)
    else:
        clock("U", _rmw_accumulate, ulist, cnt, maxnb, natoms, order, tot, lay, nworkers,
              selfargs)
    return ulist


def _rmw_accumulate(ulist, cnt, maxnb, natoms, order, tot, lay, nworkers, selfargs):
    """Worker threads add pairs into shared totals under striped locks."""
    K.init_self_all(natoms, tot, lay, *selfargs)
    its = np.arange(natoms * maxnb)
    if order == 0:
        atoms, nbs = its // maxnb, its % maxnb
    else:
        atoms, nbs = its % natoms, its // natoms
    keep = nbs < cnt[atoms]
    its, atoms = its[keep], atoms[keep]
    locks = [threading.Lock() for _ in range(LOCK_STRIPES)]

    def work(lo, hi):
        for it, a in zip(its[lo:hi].tolist(), atoms[lo:hi].tolist()):
            with locks[a % LOCK_STRIPES]:
                K.add_pair_rmw(ulist, it, a, tot, lay)

    # interleave small chunks so workers really contend for the same atoms
    step = max(1, min(256, len(its) // (4 * nworkers) or 1))
    bounds = [(lo, min(len(its), lo + step)) for lo in range(0, len(its), step)]
    with ThreadPoolExecutor(max_workers=nworkers) as pool:
        list(pool.map(lambda b: work(*b), bounds))


def _run_adjoint(problem: Problem, spec: VariantSpec, nworkers: int, keep_state: bool):
    p = problem.params
    ctx = context(p.twojmax)
    natoms, maxnb = problem.natoms, problem.maxnb
    half = spec.half_symmetry
    nu = ctx.maps.n_u
    n = ctx.n_elements(half)
    disp, cnt, w = problem.displacements, problem.counts, problem.neighbor_weights
    common = (p.rcut, p.rmin0, p.rfac0)
    order = 0 if spec.index_order == "neighbor-fastest" else 1
    al = spec.aligned_complex
    mem = AllocationTracker()
    clock = _Clock()

    acc_lay = spec.accumulation_layout(natoms, n)
    tot = mem.layout("Ulisttot", acc_lay, al)
    ulist = _accumulate_u(problem, spec, ctx, tot, acc_lay.strides, half, nworkers, mem,
                          clock, order)

    if spec.transpose_before_Y:
        yin_lay = spec.descriptor_layout(natoms, nu)
        yin = mem.layout("Ulisttot_T", yin_lay, al)
        clock("transpose", K.relayout, tot, acc_lay.strides, half, yin, yin_lay.strides,
              False, natoms, p.twojmax, ctx.blk, ctx.hblk)
    else:
        yin_lay, yin = acc_lay, tot

    y_lay = spec.descriptor_layout(natoms, n)
    y = mem.layout("Ylist", y_lay, al)
    bcoef = ctx.bcoef(p.beta)
    yargs = (yin, yin_lay.strides, ctx.cg.values, ctx.ctrip, ctx.cgo, ctx.blk, ctx.hblk, bcoef,
             y, y_lay.strides, half, natoms, p.twojmax)
    if spec.layout == "aosoa":
        clock("Y", K.y_tiles, *yargs)
    elif spec.parallel_axes == "atoms*neighbors*index":
        clock("Y", K.y_atom_level, *yargs, ctx.level_start, ctx.level_triples)
    else:
        clock("Y", K.y_atoms, *yargs)

    delist = mem.zeros("dElist", natoms * maxnb * 3).reshape(natoms, maxnb, 3)
    dul = None
    if spec.fuse_dU_with_force:
        clock("dE", K.fused_de, disp, cnt, w, *common, p.twojmax, ctx.blk, ctx.hblk,
              ctx.rootpq, y, y_lay.strides, half, half, spec.du_fission_per_direction,
              delist, order)
    else:
        dul = mem.zeros("dUlist", natoms * maxnb * 3 * n * 2, al).reshape(
            natoms * maxnb, 3, n, 2)
        clock("dU", K.du_pairs, disp, cnt, w, *common, p.twojmax, ctx.blk, ctx.hblk,
              ctx.rootpq, half, dul, order)
        clock("dE", K.de_from_dulist, dul, cnt, maxnb, y, y_lay.strides, half, half,
              p.twojmax, ctx.blk, ctx.hblk, delist, order)
    forces = mem.zeros("forces", natoms * 3).reshape(natoms, 3)
    clock("forces", K.scatter_forces, delist, cnt, problem.neighbors, forces)

    t0 = time.perf_counter()
    yv = unpack(y, y_lay)
    uv = unpack(tot, acc_lay)
    energies = adjoint_energy(yv, uv, p.twojmax, half=half)
    clock.t["energy"] = time.perf_counter() - t0

    summaries = {"Ulisttot": _summary("Ulisttot", uv), "Ylist": _summary("Ylist", yv),
                 "dElist": _summary("dElist", delist)}
    state = None
    if keep_state:
        state = DescriptorState(
            ulisttot=uv, ylist=yv, delist=delist.copy(), forces=forces.copy(),
            ulist=None if ulist is None else _pairs_complex(ulist, natoms, maxnb, order),
            dulist=None if dul is None else _pairs_complex(dul, natoms, maxnb, order),
        )
    return forces.copy(), energies, delist.copy(), clock.t, mem, summaries, state


def _pairs_complex(buf, natoms, maxnb, order):
    """Pair-slot buffer ``(npairs, ..., 2)`` as ``(natoms, maxnb, ...)`` complex."""
    c = buf.view(np.complex128)[..., 0]
    rest = c.shape[1:]
    if order == 1:
        c = c.reshape((maxnb, natoms) + rest).swapaxes(0, 1)
    return np.ascontiguousarray(c.reshape((natoms, maxnb) + rest))
