"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line before asserting; the lines are
printed together at the end of the pytest run (see ``conftest.py``).
"""

import pytest

from conftest import ACCEPTANCE_LINES, physical_problem, synthetic_problem
from snapforge.constants import (
    CROSS_PIPELINE_RTOL,
    DETERMINISTIC_VARIANT_RTOL,
    FD_FORCE_RTOL,
    ROTATION_RTOL,
    VARIANT_RTOL,
    WIGNER_DIRECT_TOL,
)
from snapforge.exec_variants import run_pipeline, variant_names
from snapforge.halfint_index import (
    enumerate_bispectrum_triples,
    enumerate_coupling_triples,
    u_total_elements,
)
from snapforge.harness import BenchConfig, memory_report, run_benchmark
from snapforge.oracle import (
    cross_pipeline_check,
    fd_force_check,
    relative_error,
    rotation_invariance_check,
    wigner_recursion_check,
)

SPEEDUP_TARGET = 1.5
SERIALIZED_LADDER = ("v1", "v2", "v3", "v4", "v5", "v6", "v7")


def record(k, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {k:2d} {name}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def ladder_runs():
    p = synthetic_problem(256, 26, 8, seed=0)
    runs = {n: run_pipeline(p, n, mode="deterministic", workers=4) for n in variant_names()}
    again = {n: run_pipeline(p, n, mode="deterministic", workers=4) for n in variant_names()}
    return p, runs, again


def test_01_triple_counts():
    got = {J: len(enumerate_bispectrum_triples(J)) for J in (0, 2, 8, 14)}
    want = {0: 1, 2: 5, 8: 55, 14: 204}
    ok = record(1, "bispectrum triple counts", got == want, f"{got}")
    assert ok


def test_02_baseline_vs_adjoint():
    worst, count = 0.0, 0
    for seed in range(21):
        J = (2, 4, 8)[seed % 3]
        natoms = (8, 24, 64)[(seed // 3) % 3]
        p = synthetic_problem(natoms, 10, J, seed=100 + seed)
        worst = max(worst, cross_pipeline_check(p).max_rel_error)
        count += 1
    ok = record(2, "baseline vs adjoint forces and energies", worst <= CROSS_PIPELINE_RTOL,
                f"{count} problems, max_rel_err={worst:.3e} tol={CROSS_PIPELINE_RTOL:.0e}")
    assert ok


def test_03_finite_difference_forces():
    worst, count = 0.0, 0
    for seed in range(6):
        J = (4, 8)[seed % 2]
        r = fd_force_check(physical_problem(8, J, seed=seed))
        worst = max(worst, r.max_rel_error)
        count += 1
    ok = record(3, "analytic vs finite-difference forces", worst <= FD_FORCE_RTOL,
                f"{count} problems, max_rel_err={worst:.3e} tol={FD_FORCE_RTOL:.0e}")
    assert ok


def test_04_rotation_invariance():
    p = synthetic_problem(32, 16, 8, seed=3)
    worst = max(rotation_invariance_check(p, seed).max_rel_error for seed in range(10))
    ok = record(4, "bispectrum rotation invariance", worst <= ROTATION_RTOL,
                f"10 rotations, max_rel_err={worst:.3e} tol={ROTATION_RTOL:.0e}")
    assert ok


def test_05_variants_agree(ladder_runs):
    _, runs, _ = ladder_runs
    ref = runs["baseline-z"].forces
    vs_base = max(relative_error(r.forces, ref) for r in runs.values())
    lad = runs["v1"].forces
    among = max(relative_error(runs[n].forces, lad) for n in SERIALIZED_LADDER)
    ok = vs_base <= VARIANT_RTOL and among <= DETERMINISTIC_VARIANT_RTOL
    record(5, "variant agreement (256 atoms, 26 nbrs, 2J=8)", ok,
           f"vs baseline {vs_base:.3e} (tol {VARIANT_RTOL:.0e}), "
           f"serialized ladder {among:.3e} (tol {DETERMINISTIC_VARIANT_RTOL:.0e})")
    assert ok


def test_06_memory_model():
    ok, parts = True, []
    for J in (8, 14):
        cfg = BenchConfig(natoms=2000, nnbor=26, twojmax=J, workers=4)
        base = sum(memory_report(cfg, "baseline-z").values())
        fused = memory_report(cfg, "fused")
        z = memory_report(cfg, "baseline-z")["Zlist"]
        y = memory_report(cfg, "v1")["Ylist"]
        nz = sum((j + 1) ** 2 for _, _, j in enumerate_coupling_triples(J))
        ratio_ok = z / y == nz / u_total_elements(J)
        ok &= sum(fused.values()) < base and fused["Ylist"] < z and ratio_ok
        parts.append(f"2J={J}: baseline {base:,} B, fused {sum(fused.values()):,} B, "
                     f"Z/Y {z / y:.2f}")
    record(6, "adjoint memory below baseline", ok, "; ".join(parts))
    assert ok


def test_07_fused_has_no_pair_arrays(ladder_runs):
    _, runs, _ = ladder_runs
    fused = runs["fused"]
    err = relative_error(fused.forces, runs["baseline-z"].forces)
    stored = sorted(set(fused.array_bytes) & {"Ulist", "dUlist", "Zlist"})
    ok = not stored and err <= VARIANT_RTOL
    record(7, "fused variant stores no Ulist/dUlist", ok,
           f"stored pair arrays {stored or 'none'}, max_rel_err={err:.3e}")
    assert ok


def test_08_wigner_recursion():
    r = wigner_recursion_check(8, seed=0, samples=20)
    ok = record(8, "Wigner recursion vs direct formula", r.max_rel_error <= WIGNER_DIRECT_TOL,
                f"max_abs_err={r.max_rel_error:.3e} tol={WIGNER_DIRECT_TOL:.0e}")
    assert ok


def test_09_deterministic_checksums(ladder_runs):
    _, runs, again = ladder_runs
    rerun = all(runs[n].force_digest == again[n].force_digest for n in runs)
    layouts = {runs[n].force_digest for n in SERIALIZED_LADDER}
    ok = rerun and len(layouts) == 1
    record(9, "bitwise force checksums", ok,
           f"repeat runs identical={rerun}, distinct digests across layouts={len(layouts)}")
    assert ok


def test_10_fused_speedup():
    cfg = BenchConfig(natoms=2000, nnbor=26, twojmax=8, steps=3, workers=4,
                      variants=("baseline-z", "fused"))
    base, fused = run_benchmark(cfg)
    ratio = fused.katom_steps_per_s / base.katom_steps_per_s
    ok = record(10, "fused grind-speed speedup", ratio >= SPEEDUP_TARGET,
                f"{ratio:.2f}x (baseline {base.wall_ms_per_step:.0f} ms/step, "
                f"fused {fused.wall_ms_per_step:.0f} ms/step, target {SPEEDUP_TARGET}x)")
    assert ok
