"""Climbing the optimization ladder.

Each rung changes one thing about how the adjoint pipeline is executed:
what runs in parallel, which index is fastest in memory, whether complex
numbers are split into planes, and finally whether dU is ever stored.  All
rungs produce the same forces; the timings and the memory footprint move.
"""

from snapforge.exec_variants import builtin_variants, run_pipeline
from snapforge.harness import BenchConfig, generate_problem
from snapforge.oracle import relative_error

problem = generate_problem(BenchConfig(natoms=512, nnbor=26, twojmax=8, seed=0))

# single timed runs, so expect some noise between rungs
# warm the compiled kernels so the first rung is not charged for compilation
for spec in builtin_variants():
    run_pipeline(problem, spec, workers=1)

ref = None
print(f"{'variant':<11}{'ms':>9}{'MB':>9}{'rel err':>11}  changes")
for spec in builtin_variants():
    r = run_pipeline(problem, spec, workers=1)
    ref = r.forces if ref is None else ref
    notes = []
    if spec.pipeline == "baseline":
        notes.append("stores Z")
    else:
        notes.append(spec.parallel_axes)
        if spec.descriptor_order == "atom-fastest":
            notes.append("descriptors atom-fastest")
        if spec.index_order == "atom-fastest":
            notes.append("pairs atom-fastest")
        if spec.transpose_before_Y:
            notes.append("transpose")
        if spec.aligned_complex:
            notes.append("aligned")
        if spec.layout == "aosoa":
            notes.append(f"aosoa x{spec.tile}")
        if spec.fuse_dU_with_force:
            notes.append("fused dU")
    print(f"{spec.name:<11}{1e3 * r.total_seconds:9.1f}{r.peak_bytes / 2**20:9.2f}"
          f"{relative_error(r.forces, ref):11.1e}  {', '.join(notes)}")

# -----------------------------------------------------------------------------
# where the fused rung spends its time
# -----------------------------------------------------------------------------
r = run_pipeline(problem, "fused", workers=1)
print("\nfused stage breakdown (ms):",
      {k: round(1e3 * v, 1) for k, v in r.timings.items()})
