"""Numerical tolerances used by the checks, the tests and the docs."""

# 3-sphere map: |a|^2 + |b|^2 - 1
NORM_TOL = 1e-14
# unitarity / symmetry of Wigner blocks, CG orthogonality
UNITARY_TOL = 1e-12
CG_ORTHO_TOL = 1e-12
# recursion against the factorial-sum Wigner formula
WIGNER_DIRECT_TOL = 1e-10
# |Im B| allowed before compute_B calls it an indexing bug
B_IMAG_TOL = 1e-11

# finite differences: step as a fraction of Rcut and accepted relative error
FD_STEP_FRAC = 1e-6
FD_DU_RTOL = 1e-5
FD_FORCE_RTOL = 1e-5

ROTATION_RTOL = 1e-9
CROSS_PIPELINE_RTOL = 1e-10
NEWTON_RTOL = 1e-10
VARIANT_RTOL = 1e-8
DETERMINISTIC_VARIANT_RTOL = 1e-12
FUSED_STAGED_RTOL = 1e-12

# floor for relative max-norm comparisons
ABS_FLOOR = 1e-14

# benchmark self-comparison flagged unstable beyond this deviation from 1
SPEEDUP_NOISE = 0.2
