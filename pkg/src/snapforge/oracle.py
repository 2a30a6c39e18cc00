"""Independent reference computations used to check the production code.

Nothing here reuses the production index maps, recursions or Clebsch-Gordan
table.  The 3-sphere map (:func:`map_to_3sphere`) is the only shared piece;
its derivatives are checked independently by the finite-difference force
oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .angular_basis import map_to_3sphere
from .constants import (
    ABS_FLOOR,
    CROSS_PIPELINE_RTOL,
    FD_FORCE_RTOL,
    FD_STEP_FRAC,
    NEWTON_RTOL,
    ROTATION_RTOL,
    VARIANT_RTOL,
    WIGNER_DIRECT_TOL,
)
from .snap_core import (
    Problem,
    adjoint_pipeline,
    baseline_pipeline,
    compute_B,
    compute_U,
    compute_Z,
    context,
)

__all__ = [
    "CheckResult",
    "WIGNER_DIRECT_MAX",
    "wigner_direct",
    "cg_exact",
    "z_bruteforce",
    "relative_error",
    "random_rotation",
    "rotate_problem",
    "total_energy",
    "finite_difference_forces",
    "fd_force_check",
    "wigner_recursion_check",
    "rotation_invariance_check",
    "cross_pipeline_check",
    "newton_sum_check",
    "variant_agreement_check",
    "verify_suite",
    "format_results",
]

# factorial-sum conditioning bound for the direct formula
WIGNER_DIRECT_MAX = 8


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    context: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.1e}"


def relative_error(x, ref, floor: float = ABS_FLOOR) -> float:
    """Max-norm difference relative to the max-norm of ``ref`` (with a floor)."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.size == 0:
        return 0.0
    return float(np.abs(x - ref).max() / max(np.abs(ref).max(), floor))


# ---------------------------------------------------------------------------
# Wigner matrices and Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def wigner_direct(twoj: int, a: complex, b: complex) -> np.ndarray:
    """Level ``twoj`` matrix from the explicit factorial sum.

    The matrix is the normalized ``twoj``-th symmetric power of
    ``[[conj(a), -conj(b)], [b, a]]``; rows are ``mb`` and columns ``ma``
    (both 0-based, ``m = index - twoj/2``).
    """
    if twoj > WIGNER_DIRECT_MAX:
        raise ValueError(f"twoj={twoj} is above the oracle bound {WIGNER_DIRECT_MAX}")
    if twoj < 0:
        raise ValueError("twoj must be non-negative")
    n = twoj
    f = math.factorial
    g00, g10, g11, g01 = np.conj(a), b, a, -np.conj(b)
    u = np.zeros((n + 1, n + 1), dtype=np.complex128)
    for k in range(n + 1):
        for c in range(n + 1):
            s = 0j
            for t in range(max(0, k - c), min(n - c, k) + 1):
                s += (g00 ** (n - c - t) * g10 ** t * g11 ** (k - t) * g01 ** (c - k + t)
                      / (f(t) * f(n - c - t) * f(k - t) * f(c - k + t)))
            u[k, c] = math.sqrt(f(k) * f(n - k) * f(c) * f(n - c)) * s
    return u


@lru_cache(maxsize=None)
def cg_exact(twoj1: int, twom1: int, twoj2: int, twom2: int, twoj: int, twom: int) -> float:
    """``<j1 m1; j2 m2 | j m>`` by the Racah formula in exact rational arithmetic."""
    if twom1 + twom2 != twom:
        return 0.0
    if not abs(twoj1 - twoj2) <= twoj <= twoj1 + twoj2 or (twoj1 + twoj2 + twoj) % 2:
        return 0.0
    for tj, tm in ((twoj1, twom1), (twoj2, twom2), (twoj, twom)):
        if abs(tm) > tj or (tj + tm) % 2:
            return 0.0
    f = math.factorial
    h = lambda x: x // 2  # noqa: E731  (all arguments below are even)
    pre = Fraction(
        (twoj + 1) * f(h(twoj1 + twoj2 - twoj)) * f(h(twoj1 - twoj2 + twoj))
        * f(h(-twoj1 + twoj2 + twoj)),
        f(h(twoj1 + twoj2 + twoj) + 1),
    )
    pre *= (f(h(twoj1 + twom1)) * f(h(twoj1 - twom1)) * f(h(twoj2 + twom2))
            * f(h(twoj2 - twom2)) * f(h(twoj + twom)) * f(h(twoj - twom)))
    s = Fraction(0)
    for k in range(0, h(twoj1 + twoj2 - twoj) + 1):
        d = [h(twoj1 + twoj2 - twoj) - k, h(twoj1 - twom1) - k, h(twoj2 + twom2) - k,
             h(twoj - twoj2 + twom1) + k, h(twoj - twoj1 - twom2) + k]
        if min(d) < 0:
            continue
        den = f(k)
        for x in d:
            den *= f(x)
        s += Fraction((-1) ** k, den)
    # sqrt of the exact rational prefactor, then the exact sum
    return float(s) * math.sqrt(pre.numerator) / math.sqrt(pre.denominator)


def z_bruteforce(u1: np.ndarray, u2: np.ndarray, twoj1: int, twoj2: int, twoj: int) -> np.ndarray:
    """Clebsch-Gordan product of two level matrices by the explicit quadruple sum.

    ``Z[m', m] = sum C(j1 m1'; j2 m2' | j m') C(j1 m1; j2 m2 | j m)
    u1[m1', m1] u2[m2', m2]`` with rows ``m'`` and columns ``m``.
    """
    ms = lambda tj: range(-tj, tj + 1, 2)  # noqa: E731
    z = np.zeros((twoj + 1, twoj + 1), dtype=np.complex128)
    for mp in ms(twoj):
        for m in ms(twoj):
            acc = 0j
            for m1p in ms(twoj1):
                m2p = mp - m1p
                if abs(m2p) > twoj2:
                    continue
                cp = cg_exact(twoj1, m1p, twoj2, m2p, twoj, mp)
                if cp == 0.0:
                    continue
                for m1 in ms(twoj1):
                    m2 = m - m1
                    if abs(m2) > twoj2:
                        continue
                    c = cg_exact(twoj1, m1, twoj2, m2, twoj, m)
                    acc += cp * c * u1[(m1p + twoj1) // 2, (m1 + twoj1) // 2] \
                        * u2[(m2p + twoj2) // 2, (m2 + twoj2) // 2]
            z[(mp + twoj) // 2, (m + twoj) // 2] = acc
    return z


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def random_rotation(rng) -> np.ndarray:
    """Haar-random proper rotation from a QR factorization."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotate_problem(problem: Problem, rot: np.ndarray) -> Problem:
    rot = np.asarray(rot, dtype=np.float64)
    return Problem(
        positions=problem.positions @ rot.T, neighbors=problem.neighbors,
        displacements=problem.displacements @ rot.T, counts=problem.counts,
        params=problem.params, neighbor_weights=problem.neighbor_weights, seed=problem.seed,
    )


def _bispectrum(problem: Problem) -> np.ndarray:
    ctx = context(problem.params.twojmax)
    tot, _ = compute_U(problem)
    return compute_B(compute_Z(tot, ctx), tot, ctx)


def total_energy(problem: Problem) -> float:
    return float((_bispectrum(problem) @ problem.params.beta).sum())


def _displaced(problem: Problem, shift: np.ndarray) -> Problem:
    """Same pair topology with every displacement updated by the atom shifts."""
    cnt = problem.counts
    mask = np.arange(problem.maxnb)[None, :] < cnt[:, None]
    k = np.where(mask, problem.neighbors, 0)
    disp = problem.displacements + np.where(mask[..., None], shift[k] - shift[:, None, :], 0.0)
    return Problem(positions=problem.positions + shift, neighbors=problem.neighbors,
                   displacements=disp, counts=cnt, params=problem.params,
                   neighbor_weights=problem.neighbor_weights, box=problem.box)


def _rebuilt(problem: Problem, shift: np.ndarray) -> Problem:
    from .harness import build_neighborlist

    pos = problem.positions + shift
    nbr, disp, cnt = build_neighborlist(pos, problem.box, problem.params.rcut)
    return Problem(positions=pos, neighbors=nbr, displacements=disp, counts=cnt,
                   params=problem.params, box=problem.box)


def finite_difference_forces(problem: Problem, h: float | None = None) -> np.ndarray:
    """``-dE/dx`` by central differences of the total energy.

    Periodic problems (``box`` set) rebuild their neighbor lists at every
    evaluation; otherwise the pair topology is kept and displacements follow
    the moved atoms.  Every stored neighbor must carry an atom index.
    """
    if problem.natoms > 64:
        raise ValueError("finite differences are limited to 64 atoms")
    cnt = problem.counts
    mask = np.arange(problem.maxnb)[None, :] < cnt[:, None]
    if np.any(problem.neighbors[mask] < 0):
        raise ValueError("finite differences need atom indices for every neighbor")
    h = FD_STEP_FRAC * problem.params.rcut if h is None else float(h)
    if h <= 0:
        raise ValueError("step must be positive")
    move = _rebuilt if problem.box else _displaced
    f = np.zeros((problem.natoms, 3))
    for i in range(problem.natoms):
        for d in range(3):
            s = np.zeros((problem.natoms, 3))
            s[i, d] = h
            ep = total_energy(move(problem, s))
            em = total_energy(move(problem, -s))
            f[i, d] = -(ep - em) / (2.0 * h)
    return f


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def fd_force_check(problem: Problem, h: float | None = None) -> CheckResult:
    st, _ = adjoint_pipeline(problem, half=True, fused=True)
    num = finite_difference_forces(problem, h)
    return CheckResult("fd_forces", relative_error(st.forces, num), FD_FORCE_RTOL,
                       {"natoms": problem.natoms, "twojmax": problem.params.twojmax,
                        "h": h or FD_STEP_FRAC * problem.params.rcut})


def wigner_recursion_check(twojmax: int = WIGNER_DIRECT_MAX, seed: int = 0,
                           samples: int = 20, rcut: float = 1.0) -> CheckResult:
    from .angular_basis import compute_u_matrices

    rng = np.random.default_rng(seed)
    top = min(twojmax, WIGNER_DIRECT_MAX)
    worst = 0.0
    for _ in range(samples):
        d = rng.normal(size=3)
        d *= rng.uniform(0.05, 0.95) * rcut / np.linalg.norm(d)
        m = map_to_3sphere(d, rcut)
        st = compute_u_matrices(m, top)
        for t in range(top + 1):
            worst = max(worst, float(np.abs(st.level(t) - wigner_direct(t, m.a, m.b)).max()))
    return CheckResult("wigner_recursion_vs_direct", worst, WIGNER_DIRECT_TOL,
                       {"twojmax": top, "samples": samples, "seed": seed})


def rotation_invariance_check(problem: Problem, seed: int | None = 0,
                              rotation=None) -> CheckResult:
    rot = random_rotation(np.random.default_rng(seed)) if rotation is None else rotation
    b0 = _bispectrum(problem)
    b1 = _bispectrum(rotate_problem(problem, rot))
    return CheckResult("rotation_invariance", relative_error(b1, b0), ROTATION_RTOL,
                       {"seed": seed, "natoms": problem.natoms,
                        "twojmax": problem.params.twojmax})


def cross_pipeline_check(problem: Problem) -> CheckResult:
    """Baseline (Z, dB) forces against adjoint (Y, dE) forces."""
    sb, eb = baseline_pipeline(problem)
    sa, ea = adjoint_pipeline(problem, half=True, fused=True)
    err = max(relative_error(sa.forces, sb.forces), relative_error(ea, eb))
    return CheckResult("cross_pipeline", err, CROSS_PIPELINE_RTOL,
                       {"natoms": problem.natoms, "twojmax": problem.params.twojmax})


def newton_sum_check(forces) -> CheckResult:
    f = np.asarray(forces, dtype=np.float64).reshape(-1, 3)
    net = np.abs(f.sum(axis=0)).max() if f.size else 0.0
    scale = max(np.abs(f).max(initial=0.0), ABS_FLOOR)
    return CheckResult("newton_sum", float(net / scale), NEWTON_RTOL, {"natoms": len(f)})


def variant_agreement_check(problem: Problem, names=None) -> CheckResult:
    from .exec_variants import run_pipeline, variant_names

    names = list(names or variant_names())
    ref = run_pipeline(problem, "baseline-z").forces
    worst = max(relative_error(run_pipeline(problem, n).forces, ref) for n in names)
    return CheckResult("variant_agreement", worst, VARIANT_RTOL, {"variants": names})


def verify_suite(twojmax: int = 4, seed: int = 0, problem: Problem | None = None,
                 natoms: int = 8) -> list[CheckResult]:
    """Default oracle suite on a small periodic problem."""
    from .harness import BenchConfig, generate_problem

    if problem is None:
        cfg = BenchConfig(natoms=natoms, nnbor=2, twojmax=twojmax, rcut=1.0, seed=seed,
                          synthetic=False)
        problem = generate_problem(cfg)
    out = [
        wigner_recursion_check(min(problem.params.twojmax, WIGNER_DIRECT_MAX), seed),
        rotation_invariance_check(problem, seed),
        cross_pipeline_check(problem),
    ]
    st, _ = adjoint_pipeline(problem, half=True, fused=True)
    out.append(newton_sum_check(st.forces))
    if problem.natoms <= 64 and problem.box:
        out.append(fd_force_check(problem))
    out.append(variant_agreement_check(problem))
    return out


def format_results(results, fmt: str = "csv") -> str:
    if fmt == "json":
        return json.dumps([{"name": r.name, "max_rel_error": r.max_rel_error,
                            "tolerance": r.tolerance, "passed": r.passed,
                            "context": r.context} for r in results], indent=1)
    return "\n".join(r.line() for r in results) + "\n"
