"""Problem generation, neighbor lists, benchmarking and the command line.

Two generators are available.  The default ``synthetic`` mode gives every
atom exactly ``nnbor`` neighbors with uniform directions and radii uniform in
``(0.3, 0.95) * rcut``; neighbor indices are random other atoms, so forces
are well defined for bookkeeping and timing but are not the gradient of a
positional energy.  The ``physical`` mode places atoms uniformly in a
periodic cube whose edge is tuned by bisection until the mean neighbor count
is within 10% of the target, then builds neighbor lists with a cell list.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import statistics
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .constants import SPEEDUP_NOISE
from .exec_variants import (
    MemoryBudgetError,
    array_bytes,
    get_variant,
    resolve_workers,
    run_pipeline,
    variant_names,
)
from .halfint_index import enumerate_bispectrum_triples
from .snap_core import Problem, SnapParams

__all__ = [
    "BenchConfig",
    "RunReport",
    "CSV_COLUMNS",
    "generate_problem",
    "build_neighborlist",
    "brute_force_neighborlist",
    "run_benchmark",
    "speedup_ratio",
    "memory_report",
    "problem_to_dict",
    "problem_from_dict",
    "save_problem",
    "load_problem",
    "write_reports",
    "cli",
    "main",
]

CSV_COLUMNS = (
    "variant", "natoms", "nnbor", "twojmax", "steps", "wall_ms_per_step",
    "katom_steps_per_s", "speedup_vs_baseline", "peak_bytes_total", "force_checksum",
)
SCHEMA_VERSION = 1
SYNTH_RADIUS = (0.3, 0.95)
NEIGHBOR_TOLERANCE = 0.10
BASELINE = "baseline-z"

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


@dataclass
class BenchConfig:
    natoms: int = 2000
    nnbor: int = 26
    twojmax: int = 8
    rcut: float = 4.0
    rmin0: float = 0.0
    rfac0: float = 0.99363
    seed: int = 0
    steps: int = 5
    variants: tuple = ()
    workers: int | None = None
    deterministic: bool = False
    out: str | None = None
    fmt: str = "csv"
    synthetic: bool = True
    memory_budget: int | None = None

    def __post_init__(self):
        if self.natoms < 1:
            raise ValueError("natoms must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.nnbor < 0:
            raise ValueError("nnbor must be >= 0")
        if self.fmt not in ("csv", "json"):
            raise ValueError("format must be csv or json")
        self.variants = tuple(self.variants) or tuple(variant_names())
        known = set(variant_names())
        for v in self.variants:
            if v not in known:
                raise ValueError(f"unknown variant {v!r}")


@dataclass
class RunReport:
    variant: str
    natoms: int
    nnbor: int
    twojmax: int
    steps: int
    wall_ms_per_step: float
    katom_steps_per_s: float
    speedup_vs_baseline: float
    peak_bytes_total: int
    force_checksum: float
    energy_total: float = math.nan
    stage_ms: dict = field(default_factory=dict)
    array_bytes: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    bytes_moved: dict = field(default_factory=dict)
    force_digest: str = ""
    step_ms: list = field(default_factory=list)
    unstable: bool = False
    error: str | None = None

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def grind_speed(natoms: int, steps: int, seconds: float) -> float:
    """Thousands of atom-steps per second."""
    return natoms * steps / seconds / 1000.0


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


def _params(config: BenchConfig, rng) -> SnapParams:
    nb = len(enumerate_bispectrum_triples(config.twojmax))
    beta = rng.uniform(-1.0, 1.0, nb)
    return SnapParams(twojmax=config.twojmax, rcut=config.rcut, beta=beta,
                      rmin0=config.rmin0, rfac0=config.rfac0)


def _synthetic_box(config: BenchConfig) -> float:
    # edge giving the target count at uniform density
    vol = config.natoms * 4.0 / 3.0 * math.pi * config.rcut ** 3 / max(config.nnbor, 1)
    return vol ** (1.0 / 3.0)


def generate_problem(config: BenchConfig) -> Problem:
    rng = np.random.default_rng(config.seed)
    params = _params(config, rng)
    n = config.natoms
    if config.synthetic:
        box = _synthetic_box(config)
        pos = rng.uniform(0.0, box, (n, 3))
        k = config.nnbor if n > 1 else 0
        v = rng.normal(size=(n, k, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        r = rng.uniform(*SYNTH_RADIUS, size=(n, k, 1)) * config.rcut
        # uniform over the other n - 1 atoms
        nbr = rng.integers(0, max(n - 1, 1), size=(n, k))
        nbr += nbr >= np.arange(n)[:, None]
        return Problem(positions=pos, neighbors=nbr, displacements=v * r,
                       counts=np.full(n, k), params=params, box=box, seed=config.seed)
    unit = rng.uniform(0.0, 1.0, (n, 3))
    if n == 1:
        box = 2.0 * config.rcut
        return Problem(positions=unit * box, neighbors=np.zeros((1, 0)),
                       displacements=np.zeros((1, 0, 3)), counts=[0], params=params,
                       box=box, seed=config.seed)
    box = _bisect_box(unit, config)
    nbr, disp, cnt = build_neighborlist(unit * box, box, config.rcut)
    return Problem(positions=unit * box, neighbors=nbr, displacements=disp, counts=cnt,
                   params=params, box=box, seed=config.seed)


def _bisect_box(unit: np.ndarray, config: BenchConfig) -> float:
    """Edge length whose mean neighbor count is within tolerance of the target."""
    target = config.nnbor
    lo_tol, hi_tol = (1 - NEIGHBOR_TOLERANCE) * target, (1 + NEIGHBOR_TOLERANCE) * target

    def mean_count(box):
        return build_neighborlist(unit * box, box, config.rcut)[2].mean()

    lo = 2.0 * config.rcut  # smallest box the minimum image allows
    c = mean_count(lo)
    if c < lo_tol:
        raise ValueError(
            f"{config.natoms} atoms reach at most {c:.2f} neighbors in the smallest "
            f"admissible box; target {target} is unreachable"
        )
    if c <= hi_tol:
        return lo
    hi = lo
    while mean_count(hi) > hi_tol:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = mean_count(mid)
        if lo_tol <= c <= hi_tol:
            return mid
        if c > hi_tol:
            lo = mid
        else:
            hi = mid
    raise ValueError(f"box bisection did not bracket {target} neighbors")


def build_neighborlist(positions, box: float, rcut: float):
    """Periodic cell-list neighbor search, strict ``r < rcut``.

    Returns padded ``(neighbors, displacements, counts)``; each list is sorted
    by neighbor index and ``displacements[i, n] = r_k - r_i`` under the
    minimum image convention.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if rcut > box / 2.0:
        raise ValueError(f"rcut={rcut} exceeds half the box edge {box}")
    n = pos.shape[0]
    nc = max(1, int(box // rcut))
    cell = np.floor(np.mod(pos, box) / box * nc).astype(np.int64) % nc
    cid = (cell[:, 0] * nc + cell[:, 1]) * nc + cell[:, 2]
    members = [np.flatnonzero(cid == c) for c in range(nc ** 3)]
    shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    lists, disps = [], []
    for i in range(n):
        near = np.unique((((cell[i] + shifts) % nc) * [nc * nc, nc, 1]).sum(axis=1))
        cand = np.concatenate([members[c] for c in near])
        cand = np.sort(cand[cand != i])
        d = pos[cand] - pos[i]
        d -= box * np.round(d / box)
        keep = np.einsum("ij,ij->i", d, d) < rcut * rcut
        lists.append(cand[keep])
        disps.append(d[keep])
    return _pad(lists, disps)


def brute_force_neighborlist(positions, box: float, rcut: float):
    """O(N^2) reference for :func:`build_neighborlist`."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lists, disps = [], []
    for i in range(pos.shape[0]):
        d = pos - pos[i]
        d -= box * np.round(d / box)
        r2 = (d * d).sum(axis=1)
        keep = (r2 < rcut * rcut) & (np.arange(len(pos)) != i)
        lists.append(np.flatnonzero(keep))
        disps.append(d[keep])
    return _pad(lists, disps)


def _pad(lists, disps):
    n = len(lists)
    maxnb = max((len(x) for x in lists), default=0)
    nbr = np.full((n, maxnb), -1, dtype=np.int64)
    disp = np.zeros((n, maxnb, 3))
    cnt = np.zeros(n, dtype=np.int64)
    for i, (k, d) in enumerate(zip(lists, disps)):
        cnt[i] = len(k)
        nbr[i, : len(k)] = k
        disp[i, : len(k)] = d
    return nbr, disp, cnt


def problem_to_dict(problem: Problem) -> dict:
    p = problem.params
    c = problem.counts
    return {
        "schema": SCHEMA_VERSION,
        "seed": problem.seed,
        "box": problem.box,
        "params": {
            "twojmax": p.twojmax, "rcut": p.rcut, "rmin0": p.rmin0, "rfac0": p.rfac0,
            "weight": p.weight, "wself": p.wself, "self_contribution": p.self_contribution,
        },
        "beta": p.beta.tolist(),
        "positions": problem.positions.tolist(),
        "neighbors": [problem.neighbors[i, : c[i]].tolist() for i in range(problem.natoms)],
        "displacements": [problem.displacements[i, : c[i]].tolist()
                          for i in range(problem.natoms)],
    }


def problem_from_dict(data: dict) -> Problem:
    if data.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported problem schema {data.get('schema')!r}")
    params = SnapParams(beta=data["beta"], **data["params"])
    return Problem.from_lists(data["positions"], data["neighbors"], data["displacements"],
                              params, box=data.get("box"), seed=data.get("seed"))


def save_problem(problem: Problem, path: str) -> None:
    with open(path, "w") as f:
        json.dump(problem_to_dict(problem), f)


def load_problem(path: str) -> Problem:
    with open(path) as f:
        return problem_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


def run_benchmark(config: BenchConfig, problem: Problem | None = None) -> list[RunReport]:
    """Time every configured variant; one warm-up run, then the median of ``steps``."""
    problem = problem if problem is not None else generate_problem(config)
    mode = "deterministic" if config.deterministic else "benchmark"
    workers = resolve_workers(config.workers)
    reports = []
    for name in config.variants:
        spec = get_variant(name)
        rep = RunReport(
            variant=name, natoms=problem.natoms, nnbor=config.nnbor, twojmax=config.twojmax,
            steps=config.steps, wall_ms_per_step=math.nan, katom_steps_per_s=math.nan,
            speedup_vs_baseline=math.nan, peak_bytes_total=0, force_checksum=math.nan,
        )
        try:
            run_pipeline(problem, spec, mode, workers, config.memory_budget)
            times, stages, res = [], {}, None
            for _ in range(config.steps):
                res = run_pipeline(problem, spec, mode, workers, config.memory_budget)
                times.append(res.total_seconds)
                for k, v in res.timings.items():
                    stages.setdefault(k, []).append(v)
        except MemoryBudgetError as e:
            rep.peak_bytes_total = e.required
            rep.array_bytes = e.arrays
            rep.error = str(e)
            reports.append(rep)
            continue
        med = statistics.median(times)
        rep.wall_ms_per_step = med * 1e3
        rep.katom_steps_per_s = grind_speed(problem.natoms, config.steps, med * config.steps)
        rep.step_ms = [t * 1e3 for t in times]
        rep.stage_ms = {k: statistics.median(v) * 1e3 for k, v in stages.items()}
        rep.peak_bytes_total = res.peak_bytes
        rep.array_bytes = dict(res.array_bytes)
        rep.flops = dict(res.flops)
        rep.bytes_moved = dict(res.bytes_moved)
        rep.force_checksum = res.force_checksum
        rep.force_digest = res.force_digest
        rep.energy_total = res.energy
        rep.unstable = max(times) / min(times) - 1.0 > SPEEDUP_NOISE
        reports.append(rep)
    base = next((r for r in reports if r.variant == BASELINE and r.error is None), None)
    if base is not None:
        for r in reports:
            if r.error is None:
                r.speedup_vs_baseline, _ = speedup_ratio(r, base)
    if config.out:
        write_reports(reports, config.out, config.fmt)
    return reports


def speedup_ratio(report: RunReport, reference: RunReport) -> tuple[float, bool]:
    """Grind-speed ratio and whether it is off 1 by more than the noise band."""
    ratio = report.katom_steps_per_s / reference.katom_steps_per_s
    return ratio, abs(ratio - 1.0) > SPEEDUP_NOISE


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.row().values()])
    return buf.getvalue()


def reports_json(reports) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, list):
            return [clean(v) for v in x]
        return x

    return json.dumps([clean(asdict(r)) for r in reports], indent=1)


def write_reports(reports, path: str | None, fmt: str = "csv") -> str:
    text = reports_csv(reports) if fmt == "csv" else reports_json(reports)
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def memory_report(config: BenchConfig, variant) -> dict:
    """Analytic per-array bytes for ``variant`` at the configured size; no allocation."""
    spec = get_variant(variant) if isinstance(variant, str) else variant
    return array_bytes(spec, config.natoms, config.nnbor, config.twojmax,
                       resolve_workers(config.workers))


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--natoms", type=int, default=2000)
    common.add_argument("--nnbor", type=int, default=26)
    common.add_argument("--twojmax", type=int, default=8)
    common.add_argument("--rcut", type=float, default=4.0)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--steps", type=int, default=5)
    common.add_argument("--variant", action="append", default=None,
                        help="variant name, repeatable (default: all)")
    common.add_argument("--workers", type=int, default=None,
                        help="worker count (default: $SNAPFORGE_WORKERS or CPU count)")
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--out", default=None)
    common.add_argument("--format", dest="fmt", choices=("csv", "json"), default="csv")
    grp = common.add_mutually_exclusive_group()
    grp.add_argument("--synthetic-neighbors", dest="synthetic", action="store_true",
                     default=True, help="exactly nnbor fabricated neighbors (default)")
    grp.add_argument("--physical", dest="synthetic", action="store_false",
                     help="random periodic box with cell-list neighbors")
    common.add_argument("--memory-budget", type=int, default=None, help="bytes")
    common.add_argument("--problem", default=None, help="problem JSON instead of generating")

    parser = _Parser(prog="snapforge", description="SNAP force pipeline harness")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write a problem JSON")
    sub.add_parser("run", parents=[common], help="benchmark one variant")
    sub.add_parser("sweep", parents=[common], help="benchmark all variants")
    sub.add_parser("verify", parents=[common], help="run the oracle suite")
    sub.add_parser("mem", parents=[common], help="analytic per-array bytes")
    return parser


def _config(args, variants) -> BenchConfig:
    return BenchConfig(
        natoms=args.natoms, nnbor=args.nnbor, twojmax=args.twojmax, rcut=args.rcut,
        seed=args.seed, steps=args.steps, variants=tuple(variants), workers=args.workers,
        deterministic=args.deterministic, out=args.out, fmt=args.fmt,
        synthetic=args.synthetic, memory_budget=args.memory_budget,
    )


def _emit(text: str, path: str | None, out) -> None:
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        out.write(text if text.endswith("\n") else text + "\n")


def cli(argv=None, out=None) -> int:
    """Entry point; returns the exit status (0 ok, 1 usage, 2 verification, 3 runtime)."""
    out = out or sys.stdout
    try:
        args = _build_parser().parse_args(argv)
        variants = args.variant or []
        if args.command == "run":
            if len(variants) != 1:
                raise _UsageError("run needs exactly one --variant")
        if args.command == "sweep" and not variants:
            variants = variant_names()
        config = _config(args, variants)
    except (_UsageError, ValueError) as e:
        print(f"snapforge: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "gen":
            problem = generate_problem(config)
            _emit(json.dumps(problem_to_dict(problem)), args.out, out)
            return EXIT_OK
        if args.command in ("run", "sweep"):
            problem = load_problem(args.problem) if args.problem else None
            if problem is not None:
                config.natoms = problem.natoms
            # output is written below so stdout and --out share one path
            reports = run_benchmark(replace(config, out=None), problem)
            text = write_reports(reports, None, config.fmt)
            _emit(text, args.out, out)
            failed = [r for r in reports if r.error]
            for r in failed:
                print(f"snapforge: {r.variant}: {r.error}", file=sys.stderr)
            return EXIT_RUNTIME if failed else EXIT_OK
        if args.command == "verify":
            from .oracle import format_results, verify_suite

            problem = load_problem(args.problem) if args.problem else None
            results = verify_suite(twojmax=args.twojmax, seed=args.seed, problem=problem)
            _emit(format_results(results, args.fmt), args.out, out)
            return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY
        if args.command == "mem":
            names = variants or variant_names()
            rows = {n: memory_report(config, n) for n in names}
            _emit(_mem_text(rows, config, args.fmt), args.out, out)
            return EXIT_OK
    except Exception as e:  # reported as a runtime failure, never a traceback
        print(f"snapforge: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


def _mem_text(rows: dict, config: BenchConfig, fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"natoms": config.natoms, "nnbor": config.nnbor,
                           "twojmax": config.twojmax,
                           "variants": {k: {"arrays": v, "total": sum(v.values())}
                                        for k, v in rows.items()}}, indent=1)
    names = sorted({a for v in rows.values() for a in v})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "natoms", "nnbor", "twojmax", *names, "total"])
    for k, v in rows.items():
        w.writerow([k, config.natoms, config.nnbor, config.twojmax,
                    *[v.get(a, 0) for a in names], sum(v.values())])
    return buf.getvalue()


def main() -> None:
    sys.exit(cli())
