import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from snapforge import oracle
from snapforge.exec_variants import variant_names
from snapforge.halfint_index import enumerate_coupling_triples, u_total_elements
from snapforge.harness import (
    CSV_COLUMNS,
    NEIGHBOR_TOLERANCE,
    SYNTH_RADIUS,
    BenchConfig,
    RunReport,
    brute_force_neighborlist,
    build_neighborlist,
    cli,
    generate_problem,
    grind_speed,
    load_problem,
    memory_report,
    reports_csv,
    reports_json,
    run_benchmark,
    save_problem,
    speedup_ratio,
)


def report(variant="v1", k=1.0, **kw):
    return RunReport(variant=variant, natoms=10, nnbor=2, twojmax=2, steps=1,
                     wall_ms_per_step=1.5, katom_steps_per_s=k, speedup_vs_baseline=1.0,
                     peak_bytes_total=100, force_checksum=0.1 + 0.2, **kw)


class TestGenerate:
    def test_synthetic_shape(self):
        p = generate_problem(BenchConfig(natoms=2000, nnbor=26))
        assert p.natoms == 2000 and p.maxnb == 26
        assert np.all(p.counts == 26)
        assert p.params.beta.size == 55
        r = np.linalg.norm(p.displacements, axis=-1) / p.params.rcut
        assert r.min() >= SYNTH_RADIUS[0] and r.max() <= SYNTH_RADIUS[1]
        assert not np.any(p.neighbors == np.arange(2000)[:, None])
        assert p.neighbors.min() >= 0 and p.neighbors.max() < 2000

    def test_single_atom(self):
        for synthetic in (True, False):
            p = generate_problem(BenchConfig(natoms=1, nnbor=5, twojmax=2, synthetic=synthetic))
            assert p.counts.tolist() == [0]

    def test_seeded(self):
        cfg = BenchConfig(natoms=50, nnbor=6, twojmax=4, seed=4)
        a, b = generate_problem(cfg), generate_problem(cfg)
        np.testing.assert_array_equal(a.displacements, b.displacements)
        np.testing.assert_array_equal(a.neighbors, b.neighbors)
        np.testing.assert_array_equal(a.params.beta, b.params.beta)
        c = generate_problem(BenchConfig(natoms=50, nnbor=6, twojmax=4, seed=5))
        assert not np.array_equal(a.displacements, c.displacements)

    def test_physical_density(self):
        p = generate_problem(BenchConfig(natoms=300, nnbor=12, twojmax=2, rcut=1.0,
                                         synthetic=False))
        assert abs(p.counts.mean() / 12 - 1) <= NEIGHBOR_TOLERANCE

    def test_unreachable_density(self):
        with pytest.raises(ValueError):
            generate_problem(BenchConfig(natoms=4, nnbor=50, twojmax=2, synthetic=False))

    @pytest.mark.parametrize("kw", [{"natoms": 0}, {"steps": 0}, {"nnbor": -1},
                                    {"fmt": "xml"}, {"variants": ("v0",)}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            BenchConfig(**kw)


class TestNeighborList:
    def test_single_pair(self):
        pos = np.array([[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]])
        nbr, disp, cnt = build_neighborlist(pos, 5.0, 1.0)
        assert cnt.tolist() == [1, 1]
        np.testing.assert_allclose(disp[0, 0], [0.5, 0, 0])
        np.testing.assert_allclose(disp[1, 0], [-0.5, 0, 0])

    def test_minimum_image(self):
        pos = np.array([[0.1, 1.0, 1.0], [4.8, 1.0, 1.0]])
        nbr, disp, cnt = build_neighborlist(pos, 5.0, 1.0)
        np.testing.assert_allclose(disp[0, 0], [-0.3, 0, 0], atol=1e-12)

    def test_cutoff_is_exclusive(self):
        pos = np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 1.0]])
        assert build_neighborlist(pos, 5.0, 1.0)[2].tolist() == [0, 0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(0, 6.0, (200, 3))
        a = build_neighborlist(pos, 6.0, 1.2)
        b = brute_force_neighborlist(pos, 6.0, 1.2)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_cutoff_larger_than_half_box(self):
        with pytest.raises(ValueError):
            build_neighborlist(np.zeros((2, 3)), 3.0, 1.6)


class TestReports:
    def test_grind(self):
        assert grind_speed(2000, 5, 1.0) == 10.0

    def test_speedup_ratio(self):
        assert speedup_ratio(report(k=2.0), report(k=1.0)) == (2.0, True)
        ratio, flagged = speedup_ratio(report(k=1.1), report(k=1.0))
        assert ratio == pytest.approx(1.1) and not flagged

    def test_memory_values(self):
        cfg = BenchConfig(natoms=2000, nnbor=26, twojmax=8, workers=1)
        assert memory_report(cfg, "v1")["Ulisttot"] == 9_120_000
        assert memory_report(cfg, "fused")["Ulisttot"] == 4_960_000
        assert "Ylist" not in memory_report(cfg, "baseline-z")

    def test_z_over_y_matches_counts(self):
        for J in (8, 14):
            cfg = BenchConfig(natoms=100, nnbor=26, twojmax=J, workers=1)
            z = memory_report(cfg, "baseline-z")["Zlist"]
            y = memory_report(cfg, "v1")["Ylist"]
            nz = sum((j + 1) ** 2 for _, _, j in enumerate_coupling_triples(J))
            assert z / y == nz / u_total_elements(J)

    def test_csv_columns_and_round_trip(self):
        reps = [report(), report("v2", k=3.5)]
        rows = list(csv.DictReader(io.StringIO(reports_csv(reps))))
        assert tuple(rows[0]) == CSV_COLUMNS
        data = json.loads(reports_json(reps))
        for row, js in zip(rows, data):
            for c in CSV_COLUMNS:
                if isinstance(js[c], float):
                    assert float(row[c]) == js[c]
        assert float(rows[0]["force_checksum"]) == 0.1 + 0.2

    def test_json_nan_is_null(self):
        r = report()
        r.speedup_vs_baseline = math.nan
        assert json.loads(reports_json([r]))[0]["speedup_vs_baseline"] is None

    def test_budget_reported(self):
        cfg = BenchConfig(natoms=16, nnbor=4, twojmax=4, steps=1, variants=("baseline-z", "v1"),
                          memory_budget=1000, workers=1)
        reps = run_benchmark(cfg)
        assert all(r.error and r.peak_bytes_total > 1000 for r in reps)

    def test_benchmark_rows(self, tmp_path):
        out = tmp_path / "r.json"
        cfg = BenchConfig(natoms=24, nnbor=6, twojmax=4, steps=2, variants=("baseline-z", "fused"),
                          workers=1, out=str(out), fmt="json")
        reps = run_benchmark(cfg)
        assert reps[0].speedup_vs_baseline == 1.0
        assert reps[1].force_checksum == pytest.approx(reps[0].force_checksum, rel=1e-10)
        assert len(reps[1].step_ms) == 2 and "Y" in reps[1].stage_ms
        assert len(json.loads(out.read_text())) == 2


class TestCLI:
    def run(self, *argv):
        buf = io.StringIO()
        return cli(list(argv), out=buf), buf.getvalue()

    def test_sweep(self):
        code, text = self.run("sweep", "--natoms", "64", "--nnbor", "8", "--twojmax", "4",
                              "--steps", "1", "--workers", "1")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(text)))
        assert [r["variant"] for r in rows] == variant_names()

    def test_run_needs_one_variant(self):
        assert self.run("run", "--natoms", "8")[0] == 1
        code, text = self.run("run", "--variant", "fused", "--natoms", "16", "--nnbor", "4",
                              "--twojmax", "2", "--steps", "1", "--format", "json")
        assert code == 0 and json.loads(text)[0]["variant"] == "fused"

    def test_usage_errors(self):
        assert self.run("sweep", "--bogus")[0] == 1
        assert self.run("teleport")[0] == 1
        assert self.run("run", "--variant", "v42")[0] == 1

    def test_verify(self):
        code, text = self.run("verify", "--twojmax", "2", "--seed", "1")
        assert code == 0
        assert text.count("PASS") == len(text.strip().splitlines())

    def test_verify_failure_exit(self, monkeypatch):
        bad = [oracle.CheckResult("fake", 1.0, 1e-10)]
        monkeypatch.setattr(oracle, "verify_suite", lambda **kw: bad)
        code, text = self.run("verify")
        assert code == 2 and text.startswith("FAIL fake")

    def test_mem(self):
        code, text = self.run("mem", "--twojmax", "14", "--variant", "baseline-z",
                              "--variant", "fused", "--format", "json")
        assert code == 0
        v = json.loads(text)["variants"]
        assert v["fused"]["arrays"]["Ylist"] < v["baseline-z"]["arrays"]["Zlist"]
        assert v["fused"]["total"] < v["baseline-z"]["total"]

    def test_gen_and_load(self, tmp_path):
        path = tmp_path / "p.json"
        assert self.run("gen", "--natoms", "12", "--nnbor", "3", "--twojmax", "2",
                        "--out", str(path))[0] == 0
        p = load_problem(str(path))
        q = generate_problem(BenchConfig(natoms=12, nnbor=3, twojmax=2))
        np.testing.assert_array_equal(p.displacements, q.displacements)
        np.testing.assert_array_equal(p.params.beta, q.params.beta)
        save_problem(p, str(tmp_path / "again.json"))
        assert load_problem(str(tmp_path / "again.json")).natoms == 12
        code, text = self.run("run", "--variant", "v1", "--problem", str(path), "--steps", "1")
        assert code == 0 and "v1,12," in text

    def test_runtime_errors(self, tmp_path):
        assert self.run("run", "--variant", "v1", "--problem", str(tmp_path / "nope.json"))[0] == 3
        code, _ = self.run("run", "--variant", "baseline-z", "--natoms", "16", "--nnbor", "4",
                           "--twojmax", "2", "--memory-budget", "10")
        assert code == 3

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "snapforge", "mem", "--variant", "fused"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert proc.stdout.startswith("variant,natoms")
        proc = subprocess.run([sys.executable, "-m", "snapforge", "--nope"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 1
