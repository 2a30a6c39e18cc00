"""Memory as the band limit grows.

Nothing is allocated here: the byte counts come from the same analytic
model the pipelines check against when a memory budget is set.
"""

from snapforge.harness import BenchConfig, memory_report

print(f"{'2J':>3} {'baseline MB':>12} {'fused MB':>10} {'Z MB':>9} {'Y MB':>8} {'ratio':>7}")
for J in (2, 4, 6, 8, 10, 12, 14):
    cfg = BenchConfig(natoms=2000, nnbor=26, twojmax=J, workers=1)
    base = memory_report(cfg, "baseline-z")
    fused = memory_report(cfg, "fused")
    tb, tf = sum(base.values()), sum(fused.values())
    print(f"{J:3d} {tb / 1e6:12.2f} {tf / 1e6:10.2f} {base['Zlist'] / 1e6:9.2f} "
          f"{fused['Ylist'] / 1e6:8.2f} {tb / tf:7.1f}")

# the Z array dominates the baseline because the number of coupling triples
# grows faster than the number of Wigner elements
