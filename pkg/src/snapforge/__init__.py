"""SNAP bispectrum forces: baseline and adjoint formulations, execution
variants, oracles and a benchmark harness."""

__version__ = "0.1.0"
