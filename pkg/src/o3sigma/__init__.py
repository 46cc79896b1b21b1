"""Lattice O(3) sigma model: exact diagonalisation, coupled-cluster Ansatze and a
Fock-truncated continuous-variable circuit simulator."""

__version__ = "0.1.0"
