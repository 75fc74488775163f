"""Simulator and diagnostics for equivariant self-gravitating wave maps in 2+1 dimensions."""

__version__ = "0.1.0"
