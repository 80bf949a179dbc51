"""Trace-driven lab for phase-aware ML prefetching on graph-analytics memory traces."""

__version__ = "0.1.0"
