"""Executable model of cooperative GPU kernels: semantics, scheduler,
resizing barriers, workloads, simulator and model checker."""

__version__ = "0.1.0"
