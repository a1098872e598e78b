"""Crash-consistency lab bindings.

Workloads and bug reports cross the boundary as their canonical text forms;
results come back as plain dicts and lists.
"""

from ._pmcl import (
    DEFAULT_THETA,
    build_id,
    canonicalize,
    cluster,
    fault_names,
    fuzz_campaign,
    generate,
    repro,
    run_workload,
)

__all__ = [
    "DEFAULT_THETA",
    "build_id",
    "canonicalize",
    "cluster",
    "fault_names",
    "fuzz_campaign",
    "generate",
    "repro",
    "run_workload",
]
