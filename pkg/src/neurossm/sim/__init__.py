"""Neurocore simulator: placement, lock-step execution and cost accounting."""

from .coregraph import CapacityError, Core, CoreGraph, build_core_graph
from .cost import FitResult, Workload, fit_cost, load_reference_rows, read_cost_file, write_cost_file
from .simulator import (FALL_THROUGH, PIPELINED, InjectionSchedule, RunMetrics, StepCostModel, benchmark_regimes,
                        compute_edp, run, schedule_profile)

__all__ = [
    "CapacityError", "Core", "CoreGraph", "build_core_graph",
    "FitResult", "Workload", "fit_cost", "load_reference_rows", "read_cost_file", "write_cost_file",
    "FALL_THROUGH", "PIPELINED", "InjectionSchedule", "RunMetrics", "StepCostModel", "benchmark_regimes",
    "compute_edp", "run", "schedule_profile",
]
