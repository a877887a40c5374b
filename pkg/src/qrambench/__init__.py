"""Noisy bucket-brigade QRAM simulation with sparse branches and fault pruning."""

from .topology import NodeId, Register, TreeShape, FaultSite, affected_range, unreliable_set, routing_path
from .sparse_state import SparseState, bus_fidelity, full_fidelity, normalize
from .noise_model import KrausChannel, NoiseModel, FaultEvent, forced_fault
from .query_engine import (DataTable, QuerySchedule, build_schedule, estimate_fidelity, run_noiseless,
                           run_noisy, schedule_length)
from .error_filtration import (EFConfig, EFResult, PauliRegisterOperation, QueryOperation, ef_bounds,
                               fit_power_law, max_feasible_n, progressive_limit, run_ef, suppression_ratio)
from .benchmark import CostSample, Region, classify_region, compare_modes, measure_dynamic, measure_static

__version__ = "0.1.0"

__all__ = [
    "NodeId", "Register", "TreeShape", "FaultSite", "affected_range", "unreliable_set", "routing_path",
    "SparseState", "bus_fidelity", "full_fidelity", "normalize",
    "KrausChannel", "NoiseModel", "FaultEvent", "forced_fault",
    "DataTable", "QuerySchedule", "build_schedule", "estimate_fidelity", "run_noiseless", "run_noisy",
    "schedule_length",
    "EFConfig", "EFResult", "PauliRegisterOperation", "QueryOperation", "ef_bounds", "fit_power_law",
    "max_feasible_n", "progressive_limit", "run_ef", "suppression_ratio",
    "CostSample", "Region", "classify_region", "compare_modes", "measure_dynamic", "measure_static",
]
