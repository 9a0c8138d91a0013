"""Distributed, out-of-core nonnegative matrix factorisation with multiplicative updates."""

__version__ = "0.1.0"

from .linalg import (MatrixRef, frobenius_norm, gram_t, hadamard_update, matmul,  # noqa: E402
                     relative_error, validate_nonnegative)
from .serial import NmfConfig, NmfResult, init_factors, nmf_serial  # noqa: E402
from .partition import choose_strategy, make_plan, memory_estimate, plan_for_budget  # noqa: E402
from .comm import spawn_group  # noqa: E402
from .store import StoreConfig, open_store  # noqa: E402
from .distributed import auto_config, nmf_distributed, run_worker  # noqa: E402
from .selection import SelectionConfig, select_k  # noqa: E402
from .synth import SynthSpec, gen_lowrank, gen_sparse_random  # noqa: E402

__all__ = [
    "MatrixRef", "frobenius_norm", "gram_t", "hadamard_update", "matmul", "relative_error",
    "validate_nonnegative", "NmfConfig", "NmfResult", "init_factors", "nmf_serial",
    "choose_strategy", "make_plan", "memory_estimate", "plan_for_budget", "spawn_group",
    "StoreConfig", "open_store", "auto_config", "nmf_distributed", "run_worker",
    "SelectionConfig", "select_k", "SynthSpec", "gen_lowrank", "gen_sparse_random",
]
