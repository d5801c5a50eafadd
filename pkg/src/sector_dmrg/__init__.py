"""Sector-sparse tensor algebra and a two-site DMRG ground-state solver.

The parallel runtime rests on three constructs: a batched task pool whose
homogeneous workers explore before they consume (mazerunner), a bump-offset
arena driven by depth-first traversal of data dependency trees (ttcache),
and a fused strided-batched matrix multiply that accumulates a sum of
products in two kernels with no reduction pass (sbmm4s).
"""

from .bench import BenchRecord, fit_power_law, read_csv, run_checks, write_csv
from .blocks import (
    BlockStore, SuperblockWavefunction, assemble_dense, build_plan,
    enlarge_block, materialize_aux, site_store,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dmrg import (
    LanczosResult, apply_effective_hamiltonian, apply_plan, flop_estimate,
    lanczos_ground, renormalize,
)
from .driver import (
    DmrgState, SolveResult, SweepRecord, SweepSchedule, run_sweeps, solve,
    sweep, warmup,
)
from .gemm import KernelCounter, NumpyGemm, ReferenceGemm, default_backend
from .mazerunner import (
    BatchError, KeyedSink, RunnerPool, Task, recursive_feed,
)
from .model import (
    Integrals, Model, ModelSpec, auxiliary_count, build_model, factorize,
    load_integrals, save_integrals,
)
from .sbmm4s import (
    AccumulationProblem, batched_gemm_interleaved, concat_gemm_accumulate,
    sbmm4s, sbmm4s_naive, stack_matrices,
)
from .sectors import (
    SectorBasis, SectorMatrix, SectorOperatorSet, execute_tasks,
    full_form_check, hilbert_dimension, sector_apply, sector_table,
    task_table,
)
from .ttcache import Arena, DependencyNode, Payload, plan_check, ttcache_run

__version__ = "0.1.0"
