"""Sweep orchestration: warmup, two-site iteration, prediction, schedules.

The warmup stage grows both block inventories with spectral (lowest block
energy) truncation, diagonalizes once at the middle partition, and walks the
right half of a backward pass so that every partition has a usable
environment before the first full sweep.  Sweeps then alternate full
left-to-right and right-to-left passes; after each renormalization the
current wavefunction is transformed into the next partition's bases (White's
prediction), falling back to a seeded random vector whenever the transforms
are unavailable.
"""

import time
from dataclasses import dataclass, field
import threading

import numpy as np

from .blocks import (
    SuperblockWavefunction, build_plan, empty_store, enlarge_block, site_store,
)
from .dmrg import (
    DmrgError, apply_plan, exactify_store, lanczos_ground, renormalize,
    spectral_truncate,
)
from .gemm import default_backend
from .model import factorize
from .ttcache import Arena, CapacityError


@dataclass
class SweepSchedule:
    """Sweep count, bond dimension per sweep, and Lanczos control."""

    n_sweeps: int
    d: object = 64                  # int, or list of ints per sweep
    lanczos_tol: float = 1e-12
    lanczos_max_iter: int = 300

    def __post_init__(self):
        if self.n_sweeps < 0:
            raise DmrgError("sweep count must be non-negative")
        if self.lanczos_tol <= 0 or self.lanczos_max_iter < 1:
            raise DmrgError("tolerances must be positive")
        ds = self.d if isinstance(self.d, (list, tuple)) else [self.d]
        if any(int(x) < 1 for x in ds):
            raise DmrgError("bond dimension must be >= 1")

    def d_for(self, sweep_index):
        if isinstance(self.d, (list, tuple)):
            i = min(max(sweep_index - 1, 0), len(self.d) - 1)
            return int(self.d[i])
        return int(self.d)


@dataclass
class SweepRecord:
    sweep: int                     # 0 for warmup iterations
    position: int
    direction: str                 # "W" warmup, "R" rightward, "L" leftward
    energy: float
    truncation_error: float
    lanczos_iterations: int
    wall_seconds: float
    flops: int
    converged: bool = True

    CSV_HEADER = "sweep,position,direction,energy,truncation_error," \
                 "lanczos_iterations,wall_seconds,flops,converged"

    def csv_line(self):
        return (f"{self.sweep},{self.position},{self.direction},"
                f"{self.energy:.17g},{self.truncation_error:.17g},"
                f"{self.lanczos_iterations},{self.wall_seconds:.17g},"
                f"{self.flops},{int(self.converged)}")


@dataclass
class DmrgState:
    model: object
    target: tuple
    seed: int
    rng: object
    left: dict = field(default_factory=dict)     # width in sites -> store
    right: dict = field(default_factory=dict)
    psi: object = None
    position: int = 0
    sweeps_done: int = 0
    records: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)

    def table_at(self, position):
        if position not in self.tables:
            self.tables[position] = factorize(
                self.model, self.model.partition_at(position))
        return self.tables[position]


def sweep_positions(model):
    n = model.n_sites
    if n >= 4:
        return 1, n - 3
    return 0, n - 2


def _psi_struct(state, position):
    model = state.model
    n = model.n_sites
    left = state.left[position]
    right = state.right[n - position - 2]
    struct = SuperblockWavefunction(left.basis, model.local.basis,
                                    right.basis, state.target)
    if not struct.keys:
        raise DmrgError(f"target sector {state.target} unreachable at "
                        f"position {position}")
    return struct, left, right


def _guess_vector(state, struct):
    psi = state.psi
    if psi is not None and psi.left_basis == struct.left_basis \
            and psi.right_basis == struct.right_basis \
            and psi.target == struct.target:
        vec = psi.to_vector()
        n = np.linalg.norm(vec)
        if n > 0:
            return vec / n
    return state.rng.standard_normal(struct.size())


def _iterate(state, position, d_max, pool, backend, arena_bytes, schedule,
             sweep_index, direction):
    model = state.model
    t0 = time.perf_counter()
    flops0 = backend.counter.snapshot()[2]
    struct, left, right = _psi_struct(state, position)
    table = state.table_at(position)
    plan = build_plan(model, table, left, right, struct)

    capacity = arena_bytes if arena_bytes else 8 * max(plan.staging_doubles, 1)
    if capacity < 8 * plan.staging_doubles:
        raise CapacityError(
            f"arena capacity {capacity} below plan requirement "
            f"{8 * plan.staging_doubles} bytes")
    workers = pool.workers if pool else 1
    arenas = [Arena(capacity) for _ in range(workers)]
    locks = {key: threading.Lock() for key in struct.keys}

    work = struct.copy() if struct.blocks else struct.zero_fill().copy()
    out = struct.copy()

    def apply_op(vec):
        work.from_vector(vec)
        for key in out.keys:
            out.blocks[key][...] = 0.0
        apply_plan(plan, work, out, pool=pool, arenas=arenas,
                   backend=backend, locks=locks)
        return out.to_vector()

    res = lanczos_ground(apply_op, _guess_vector(state, struct),
                         tol=schedule.lanczos_tol,
                         max_iter=schedule.lanczos_max_iter)
    psi = struct.copy()
    psi.from_vector(res.vector)
    state.psi = psi
    state.position = position

    lo, hi = sweep_positions(model)
    n = model.n_sites
    if direction == "R":
        rr = renormalize(model, psi, "L", left, position, d_max, pool, backend)
        state.left[position + 1] = rr.store
        if position < hi:
            nxt, _l, _r = _psi_struct_safe(state, position + 1)
            if nxt is not None:
                state.psi = _predict_right(model, psi, rr.store, right, nxt) \
                    or psi
    else:
        rr = renormalize(model, psi, "R", right, position + 1, d_max, pool,
                         backend)
        state.right[n - position - 1] = rr.store
        if position > lo:
            nxt, _l, _r = _psi_struct_safe(state, position - 1)
            if nxt is not None:
                state.psi = _predict_left(model, psi, rr.store, left, nxt) \
                    or psi

    record = SweepRecord(
        sweep=sweep_index, position=position, direction=direction,
        energy=float(res.energy), truncation_error=float(rr.truncation_error),
        lanczos_iterations=res.iterations,
        wall_seconds=time.perf_counter() - t0,
        flops=backend.counter.snapshot()[2] - flops0,
        converged=res.converged)
    state.records.append(record)
    return record


def _psi_struct_safe(state, position):
    try:
        return _psi_struct(state, position)
    except (KeyError, DmrgError):
        return None, None, None


def _predict_right(model, psi, new_left, old_right, struct):
    """Transform psi across a left renormalization into the next partition."""
    wl, fl = new_left.transform, new_left.fused
    wr, fr = old_right.transform, old_right.fused
    if wl is None or fl is None or wr is None or fr is None:
        return None
    out = struct.zero_fill()
    key_set = set(struct.keys)
    for (ql, q1, q2, qr), blk in psi.blocks.items():
        qe = tuple(a + b for a, b in zip(ql, q1))
        wlb = wl.blocks.get((qe, qe))
        wrb = wr.blocks.get((qr, qr))
        if wlb is None or wrb is None:
            continue
        off = fl.layout[(ql, q1)]
        part = wlb[off:off + blk.shape[0], :].T @ blk     # kept_l x dr_old
        expanded = part @ wrb.T                           # kept_l x dF
        for (q2n, qrn), off2 in fr.layout.items():
            if tuple(a + b for a, b in zip(q2n, qrn)) != qr:
                continue
            key = (qe, q2, q2n, qrn)
            if key not in key_set:
                continue
            d_r = fr.basis_b.dim(qrn)
            out.blocks[key] += expanded[:, off2:off2 + d_r]
    return _normalized_or_none(out)


def _predict_left(model, psi, new_right, old_left, struct):
    """Transform psi across a right renormalization into the next partition."""
    wr, fr = new_right.transform, new_right.fused
    wl, fl = old_left.transform, old_left.fused
    if wr is None or fr is None or wl is None or fl is None:
        return None
    out = struct.zero_fill()
    key_set = set(struct.keys)
    for (ql, q1, q2, qr), blk in psi.blocks.items():
        qf = tuple(a + b for a, b in zip(q2, qr))
        wrb = wr.blocks.get((qf, qf))
        wlb = wl.blocks.get((ql, ql))
        if wrb is None or wlb is None:
            continue
        off = fr.layout[(q2, qr)]
        proj = blk @ wrb[off:off + blk.shape[1], :]       # dl x kept_r
        expanded = wlb @ proj                             # dE x kept_r
        for (qln, q1n), off2 in fl.layout.items():
            if tuple(a + b for a, b in zip(qln, q1n)) != ql:
                continue
            key = (qln, q1n, q1, qf)
            if key not in key_set:
                continue
            d_l = fl.basis_a.dim(qln)
            out.blocks[key] += expanded[off2:off2 + d_l, :]
    return _normalized_or_none(out)


def _normalized_or_none(psi):
    n = psi.norm()
    if n < 1e-12:
        return None
    for key in psi.blocks:
        psi.blocks[key] = psi.blocks[key] / n
    return psi


def warmup(model, schedule, target=None, pool=None, backend=None, seed=42,
           arena_bytes=None):
    """Build initial block inventories and walk the bootstrap half-pass.

    Blocks grow with exact enlargement, truncated to the schedule's first
    bond dimension by lowest block energy when they outgrow it.  A first
    diagonalization at the middle partition seeds the wavefunction; the
    backward half-pass to the leftmost position replaces the right-side
    inventory with ground-state reduced-density-matrix truncations.
    """
    backend = backend or default_backend()
    target = tuple(target) if target is not None else model.default_target()
    state = DmrgState(model=model, target=target, seed=seed,
                      rng=np.random.default_rng(seed))
    d = schedule.d_for(1)
    lo, hi = sweep_positions(model)
    n = model.n_sites
    m0 = min(max((n - 2) // 2, lo), hi)

    state.left[0] = empty_store(model, "L", 0)
    state.right[0] = empty_store(model, "R", n)
    state.left[1] = exactify_store(site_store(model, 0, "L"))
    state.right[1] = exactify_store(site_store(model, n - 1, "R"))
    for w in range(2, m0 + 1):
        grown = enlarge_block(model, state.left[w - 1], w - 1)
        state.left[w] = spectral_truncate(model, grown, d, backend, pool)
    for w in range(2, n - m0 - 1):
        grown = enlarge_block(model, state.right[w - 1], n - w)
        state.right[w] = spectral_truncate(model, grown, d, backend, pool)

    for p in range(m0, lo - 1, -1):
        _iterate(state, p, d, pool, backend, arena_bytes, schedule,
                 sweep_index=0, direction="W")
    return state


def run_sweeps(state, schedule, pool=None, backend=None, arena_bytes=None,
               checkpoint_path=None, start_sweep=None):
    """Full sweeps: left-to-right then right-to-left over every partition.

    Appends per-iteration records to the state and returns the records of
    the executed sweeps.  A failing iteration writes a checkpoint (when a
    path is configured) before the error propagates.
    """
    from .checkpoint import save_checkpoint
    backend = backend or default_backend()
    lo, hi = sweep_positions(state.model)
    first = state.sweeps_done + 1 if start_sweep is None else start_sweep
    new_records = []
    for s in range(first, schedule.n_sweeps + 1):
        d = schedule.d_for(s)
        try:
            for p in range(lo, hi + 1):
                new_records.append(_iterate(state, p, d, pool, backend,
                                            arena_bytes, schedule, s, "R"))
            for p in range(hi, lo - 1, -1):
                new_records.append(_iterate(state, p, d, pool, backend,
                                            arena_bytes, schedule, s, "L"))
        except Exception:
            if checkpoint_path:
                save_checkpoint(state, checkpoint_path)
            raise
        state.sweeps_done = s
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
    return new_records


sweep = run_sweeps


@dataclass
class SolveResult:
    energy: float
    records: list
    state: DmrgState

    def sweep_final_energies(self):
        out = {}
        for r in self.records:
            if r.sweep > 0:
                out[r.sweep] = r.energy
        return [out[k] for k in sorted(out)]


def solve(model, schedule, target=None, workers=1, seed=42, backend=None,
          arena_bytes=None, checkpoint_path=None, resume=False):
    """Warmup plus the scheduled sweeps; the one-call front door."""
    from .checkpoint import load_checkpoint, save_checkpoint
    from .mazerunner import RunnerPool
    backend = backend or default_backend()
    pool = RunnerPool(workers=workers) if workers > 1 else None
    if resume:
        if not checkpoint_path:
            raise DmrgError("resume requested without a checkpoint path")
        state = load_checkpoint(checkpoint_path)
    else:
        state = warmup(model, schedule, target=target, pool=pool,
                       backend=backend, seed=seed, arena_bytes=arena_bytes)
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
    records = run_sweeps(state, schedule, pool=pool, backend=backend,
                         arena_bytes=arena_bytes,
                         checkpoint_path=checkpoint_path)
    energy = state.records[-1].energy if state.records else float("nan")
    return SolveResult(energy, list(state.records), state)
