"""Benchmark records, CSV emission, power-law fits, and the self-check suite."""

import csv
import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .gemm import KernelCounter, NumpyGemm
from .mazerunner import KeyedSink, RunnerPool, Task
from .sbmm4s import AccumulationProblem, sbmm4s, sbmm4s_naive, stack_matrices
from .sectors import SectorBasis, SectorMatrix, full_form_check, sector_apply
from .ttcache import DependencyNode, bytes_payload, plan_check, ttcache_run

CSV_HEADER = ["label", "size", "seconds", "flops", "gflops"]


@dataclass
class BenchRecord:
    label: str
    size: float
    seconds: float
    flops: int

    @property
    def gflops(self):
        return self.flops / self.seconds / 1e9 if self.seconds > 0 else 0.0


def write_csv(records, path):
    """RFC-4180-style CSV, LF endings, 17-significant-digit floats."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.label, f"{r.size:.17g}", f"{r.seconds:.17g}",
                             str(r.flops), f"{r.gflops:.17g}"])


def read_csv(path):
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        for row in reader:
            out.append(BenchRecord(row[0], float(row[1]), float(row[2]),
                                   int(row[3])))
    return out


class FitResult(NamedTuple):
    exponent: float
    prefactor: float
    r_squared: float


def fit_power_law(points):
    """Least squares on (log x, log t): t ~ prefactor * x**exponent.

    Zero-variance data (a constant law) reports r^2 = 1.0 by convention.
    """
    points = list(points)
    if len(points) < 3:
        raise ValueError("power-law fit needs at least 3 points")
    for x, t in points:
        if x <= 0 or t <= 0:
            raise ValueError(f"power-law fit needs positive values, got "
                             f"({x}, {t})")
    lx = np.log([p[0] for p in points])
    lt = np.log([p[1] for p in points])
    slope, intercept = np.polyfit(lx, lt, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((lt - pred) ** 2))
    ss_tot = float(np.sum((lt - np.mean(lt)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(math.exp(intercept)), float(r2))


def median_of(fn, repeats=5):
    """Median wall-clock seconds of ``fn()`` over ``repeats`` runs."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


# ------------------------------------------------------------ kernel benchmark

def bench_kernel(dims=(8, 16, 32, 64), batch=8, repeats=5, seed=42):
    """Time the fused and the traditional accumulation paths per size."""
    rng = np.random.default_rng(seed)
    records = []
    for dim in dims:
        a = rng.standard_normal((dim, dim))
        ls = stack_matrices([rng.standard_normal((dim, dim))
                             for _ in range(batch)])
        rs = stack_matrices([rng.standard_normal((dim, dim))
                             for _ in range(batch)])
        ws = np.zeros(dim * batch * dim)
        flops = 4 * dim ** 3 * batch

        def fused():
            prob = AccumulationProblem(1.0, a, np.zeros((dim, dim)), ls, rs)
            sbmm4s(prob, ws)

        def naive():
            prob = AccumulationProblem(1.0, a, np.zeros((dim, dim)), ls, rs)
            sbmm4s_naive(prob)

        records.append(BenchRecord("sbmm4s-fused", dim,
                                   median_of(fused, repeats), flops))
        records.append(BenchRecord("sbmm4s-naive", dim,
                                   median_of(naive, repeats), flops))
    return records


# ------------------------------------------------------------- sweep benchmark

def bench_sweep(model, d_values, sweeps=2, workers=1, seed=42, tol=1e-10):
    """One solve per bond dimension; the point is the median sweep time."""
    from .driver import SweepSchedule, solve
    records = []
    for d in d_values:
        result = solve(model, SweepSchedule(n_sweeps=sweeps, d=int(d),
                                            lanczos_tol=tol),
                       workers=workers, seed=seed)
        per_sweep = {}
        for r in result.records:
            if r.sweep > 0:
                acc = per_sweep.setdefault(r.sweep, [0.0, 0])
                acc[0] += r.wall_seconds
                acc[1] += r.flops
        times = [v[0] for v in per_sweep.values()]
        flops = [v[1] for v in per_sweep.values()]
        records.append(BenchRecord("sweep", int(d), float(np.median(times)),
                                   int(np.median(flops))))
    return records


# ------------------------------------------------------------ self-check suite

def _check_sectors(rng, cases=150):
    worst = 0.0
    for _ in range(cases):
        nsec = int(rng.integers(1, 4))
        qns = sorted({(int(q),) for q in rng.integers(-2, 3, size=nsec)})
        basis = SectorBasis([(q, int(rng.integers(1, 5))) for q in qns])
        kind = ("multiply", "kron")[int(rng.integers(0, 2))]
        ops = []
        for _k in range(2):
            delta = (int(rng.integers(-1, 2)),)
            m = SectorMatrix(basis, basis, delta)
            for cq, dc in basis.entries:
                rq = (cq[0] + delta[0],)
                if rq in basis:
                    m.set_block(rq, cq,
                                rng.standard_normal((basis.dim(rq), dc)))
            ops.append(m)
        out = sector_apply(ops[0], ops[1], kind)
        report = full_form_check(out, ops[0], ops[1], kind)
        scale = 1.0 + float(np.max(np.abs(report.dense))) if report.dense.size \
            else 1.0
        worst = max(worst, report.deviation / scale)
    return worst <= 1e-12, f"max relative deviation {worst:.2e}"


def _check_sbmm4s(rng, cases=150):
    worst = 0.0
    for _ in range(cases):
        m, n, q, r = (int(rng.integers(1, 9)) for _ in range(4))
        p = int(rng.integers(1, 9))
        prob = AccumulationProblem(
            float(rng.standard_normal()), rng.standard_normal((m, n)),
            rng.standard_normal((q, r)),
            stack_matrices([rng.standard_normal((q, m)) for _ in range(p)]),
            stack_matrices([rng.standard_normal((r, n)) for _ in range(p)]))
        ref = prob.b.copy()
        for i in range(p):
            ref += prob.alpha * (prob.l_stack[:, :, i] @ prob.a
                                 @ prob.r_stack[:, :, i].T)
        backend = NumpyGemm(KernelCounter())
        sbmm4s(prob, np.zeros(prob.workspace_needed()), backend)
        mult, red, _ = backend.counter.snapshot()
        if (mult, red) != (2, 0):
            return False, f"kernel counts {(mult, red)} != (2, 0)"
        worst = max(worst, float(np.max(np.abs(prob.b - ref)))
                    / (1.0 + float(np.max(np.abs(ref)))))
    return worst <= 1e-12, f"max relative deviation {worst:.2e}"


def _check_ttcache(rng, cases=60):
    for _ in range(cases):
        n = int(rng.integers(1, 40))
        nodes = [DependencyNode(i, bytes_payload(bytes([i % 251])
                                                 * int(rng.integers(1, 16))))
                 for i in range(n)]
        for i in range(1, n):
            nodes[int(rng.integers(0, i))].children.append(nodes[i])
        need = plan_check(nodes[0])
        stats = ttcache_run(None, nodes[0], capacity=need)
        if stats.loads != n or stats.peak_offset != need:
            return False, f"loads {stats.loads}/{n} peak {stats.peak_offset}/{need}"
    return True, f"{cases} random trees"


def _check_mazerunner():
    for workers in (1, 2, 4):
        sink = KeyedSink()
        pool = RunnerPool(workers=workers)
        stats = pool.run_batch(
            (Task(fn=lambda ctx: 1, key="n") for _ in range(500)), sink)
        if stats.tasks_found != stats.tasks_executed != 500:
            return False, f"found/executed mismatch at {workers} workers"
        if sink.values["n"] != 500:
            return False, f"sink {sink.values['n']} != 500 at {workers} workers"
    return True, "exactly-once over worker counts {1, 2, 4}"


def _check_dmrg_small():
    from .driver import SweepSchedule, solve
    from .model import ModelSpec, build_model
    model = build_model(ModelSpec("heisenberg-chain", n=6))
    result = solve(model, SweepSchedule(n_sweeps=2, d=16, lanczos_tol=1e-12),
                   seed=42)
    dense = model.dense_hamiltonian()
    e_ref = float(np.linalg.eigvalsh(dense)[0])
    rel = abs(result.energy - e_ref) / abs(e_ref)
    return rel <= 1e-10, f"relative energy error {rel:.2e}"


def run_checks(seed=42):
    """The oracle battery behind the ``check`` subcommand."""
    rng = np.random.default_rng(seed)
    suites = [
        ("sector-algebra", lambda: _check_sectors(rng)),
        ("sbmm4s", lambda: _check_sbmm4s(rng)),
        ("ttcache", lambda: _check_ttcache(rng)),
        ("maze-runner", lambda: _check_mazerunner()),
        ("dmrg-small", lambda: _check_dmrg_small()),
    ]
    results = []
    for name, fn in suites:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
