"""Strided batched matrix multiplication with fused sum reduction.

Computes ``B := B + alpha * sum_i L_i A R_i^T`` in two kernel calls and no
standalone reduction pass.  Step 1 is a batched GEMM whose output members are
interleaved in a flat column-major workspace: member ``i`` starts ``i*m`` rows
into each column of a region with leading dimension ``m*p``, so the workspace
reinterpreted as one ``(m*p) x r`` matrix is the vertical concatenation of
the member products ``A @ R_i^T``.  Step 2 multiplies the horizontally
concatenated ``q x (m*p)`` view of the L stack against that tall matrix; the
shared inner dimension performs the sum over members for free.

All quantities are float64.  Stacks are Fortran-ordered 3-d arrays whose
members are contiguous slabs, matching the stride conventions of standard
strided-batched GEMM interfaces.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .gemm import default_backend


class WorkspaceError(ValueError):
    pass


@dataclass(frozen=True)
class DenseMatrix:
    """Column-major matrix inside a flat buffer: shape, leading dim, offset."""

    rows: int
    cols: int
    ld: int
    start: int = 0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("matrix dimensions must be positive")
        if self.ld < self.rows:
            raise ValueError(f"leading dimension {self.ld} < rows {self.rows}")

    def extent(self):
        return self.start + (self.cols - 1) * self.ld + self.rows

    def view(self, buf):
        if self.extent() > buf.size:
            raise WorkspaceError(
                f"matrix extent {self.extent()} exceeds buffer size {buf.size}")
        itemsize = buf.itemsize
        return as_strided(buf[self.start:], shape=(self.rows, self.cols),
                          strides=(itemsize, self.ld * itemsize))


@dataclass(frozen=True)
class BatchDescriptor:
    """Batch of equally shaped column-major members inside one buffer."""

    count: int
    rows: int
    cols: int
    ld: int
    stride: int
    start: int = 0

    def member(self, buf, i):
        if not 0 <= i < self.count:
            raise IndexError(i)
        return DenseMatrix(self.rows, self.cols, self.ld,
                           self.start + i * self.stride).view(buf)

    def members(self, buf):
        return [self.member(buf, i) for i in range(self.count)]


def _as_stack(arr, name):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"{name} stack must be 3-d, got {arr.ndim}-d")
    if not arr.flags.f_contiguous:
        raise ValueError(f"{name} stack must be Fortran-contiguous")
    return arr


def stack_matrices(mats):
    """Copy equally shaped matrices into a fresh Fortran-ordered 3-d stack."""
    first = np.asarray(mats[0], dtype=float)
    out = np.empty(first.shape + (len(mats),), order="F")
    for i, m in enumerate(mats):
        out[:, :, i] = m
    return out


@dataclass
class AccumulationProblem:
    """Operands of ``B := B + alpha * sum_i L_i A R_i^T`` (dims as required:
    A is m x n, B is q x r, L is q x m x p, R is r x n x p)."""

    alpha: float
    a: np.ndarray
    b: np.ndarray
    l_stack: np.ndarray
    r_stack: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.l_stack = _as_stack(self.l_stack, "L")
        self.r_stack = _as_stack(self.r_stack, "R")
        m, n = self.a.shape
        q, r = self.b.shape
        if self.l_stack.shape[:2] != (q, m):
            raise ValueError(f"L members must be {q}x{m}, got "
                             f"{self.l_stack.shape[:2]}")
        if self.r_stack.shape[:2] != (r, n):
            raise ValueError(f"R members must be {r}x{n}, got "
                             f"{self.r_stack.shape[:2]}")
        if self.l_stack.shape[2] != self.r_stack.shape[2]:
            raise ValueError("L and R stacks disagree on batch count")

    @property
    def shape(self):
        m, n = self.a.shape
        q, r = self.b.shape
        return m, n, q, r, self.l_stack.shape[2]

    def workspace_needed(self):
        m, n, q, r, p = self.shape
        return m * p * r


def batched_gemm_interleaved(a, r_stack, workspace, backend=None):
    """Step 1: fill ``workspace`` with interleaved members ``A @ R_i^T``.

    Returns the ``(m*p) x r`` column-major view of the filled region, which
    is bitwise the vertical concatenation of the member products.
    """
    backend = backend or default_backend()
    a = np.asarray(a, dtype=float)
    r_stack = _as_stack(r_stack, "R")
    m, n = a.shape
    r, n2, p = r_stack.shape
    if n2 != n:
        raise ValueError(f"A is {m}x{n} but R members are {r}x{n2}")
    if workspace.size < m * p * r:
        raise WorkspaceError(
            f"workspace {workspace.size} < required {m * p * r}")
    batch = BatchDescriptor(count=p, rows=m, cols=r, ld=m * p, stride=m)
    members = batch.members(workspace)
    backend.gemm_strided_batched(
        a, [r_stack[:, :, i] for i in range(p)], members, trans_b=True)
    return DenseMatrix(rows=m * p, cols=r, ld=m * p).view(workspace)


def concat_gemm_accumulate(l_stack, temp, alpha, b, backend=None):
    """Step 2: ``B += alpha * [L_1|...|L_p] @ temp`` in a single GEMM."""
    backend = backend or default_backend()
    l_stack = _as_stack(l_stack, "L")
    q, m, p = l_stack.shape
    if temp.shape != (m * p, b.shape[1]):
        raise ValueError(f"temp shape {temp.shape} incompatible with "
                         f"L concat ({q}x{m * p}) and B {b.shape}")
    l_concat = l_stack.reshape((q, m * p), order="F")
    backend.gemm(l_concat, temp, b, alpha=alpha, beta=1.0)


def sbmm4s(problem, workspace, backend=None):
    """Fused accumulation ``B += alpha * sum_i L_i A R_i^T``.

    Uses exactly two multiplication kernels when the workspace holds the full
    ``m*p*r`` temp region; smaller workspaces fall back to splitting the batch
    into halves recursively, each half running the fused two-step path.
    """
    backend = backend or default_backend()
    m, n, q, r, p = problem.shape
    if workspace.size < m * r:
        raise WorkspaceError(
            f"workspace {workspace.size} cannot hold a single {m}x{r} member")
    if workspace.size < m * p * r and p > 1:
        lo = p // 2
        for sl in (slice(0, lo), slice(lo, p)):
            sub = AccumulationProblem(problem.alpha, problem.a, problem.b,
                                      problem.l_stack[:, :, sl],
                                      problem.r_stack[:, :, sl])
            sbmm4s(sub, workspace, backend)
        return problem.b
    temp = batched_gemm_interleaved(problem.a, problem.r_stack, workspace, backend)
    concat_gemm_accumulate(problem.l_stack, temp, problem.alpha, problem.b, backend)
    return problem.b


def sbmm4s_naive(problem, backend=None):
    """Traditional pathway: per-member GEMMs plus a standalone accumulation."""
    backend = backend or default_backend()
    m, n, q, r, p = problem.shape
    for i in range(p):
        t1 = np.zeros((m, r))
        backend.gemm(problem.a, problem.r_stack[:, :, i].T, t1, beta=0.0)
        t2 = np.zeros((q, r))
        backend.gemm(problem.l_stack[:, :, i], t1, t2, beta=0.0)
        backend.add_inplace(problem.b, t2, alpha=problem.alpha)
    return problem.b


def flops_fused(m, n, q, r, p):
    """Predicted FLOPs of the fused path: batched step plus concat step."""
    return 2 * m * r * n * p + 2 * q * r * m * p
