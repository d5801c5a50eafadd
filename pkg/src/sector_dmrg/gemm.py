"""Pluggable dense-multiply kernels with call and FLOP accounting.

Two backends share one contract: a plain GEMM (``c := beta*c + alpha*a@b``)
and a strided-batched GEMM whose members write into caller-supplied strided
views.  ``NumpyGemm`` delegates to ``np.matmul``; ``ReferenceGemm`` is a
portable blocked multiply-and-sum loop that never calls a matrix-multiply
primitive, so results can be cross-checked without trusting any BLAS.

Each backend counts kernel entries: one batched call is one multiply kernel
regardless of batch size, and ``add_inplace`` is the lone standalone
summation (reduction) kernel, used only by non-fused fallback paths.
FLOPs are the usual 2*m*n*k per GEMM, multiply-add counted as two.
"""

import threading

import numpy as np


class KernelCounter:
    """Thread-safe tally of multiply kernels, reduction kernels, and FLOPs."""

    def __init__(self):
        self._lock = threading.Lock()
        self.multiplies = 0
        self.reductions = 0
        self.flops = 0

    def count(self, multiplies=0, reductions=0, flops=0):
        with self._lock:
            self.multiplies += multiplies
            self.reductions += reductions
            self.flops += flops

    def snapshot(self):
        with self._lock:
            return (self.multiplies, self.reductions, self.flops)

    def reset(self):
        with self._lock:
            self.multiplies = 0
            self.reductions = 0
            self.flops = 0


def _check_gemm_dims(a, b, c):
    if a.ndim != 2 or b.ndim != 2 or c.ndim != 2:
        raise ValueError("gemm operands must be 2-d")
    if a.shape[1] != b.shape[0] or c.shape != (a.shape[0], b.shape[1]):
        raise ValueError(f"gemm shape mismatch {a.shape} x {b.shape} -> {c.shape}")


class NumpyGemm:
    """Backend delegating the inner product to numpy's matmul."""

    name = "numpy"

    def __init__(self, counter=None):
        self.counter = counter or KernelCounter()

    def gemm(self, a, b, c, alpha=1.0, beta=1.0):
        _check_gemm_dims(a, b, c)
        prod = np.matmul(a, b)
        if beta == 0.0:
            c[...] = 0.0
        elif beta != 1.0:
            c *= beta
        if alpha == 1.0:
            c += prod
        else:
            c += alpha * prod
        m, k = a.shape
        n = b.shape[1]
        self.counter.count(multiplies=1, flops=2 * m * n * k)

    def gemm_strided_batched(self, a, b_members, c_members, trans_b=True):
        """One batched kernel: ``c_i := a @ op(b_i)`` for every member."""
        flops = 0
        for b_i, c_i in zip(b_members, c_members):
            op_b = b_i.T if trans_b else b_i
            _check_gemm_dims(a, op_b, c_i)
            c_i[...] = np.matmul(a, op_b)
            flops += 2 * a.shape[0] * op_b.shape[1] * a.shape[1]
        self.counter.count(multiplies=1, flops=flops)

    def add_inplace(self, c, x, alpha=1.0):
        """Standalone summation kernel; only fallback paths should need it."""
        c += alpha * x
        self.counter.count(reductions=1)


def _blocked_matmul(a, b, block=32):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i0 in range(0, m, block):
        i1 = min(i0 + block, m)
        for j0 in range(0, n, block):
            j1 = min(j0 + block, n)
            acc = np.zeros((i1 - i0, j1 - j0))
            for k0 in range(0, k, block):
                k1 = min(k0 + block, k)
                acc += np.sum(a[i0:i1, k0:k1, None] * b[None, k0:k1, j0:j1], axis=1)
            out[i0:i1, j0:j1] = acc
    return out


class ReferenceGemm:
    """Blocked triple-loop backend; elementwise multiply and sum only."""

    name = "reference"

    def __init__(self, counter=None, block=32):
        self.counter = counter or KernelCounter()
        self.block = block

    def gemm(self, a, b, c, alpha=1.0, beta=1.0):
        _check_gemm_dims(a, b, c)
        prod = _blocked_matmul(np.asarray(a, float), np.asarray(b, float), self.block)
        if beta == 0.0:
            c[...] = 0.0
        elif beta != 1.0:
            c *= beta
        c += alpha * prod
        m, k = a.shape
        n = b.shape[1]
        self.counter.count(multiplies=1, flops=2 * m * n * k)

    def gemm_strided_batched(self, a, b_members, c_members, trans_b=True):
        flops = 0
        for b_i, c_i in zip(b_members, c_members):
            op_b = b_i.T if trans_b else b_i
            _check_gemm_dims(a, op_b, c_i)
            c_i[...] = _blocked_matmul(np.asarray(a, float),
                                       np.asarray(op_b, float), self.block)
            flops += 2 * a.shape[0] * op_b.shape[1] * a.shape[1]
        self.counter.count(multiplies=1, flops=flops)

    def add_inplace(self, c, x, alpha=1.0):
        c += alpha * x
        self.counter.count(reductions=1)


_default = NumpyGemm()


def default_backend():
    return _default
