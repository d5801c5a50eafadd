"""Quantum-number sector-sparse matrices and the four-level operation hierarchy.

Matrices are stored as dense blocks keyed by (row QN, column QN) pairs, where a
quantum number (QN) is a plain tuple of signed integers with componentwise
additive fusion.  Every block of an operator with shift ``delta`` satisfies the
selection rule ``row_qn = col_qn + delta``; absent blocks are implicit zeros.

Operations follow a four-level hierarchy: ``sector_table`` enumerates possible
output sector pairs, ``task_table`` lists the concrete block-level tasks,
``execute_tasks`` performs them, and ``full_form_check`` densifies the result
and compares against a dense-path computation.
"""

import math
from typing import NamedTuple

import numpy as np

DENSIFY_GUARD = 4096

KINDS = ("multiply", "kron", "add")


class SectorError(Exception):
    pass


class BasisMismatchError(SectorError):
    pass


class DensificationError(SectorError):
    pass


def qn_add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def qn_sub(a, b):
    return tuple(x - y for x, y in zip(a, b))


def qn_neg(a):
    return tuple(-x for x in a)


class SectorBasis:
    """Ordered set of (quantum number, dimension) sectors spanning a space."""

    def __init__(self, entries):
        entries = sorted((tuple(q), int(d)) for q, d in entries)
        if not entries:
            raise SectorError("empty basis")
        qns = [q for q, _ in entries]
        if len(set(qns)) != len(qns):
            raise SectorError("duplicate quantum numbers in basis")
        ncomp = len(qns[0])
        if any(len(q) != ncomp for q in qns):
            raise SectorError("inhomogeneous quantum-number length")
        if any(d <= 0 for _, d in entries):
            raise SectorError("sector dimensions must be positive")
        self.entries = tuple(entries)
        self.index = {q: i for i, (q, _) in enumerate(entries)}
        self.dims = {q: d for q, d in entries}
        offs, total = {}, 0
        for q, d in entries:
            offs[q] = total
            total += d
        self.offsets = offs
        self.total_dim = total

    def __contains__(self, qn):
        return tuple(qn) in self.index

    def dim(self, qn):
        return self.dims[tuple(qn)]

    def offset(self, qn):
        return self.offsets[tuple(qn)]

    def qns(self):
        return [q for q, _ in self.entries]

    def __eq__(self, other):
        return isinstance(other, SectorBasis) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def __repr__(self):
        return f"SectorBasis({list(self.entries)!r})"


class FusedBasis:
    """Product of two sector bases with the layout of each (qa, qb) combination.

    Combinations fusing to the same total QN share one sector; ``layout`` maps
    (qa, qb) to the row offset of that combination inside its fused sector.
    """

    def __init__(self, basis_a, basis_b):
        self.basis_a = basis_a
        self.basis_b = basis_b
        sizes, layout = {}, {}
        for qa, da in basis_a.entries:
            for qb, db in basis_b.entries:
                q = qn_add(qa, qb)
                layout[(qa, qb)] = sizes.get(q, 0)
                sizes[q] = sizes.get(q, 0) + da * db
        self.basis = SectorBasis(sizes.items())
        self.layout = layout

    def combo_offset(self, qa, qb):
        return self.layout[(qa, qb)]


class SectorMatrix:
    """Block-sparse matrix with a fixed quantum-number shift ``delta``."""

    def __init__(self, row_basis, col_basis, delta, blocks=None):
        self.row_basis = row_basis
        self.col_basis = col_basis
        self.delta = tuple(delta)
        self.blocks = {}
        if blocks:
            for (rq, cq), arr in blocks.items():
                self.set_block(rq, cq, arr)

    @classmethod
    def zeros(cls, row_basis, col_basis, delta):
        return cls(row_basis, col_basis, delta)

    @classmethod
    def identity(cls, basis):
        zero = tuple(0 for _ in basis.entries[0][0])
        m = cls(basis, basis, zero)
        for q, d in basis.entries:
            m.blocks[(q, q)] = np.eye(d)
        return m

    def _check_key(self, rq, cq):
        rq, cq = tuple(rq), tuple(cq)
        if rq not in self.row_basis or cq not in self.col_basis:
            raise SectorError(f"block key ({rq}, {cq}) outside bases")
        if qn_sub(rq, cq) != self.delta:
            raise SectorError(
                f"selection rule violated: {rq} - {cq} != delta {self.delta}")
        return rq, cq

    def set_block(self, rq, cq, arr):
        rq, cq = self._check_key(rq, cq)
        arr = np.asarray(arr, dtype=float)
        shape = (self.row_basis.dim(rq), self.col_basis.dim(cq))
        if arr.shape != shape:
            raise SectorError(f"block ({rq}, {cq}) shape {arr.shape} != {shape}")
        self.blocks[(rq, cq)] = arr

    def block(self, rq, cq):
        return self.blocks.get((tuple(rq), tuple(cq)))

    def add_to_block(self, rq, cq, arr):
        key = self._check_key(rq, cq)
        if key in self.blocks:
            self.blocks[key] = self.blocks[key] + arr
        else:
            self.set_block(*key, arr)

    def block_keys(self):
        return sorted(self.blocks)

    def scaled(self, alpha):
        out = SectorMatrix(self.row_basis, self.col_basis, self.delta)
        for k, v in self.blocks.items():
            out.blocks[k] = alpha * v
        return out

    def transpose(self):
        out = SectorMatrix(self.col_basis, self.row_basis, qn_neg(self.delta))
        for (rq, cq), v in self.blocks.items():
            out.blocks[(cq, rq)] = v.T.copy()
        return out

    def copy(self):
        out = SectorMatrix(self.row_basis, self.col_basis, self.delta)
        for k, v in self.blocks.items():
            out.blocks[k] = v.copy()
        return out

    def norm_max(self):
        return max((float(np.max(np.abs(v))) for v in self.blocks.values()),
                   default=0.0)

    def to_dense(self):
        if max(self.row_basis.total_dim, self.col_basis.total_dim) > DENSIFY_GUARD:
            raise DensificationError(
                f"dimension exceeds densification guard {DENSIFY_GUARD}")
        out = np.zeros((self.row_basis.total_dim, self.col_basis.total_dim))
        for (rq, cq), v in self.blocks.items():
            r0 = self.row_basis.offset(rq)
            c0 = self.col_basis.offset(cq)
            out[r0:r0 + v.shape[0], c0:c0 + v.shape[1]] = v
        return out

    @classmethod
    def from_dense(cls, arr, row_basis, col_basis, delta, tol=0.0):
        """Split a dense matrix into sector blocks, dropping sub-``tol`` blocks.

        Raises if any weight violating the selection rule exceeds ``tol``.
        """
        arr = np.asarray(arr, dtype=float)
        m = cls(row_basis, col_basis, delta)
        leaked = 0.0
        for rq, dr in row_basis.entries:
            r0 = row_basis.offset(rq)
            for cq, dc in col_basis.entries:
                c0 = col_basis.offset(cq)
                sub = arr[r0:r0 + dr, c0:c0 + dc]
                if not np.any(sub):
                    continue
                if qn_sub(rq, cq) == m.delta:
                    if np.max(np.abs(sub)) > tol:
                        m.blocks[(rq, cq)] = sub.copy()
                else:
                    leaked = max(leaked, float(np.max(np.abs(sub))))
        if leaked > tol:
            raise SectorError(f"dense matrix violates selection rule by {leaked}")
        return m


class SectorOperatorSet:
    """Matrices of one operator kind sharing bases, labeled by position index."""

    def __init__(self, kind, positions, matrices):
        if len(positions) != len(matrices):
            raise SectorError("positions/matrices length mismatch")
        if len(set(positions)) != len(positions):
            raise SectorError("duplicate positions within an operator set")
        if matrices:
            rb, cb = matrices[0].row_basis, matrices[0].col_basis
            for m in matrices:
                if m.row_basis != rb or m.col_basis != cb:
                    raise BasisMismatchError("operator set members must share bases")
        self.kind = kind
        self.positions = list(positions)
        self.matrices = list(matrices)

    def __iter__(self):
        return iter(zip(self.positions, self.matrices))

    def __len__(self):
        return len(self.matrices)


class SectorTable(NamedTuple):
    kind: str
    delta: tuple
    pairs: tuple       # sorted (row_qn, col_qn) output sector pairs


class TaskRow(NamedTuple):
    a_key: tuple       # (row_qn, col_qn) block of the left operand, or None
    b_key: tuple       # block of the right operand, or None
    out_key: tuple
    weight: float
    trans_a: bool
    trans_b: bool
    row_off: int       # sub-block placement inside the output block (kron)
    col_off: int


class TaskTable(NamedTuple):
    kind: str
    rows: tuple


def _check_operands(a, b, kind):
    if kind not in KINDS:
        raise SectorError(f"unknown operation kind {kind!r}")
    if kind == "multiply":
        if a.col_basis != b.row_basis:
            raise BasisMismatchError("multiply: inner bases differ")
    elif kind == "add":
        if a.row_basis != b.row_basis or a.col_basis != b.col_basis:
            raise BasisMismatchError("add: operand bases differ")
        if a.delta != b.delta:
            raise BasisMismatchError("add: operand deltas differ")


def output_spaces(a, b, kind):
    """Row basis, column basis, and delta of the result of ``a (kind) b``.

    For ``kron`` the bases are FusedBasis objects carrying the combination
    layout; otherwise plain SectorBasis.
    """
    _check_operands(a, b, kind)
    if kind == "multiply":
        return a.row_basis, b.col_basis, qn_add(a.delta, b.delta)
    if kind == "add":
        return a.row_basis, a.col_basis, a.delta
    return (FusedBasis(a.row_basis, b.row_basis),
            FusedBasis(a.col_basis, b.col_basis),
            qn_add(a.delta, b.delta))


def sector_table(a, b, kind):
    """Level 1: enumerate the possible output sector pairs of ``a (kind) b``."""
    _check_operands(a, b, kind)
    pairs = set()
    if kind == "multiply":
        for cq, _ in b.col_basis.entries:
            mid = qn_add(cq, b.delta)
            if mid not in b.row_basis:
                continue
            rq = qn_add(mid, a.delta)
            if rq in a.row_basis:
                pairs.add((rq, cq))
    elif kind == "add":
        for cq, _ in a.col_basis.entries:
            rq = qn_add(cq, a.delta)
            if rq in a.row_basis:
                pairs.add((rq, cq))
    else:
        a_pairs = [(qn_add(cq, a.delta), cq) for cq, _ in a.col_basis.entries
                   if qn_add(cq, a.delta) in a.row_basis]
        b_pairs = [(qn_add(cq, b.delta), cq) for cq, _ in b.col_basis.entries
                   if qn_add(cq, b.delta) in b.row_basis]
        for ra, ca in a_pairs:
            for rb, cb in b_pairs:
                pairs.add((qn_add(ra, rb), qn_add(ca, cb)))
    delta = qn_add(a.delta, b.delta) if kind != "add" else a.delta
    return SectorTable(kind, delta, tuple(sorted(pairs)))


def task_table(a, b, kind):
    """Level 2: list the block-level tasks whose execution forms ``a (kind) b``."""
    _check_operands(a, b, kind)
    rows = []
    if kind == "multiply":
        by_row = {}
        for (rb_, cb_) in b.blocks:
            by_row.setdefault(rb_, []).append(cb_)
        for (ra, ca) in sorted(a.blocks):
            for cb_ in sorted(by_row.get(ca, ())):
                rows.append(TaskRow((ra, ca), (ca, cb_), (ra, cb_),
                                    1.0, False, False, 0, 0))
    elif kind == "add":
        for key in sorted(a.blocks):
            rows.append(TaskRow(key, None, key, 1.0, False, False, 0, 0))
        for key in sorted(b.blocks):
            rows.append(TaskRow(None, key, key, 1.0, False, False, 0, 0))
    else:
        fused_row = FusedBasis(a.row_basis, b.row_basis)
        fused_col = FusedBasis(a.col_basis, b.col_basis)
        for (ra, ca) in sorted(a.blocks):
            for (rb_, cb_) in sorted(b.blocks):
                out_key = (qn_add(ra, rb_), qn_add(ca, cb_))
                rows.append(TaskRow((ra, ca), (rb_, cb_), out_key, 1.0,
                                    False, False,
                                    fused_row.combo_offset(ra, rb_),
                                    fused_col.combo_offset(ca, cb_)))
    return TaskTable(kind, tuple(rows))


def _oriented(arr, trans):
    return arr.T if trans else arr


def execute_tasks(table, a, b, out):
    """Level 3: accumulate every task of ``table`` into the ``out`` matrix.

    Tasks with distinct output keys are independent; accumulation into one
    output block is a plain sum, so any execution order agrees up to
    floating-point reassociation.
    """
    for row in table.rows:
        if table.kind == "multiply":
            blk_a = _oriented(a.blocks[row.a_key], row.trans_a)
            blk_b = _oriented(b.blocks[row.b_key], row.trans_b)
            if blk_a.shape[1] != blk_b.shape[0]:
                raise SectorError(f"corrupted task table: inner dims "
                                  f"{blk_a.shape} x {blk_b.shape}")
            out.add_to_block(*row.out_key, row.weight * (blk_a @ blk_b))
        elif table.kind == "add":
            src = a.blocks[row.a_key] if row.a_key is not None else b.blocks[row.b_key]
            out.add_to_block(*row.out_key, row.weight * src)
        else:
            blk = row.weight * np.kron(a.blocks[row.a_key], b.blocks[row.b_key])
            rq, cq = row.out_key
            key = out._check_key(rq, cq)
            if key not in out.blocks:
                out.blocks[key] = np.zeros(
                    (out.row_basis.dim(rq), out.col_basis.dim(cq)))
            tgt = out.blocks[key]
            tgt[row.row_off:row.row_off + blk.shape[0],
                row.col_off:row.col_off + blk.shape[1]] += blk
    return out


def sector_apply(a, b, kind):
    """Levels 1-3 in one call: build the tables and execute into a fresh result."""
    row_basis, col_basis, delta = output_spaces(a, b, kind)
    if kind == "kron":
        out = SectorMatrix(row_basis.basis, col_basis.basis, delta)
        out.fused_row = row_basis
        out.fused_col = col_basis
    else:
        out = SectorMatrix(row_basis, col_basis, delta)
    return execute_tasks(task_table(a, b, kind), a, b, out)


def _dense_op(da, db, kind):
    if kind == "multiply":
        return da @ db
    if kind == "add":
        return da + db
    return np.kron(da, db)


class FullFormReport(NamedTuple):
    dense: np.ndarray
    deviation: float


def full_form_check(op, a=None, b=None, kind=None):
    """Level 4: densify ``op``; when the producing operands are supplied,
    recompute the operation along the dense path and report the maximum
    elementwise deviation.

    For ``kron`` results the dense comparison needs the fused combination
    layout, which ``sector_apply`` attaches to its output; a permutation to
    plain ``np.kron`` ordering is applied before comparing.
    """
    dense = op.to_dense()
    if a is None:
        return FullFormReport(dense, 0.0)
    ref = _dense_op(a.to_dense(), b.to_dense(), kind)
    if kind == "kron":
        perm = _kron_permutation(op.fused_row, op.fused_col)
        ref = ref[np.ix_(*perm)]
    dev = float(np.max(np.abs(dense - ref))) if ref.size else 0.0
    return FullFormReport(dense, dev)


def _kron_permutation(fused_row, fused_col):
    """Index maps from np.kron ordering into fused-basis (QN-sorted) ordering."""
    maps = []
    for fused in (fused_row, fused_col):
        ba, bb = fused.basis_a, fused.basis_b
        idx = np.empty(fused.basis.total_dim, dtype=int)
        for qa, da in ba.entries:
            for qb, db in bb.entries:
                q = qn_add(qa, qb)
                dst = fused.basis.offset(q) + fused.combo_offset(qa, qb)
                src = ba.offset(qa) * bb.total_dim + bb.offset(qb)
                for i in range(da):
                    start = src + i * bb.total_dim
                    idx[dst + i * db:dst + (i + 1) * db] = np.arange(start, start + db)
        maps.append(idx)
    return maps


def hilbert_dimension(modes, particles):
    """Number of particle-conserving configurations of 2*modes spin-orbitals."""
    if not 0 <= particles <= 2 * modes:
        raise ValueError(f"particle count {particles} outside [0, {2 * modes}]")
    return math.comb(2 * modes, particles)
