import numpy as np
import pytest

from sector_dmrg.sectors import (
    BasisMismatchError, DensificationError, SectorBasis, SectorError,
    SectorMatrix, SectorOperatorSet, execute_tasks, full_form_check,
    hilbert_dimension, output_spaces, qn_add, qn_sub, sector_apply,
    sector_table, task_table,
)
from oracles import kron_reorder_indices, random_basis


def random_sector_matrix(rng, row_basis, col_basis, delta, fill=1.0):
    m = SectorMatrix(row_basis, col_basis, delta)
    for cq, dc in col_basis.entries:
        rq = qn_add(cq, delta)
        if rq in row_basis and rng.random() < fill:
            m.set_block(rq, cq, rng.standard_normal((row_basis.dim(rq), dc)))
    return m


FERMION_SITE = SectorBasis([((0, 0), 1), ((1, -1), 1), ((1, 1), 1), ((2, 0), 1)])


def fermion_create_up():
    m = SectorMatrix(FERMION_SITE, FERMION_SITE, (1, 1))
    m.set_block((1, 1), (0, 0), [[1.0]])
    m.set_block((2, 0), (1, -1), [[1.0]])
    return m


def fermion_create_dn():
    m = SectorMatrix(FERMION_SITE, FERMION_SITE, (1, -1))
    m.set_block((1, -1), (0, 0), [[1.0]])
    m.set_block((2, 0), (1, 1), [[-1.0]])
    return m


# ------------------------------------------------------------------ sector_table

def test_sector_table_diagonal_times_diagonal():
    basis = SectorBasis([((0,), 1), ((1,), 1)])
    a = SectorMatrix.identity(basis)
    table = sector_table(a, a, "multiply")
    assert table.pairs == (((0,), (0,)), ((1,), (1,)))


def test_sector_table_creation_times_annihilation_brute_force():
    basis = SectorBasis([((0,), 1), ((1,), 2), ((2,), 1)])
    create = SectorMatrix(basis, basis, (1,))
    destroy = SectorMatrix(basis, basis, (-1,))
    table = sector_table(create, destroy, "multiply")
    assert table.delta == (0,)
    # brute force: all (row, col) pairs reachable through an existing mid sector
    expected = set()
    for cq, _ in basis.entries:
        mid = (cq[0] - 1,)
        if mid in basis and (mid[0] + 1,) in basis:
            expected.add(((cq[0],), cq))
    assert set(table.pairs) == expected


def test_sector_table_fermionic_site_double_creation():
    cu, cd = fermion_create_up(), fermion_create_dn()
    table = sector_table(cu, cd, "multiply")
    assert table.pairs == (((2, 0), (0, 0)),)
    # brute force over the 4x4 dense forms
    prod = cu.to_dense() @ cd.to_dense()
    nz = np.argwhere(np.abs(prod) > 0)
    assert nz.tolist() == [[3, 0]]   # basis order: (0,0),(1,-1),(1,1),(2,0)


def test_sector_table_basis_mismatch():
    a = SectorMatrix.identity(SectorBasis([((0,), 1)]))
    b = SectorMatrix.identity(SectorBasis([((1,), 1)]))
    with pytest.raises(BasisMismatchError):
        sector_table(a, b, "multiply")


# -------------------------------------------------------------------- task_table

def test_task_table_identity_identity():
    basis = SectorBasis([((0,), 2), ((1,), 3)])
    eye = SectorMatrix.identity(basis)
    table = task_table(eye, eye, "multiply")
    assert len(table.rows) == 2
    assert all(r.weight == 1.0 for r in table.rows)


def test_task_table_double_creation_single_task():
    table = task_table(fermion_create_up(), fermion_create_dn(), "multiply")
    assert len(table.rows) == 1
    assert table.rows[0].out_key == ((2, 0), (0, 0))


def test_task_table_absent_block_omits_task():
    basis = SectorBasis([((0,), 1), ((1,), 1)])
    eye = SectorMatrix.identity(basis)
    partial = SectorMatrix.identity(basis)
    del partial.blocks[((1,), (1,))]
    table = task_table(eye, partial, "multiply")
    assert len(table.rows) == 1
    assert table.rows[0].out_key == (((0,), (0,)))


# ----------------------------------------------------------------- execute_tasks

def test_execute_empty_table_leaves_out_unchanged():
    basis = SectorBasis([((0,), 2)])
    a = SectorMatrix(basis, basis, (0,))
    table = task_table(a, a, "multiply")
    out = SectorMatrix.identity(basis)
    before = out.to_dense().copy()
    execute_tasks(table, a, a, out)
    assert np.array_equal(out.to_dense(), before)


def test_execute_multiply_matches_dense_product():
    rng = np.random.default_rng(7)
    basis = SectorBasis([((0,), 2), ((1,), 2)])
    a = random_sector_matrix(rng, basis, basis, (1,))
    b = random_sector_matrix(rng, basis, basis, (-1,))
    out = sector_apply(a, b, "multiply")
    ref = a.to_dense() @ b.to_dense()
    assert np.max(np.abs(out.to_dense() - ref)) < 1e-14


def test_execute_kron_matches_dense_kron():
    basis = SectorBasis([((0,), 1), ((1,), 1)])
    num = SectorMatrix(basis, basis, (0,))
    num.set_block((1,), (1,), [[1.0]])
    out = sector_apply(num, num, "kron")
    ref = np.kron(num.to_dense(), num.to_dense())
    idx = kron_reorder_indices(basis.entries, basis.entries)
    assert np.max(np.abs(out.to_dense() - ref[np.ix_(idx, idx)])) == 0.0


def test_execute_dimension_mismatch_signals_corrupt_table():
    basis = SectorBasis([((0,), 2), ((1,), 3)])
    a = random_sector_matrix(np.random.default_rng(0), basis, basis, (1,))
    table = task_table(a, a.transpose(), "multiply")
    bad = SectorMatrix(basis, basis, (-1,))
    bad.set_block((0,), (1,), np.ones((2, 3)))
    bad.blocks[((0,), (1,))] = np.ones((1, 3))   # corrupt behind the check
    out = SectorMatrix(basis, basis, (0,))
    with pytest.raises(SectorError):
        execute_tasks(table, a, bad, out)


def test_execute_honors_transpose_flags():
    rng = np.random.default_rng(3)
    basis = SectorBasis([((0,), 2), ((1,), 3)])
    a = random_sector_matrix(rng, basis, basis, (1,))
    table = task_table(a, a, "multiply")
    flipped = table._replace(rows=tuple(
        row._replace(a_key=(row.a_key[1], row.a_key[0]), trans_a=True)
        for row in table.rows))
    out = SectorMatrix(basis, basis, (2,))
    execute_tasks(flipped, a.transpose(), a, out)
    ref = a.to_dense() @ a.to_dense()
    # transposing the stored transpose recovers the original product
    assert np.max(np.abs(out.to_dense() - ref)) < 1e-13


# --------------------------------------------------------------- full_form_check

def test_full_form_identity():
    basis = SectorBasis([((0,), 2), ((1,), 1)])
    report = full_form_check(SectorMatrix.identity(basis))
    assert np.array_equal(report.dense, np.eye(3))
    assert report.deviation == 0.0


def test_full_form_random_multiply_within_tolerance():
    rng = np.random.default_rng(11)
    basis = SectorBasis(random_basis(rng, 3, 4))
    a = random_sector_matrix(rng, basis, basis, (0,))
    b = random_sector_matrix(rng, basis, basis, (1,))
    out = sector_apply(a, b, "multiply")
    report = full_form_check(out, a, b, "multiply")
    scale = max(1.0, np.max(np.abs(report.dense)))
    assert report.deviation <= 1e-12 * scale


def test_full_form_detects_corruption():
    rng = np.random.default_rng(13)
    basis = SectorBasis([((0,), 2), ((1,), 2)])
    a = random_sector_matrix(rng, basis, basis, (0,))
    b = random_sector_matrix(rng, basis, basis, (0,))
    out = sector_apply(a, b, "multiply")
    key = out.block_keys()[0]
    out.blocks[key] = out.blocks[key] + 1.0
    report = full_form_check(out, a, b, "multiply")
    assert report.deviation > 0.5


def test_full_form_guard():
    basis = SectorBasis([((0,), 5000)])
    with pytest.raises(DensificationError):
        full_form_check(SectorMatrix.identity(basis))


# -------------------------------------------------------------------- hilbert dim

def test_hilbert_dimension_paper_values():
    assert hilbert_dimension(18, 18) == 9_075_135_300
    assert abs(float(hilbert_dimension(54, 54)) / 2.485e31 - 1) < 1e-3
    assert hilbert_dimension(1, 0) == 1


def test_hilbert_dimension_range_check():
    with pytest.raises(ValueError):
        hilbert_dimension(2, 5)


# -------------------------------------------------------------- invariant sweeps

@pytest.mark.parametrize("kind", ["multiply", "kron", "add"])
def test_selection_rule_holds_on_results(kind):
    rng = np.random.default_rng(17)
    for _ in range(40):
        basis = SectorBasis(random_basis(rng, 3, 3, ncomp=2))
        da = tuple(int(x) for x in rng.integers(-1, 2, size=2))
        db = da if kind == "add" else tuple(int(x) for x in rng.integers(-1, 2, size=2))
        a = random_sector_matrix(rng, basis, basis, da, fill=0.8)
        b = random_sector_matrix(rng, basis, basis, db, fill=0.8)
        out = sector_apply(a, b, kind)
        for rq, cq in out.block_keys():
            assert qn_sub(rq, cq) == out.delta


def test_oracle_equivalence_randomized():
    rng = np.random.default_rng(23)
    for _ in range(60):
        kind = ("multiply", "kron", "add")[rng.integers(0, 3)]
        basis = SectorBasis(random_basis(rng, 4, 6))
        da = (int(rng.integers(-1, 2)),)
        db = da if kind == "add" else (int(rng.integers(-1, 2)),)
        a = random_sector_matrix(rng, basis, basis, da, fill=0.7)
        b = random_sector_matrix(rng, basis, basis, db, fill=0.7)
        out = sector_apply(a, b, kind)
        da_, db_ = a.to_dense(), b.to_dense()
        if kind == "multiply":
            ref = da_ @ db_
        elif kind == "add":
            ref = da_ + db_
        else:
            idx = kron_reorder_indices(basis.entries, basis.entries)
            ref = np.kron(da_, db_)[np.ix_(idx, idx)]
        got = out.to_dense()
        denom = max(np.linalg.norm(ref), 1.0)
        assert np.linalg.norm(got - ref) <= 1e-12 * denom


def test_task_independence_under_permutation():
    rng = np.random.default_rng(29)
    basis = SectorBasis(random_basis(rng, 4, 4))
    a = random_sector_matrix(rng, basis, basis, (0,), fill=0.9)
    b = random_sector_matrix(rng, basis, basis, (0,), fill=0.9)
    table = task_table(a, b, "multiply")
    ref = execute_tasks(table, a, b, SectorMatrix(basis, basis, (0,)))
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(len(table.rows))
        shuffled = table._replace(rows=tuple(table.rows[i] for i in perm))
        out = execute_tasks(shuffled, a, b, SectorMatrix(basis, basis, (0,)))
        eps = np.finfo(float).eps
        for key in ref.block_keys():
            n_add = sum(1 for r in table.rows if r.out_key == key)
            bound = 8 * eps * max(n_add, 1) * max(1.0, np.max(np.abs(ref.blocks[key])))
            assert np.max(np.abs(out.blocks[key] - ref.blocks[key])) <= bound


def test_sector_table_matches_dense_realized_keys():
    rng = np.random.default_rng(31)
    for _ in range(25):
        basis = SectorBasis(random_basis(rng, 4, 3))
        da = (int(rng.integers(-1, 2)),)
        db = (int(rng.integers(-1, 2)),)
        a = random_sector_matrix(rng, basis, basis, da, fill=1.0)
        b = random_sector_matrix(rng, basis, basis, db, fill=1.0)
        table = sector_table(a, b, "multiply")
        out = sector_apply(a, b, "multiply")
        realized = {k for k in out.block_keys()
                    if np.max(np.abs(out.blocks[k])) > 0}
        assert set(table.pairs) == realized


# ------------------------------------------------------------------ type checks

def test_basis_validation():
    with pytest.raises(SectorError):
        SectorBasis([((0,), 1), ((0,), 2)])
    with pytest.raises(SectorError):
        SectorBasis([((0,), 0)])


def test_operator_set_shared_bases_and_unique_positions():
    basis = SectorBasis([((0,), 1), ((1,), 1)])
    eye = SectorMatrix.identity(basis)
    ops = SectorOperatorSet("number", [0, 1], [eye, eye.copy()])
    assert len(ops) == 2
    with pytest.raises(SectorError):
        SectorOperatorSet("number", [0, 0], [eye, eye])
    other = SectorMatrix.identity(SectorBasis([((0,), 2)]))
    with pytest.raises(BasisMismatchError):
        SectorOperatorSet("number", [0, 1], [eye, other])


def test_output_spaces_add_requires_matching_delta():
    basis = SectorBasis([((0,), 1), ((1,), 1)])
    a = SectorMatrix(basis, basis, (0,))
    b = SectorMatrix(basis, basis, (1,))
    with pytest.raises(BasisMismatchError):
        output_spaces(a, b, "add")
