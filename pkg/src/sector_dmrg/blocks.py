"""Renormalized-block operator stores and the two-site superblock algebra.

A block store holds every maintained operator of one chain block as a
SectorMatrix: identity, the block Hamiltonian, all single-mode factors and
all term-derived two-factor strings.  Exact enlargement by one site goes
through the sector kron machinery with Jordan-Wigner parity dressing folded
in; partially summed auxiliary operators are materialized per boundary from
the maintained inventory (three-factor strings resolve as single @ pair).

The superblock wavefunction is stored one dense matrix per compatible
(left, site, site, right) quantum-number combination; since site sectors are
one-dimensional each block is a (left dim x right dim) matrix, which is
exactly the A of the accumulated multiply  B += alpha * L A R^T.  The plan
builder groups those per (input block, output block) so one group maps onto
one fused batched-multiply call.
"""

from dataclasses import dataclass

import numpy as np

from .model import KEY_H, KEY_I
from .sbmm4s import flops_fused
from .sectors import (
    FusedBasis, SectorBasis, SectorError, SectorMatrix, SectorOperatorSet,
    qn_add, sector_apply,
)


class BlockError(Exception):
    pass


def parity_matrix(model, basis):
    m = SectorMatrix(basis, basis, model.local.zero_qn())
    for q, d in basis.entries:
        m.blocks[(q, q)] = model.local.parity_sign(q) * np.eye(d)
    return m


def _accumulate(acc, mat, scale=1.0):
    for key, blk in mat.blocks.items():
        acc.add_to_block(*key, scale * blk)


class BlockStore:
    """Operators of one contiguous block of sites, all sharing one basis."""

    def __init__(self, model, side, sites, basis, ops, product_perm=None,
                 fused=None, transform=None):
        self.model = model
        self.side = side            # "L" grows rightward, "R" leftward
        self.sites = sites          # (lo, hi) site range, hi exclusive
        self.basis = basis
        self.ops = ops
        self.product_perm = product_perm   # basis index -> kron product index
        self.fused = fused                 # fusion layout that built this basis
        self.transform = transform         # W mapping fused basis -> this basis

    @property
    def n_sites(self):
        return self.sites[1] - self.sites[0]

    def mode_range(self):
        mps = self.model.local.modes_per_site
        return self.sites[0] * mps, self.sites[1] * mps

    def op(self, key):
        try:
            return self.ops[key]
        except KeyError:
            raise BlockError(f"operator {key} not maintained on block "
                             f"{self.sites} ({self.side})") from None

    def operator_sets(self):
        """Maintained operators grouped by kind, position-indexed by mode.

        Singles group into creation/annihilation sets labeled by their mode;
        pair strings form one set per dagger pattern with a flat pair index.
        """
        singles = {1: ([], []), 0: ([], [])}
        pairs = {}
        nm = self.model.n_modes
        for key, mat in self.ops.items():
            if key[0] == "C":
                (m, dag) = key[1]
                singles[dag][0].append(m)
                singles[dag][1].append(mat)
            elif key[0] == "P":
                pattern = (key[1][1], key[2][1])
                pos = key[1][0] * nm + key[2][0]
                group = pairs.setdefault(pattern, ([], []))
                group[0].append(pos)
                group[1].append(mat)
        out = [SectorOperatorSet("create", *singles[1]),
               SectorOperatorSet("annihilate", *singles[0])]
        for pattern in sorted(pairs):
            name = "pair-" + "".join("c" if d else "a" for d in pattern)
            out.append(SectorOperatorSet(name, *pairs[pattern]))
        return out

    def resolve(self, factors, _cache=None):
        """Operator of a 1-3 factor string inside this block."""
        if len(factors) == 1:
            return self.op(("C",) + tuple(factors))
        if len(factors) == 2:
            return self.op(("P",) + tuple(factors))
        if len(factors) == 3:
            key = tuple(factors)
            if _cache is not None and key in _cache:
                return _cache[key]
            head = self.op(("C", factors[0]))
            tail = self.op(("P", factors[1], factors[2]))
            mat = sector_apply(head, tail, "multiply")
            if _cache is not None:
                _cache[key] = mat
            return mat
        raise BlockError(f"cannot resolve factor string of length {len(factors)}")


def _required_keys(model, mode_lo, mode_hi):
    keys = [KEY_I, KEY_H]
    for m in range(mode_lo, mode_hi):
        keys.append(("C", (m, 1)))
        keys.append(("C", (m, 0)))
    for pair in sorted(model.pair_keys):
        if len(pair) == 2 and all(mode_lo <= f[0] < mode_hi for f in pair):
            keys.append(("P",) + pair)
    return keys


def _site_sector_op(model, site, dense):
    basis = model.local.basis
    qns = model.local.state_qns
    nz = np.argwhere(np.abs(dense) > 0)
    if nz.size == 0:
        delta = model.local.zero_qn()
    else:
        r, c = nz[0]
        delta = tuple(a - b for a, b in zip(qns[r], qns[c]))
    mat = SectorMatrix(basis, basis, delta)
    for r, c in nz:
        if tuple(a - b for a, b in zip(qns[r], qns[c])) != delta:
            raise BlockError("site operator mixes quantum-number shifts")
        mat.set_block(qns[r], qns[c], [[dense[r, c]]])
    return mat


def empty_store(model, side, site_index):
    """Width-zero block at a chain edge."""
    basis = SectorBasis([(model.local.zero_qn(), 1)])
    sites = (site_index, site_index)
    ops = {KEY_I: SectorMatrix.identity(basis),
           KEY_H: SectorMatrix(basis, basis, model.local.zero_qn(),
                               {(basis.qns()[0], basis.qns()[0]): np.zeros((1, 1))})}
    return BlockStore(model, side, sites, basis, ops, product_perm=np.array([0]))


def site_store(model, site_index, side):
    """Exact width-one block holding a single site."""
    local = model.local
    m0, m1 = model.site_mode_range(site_index)
    ops = {}
    h_dense = np.zeros((local.dim, local.dim))
    for coef, factors in model.terms:
        if all(m0 <= f[0] < m1 for f in factors):
            h_dense += coef * local.string_matrix(factors, m0)
    for key in _required_keys(model, m0, m1):
        if key == KEY_I:
            ops[key] = SectorMatrix.identity(local.basis)
        elif key == KEY_H:
            ops[key] = _site_sector_op(model, site_index, h_dense)
        elif key[0] == "C":
            (m, dag), = key[1:]
            ops[key] = _site_sector_op(
                model, site_index, local.factor_matrix(m - m0, dag))
        else:
            ops[key] = _site_sector_op(
                model, site_index, local.string_matrix(key[1:], m0))
    return BlockStore(model, side, (site_index, site_index + 1), local.basis,
                      ops, product_perm=np.arange(local.dim))


def _site_local_matrix(model, site_index, factors):
    m0, _ = model.site_mode_range(site_index)
    dense = model.local.string_matrix(factors, m0)
    return _site_sector_op(model, site_index, dense)


def enlarge_block(model, store, site_index):
    """Exact enlargement by one adjacent site (no truncation).

    Left blocks absorb the site on their right (block x site); right blocks
    absorb it on their left (site x block).  Jordan-Wigner dressing: a factor
    acting on later modes drags the parity of everything before it.
    """
    local = model.local
    left = store.side == "L"
    if left and site_index != store.sites[1]:
        raise BlockError("left block must grow onto the next site")
    if not left and site_index != store.sites[0] - 1:
        raise BlockError("right block must grow onto the previous site")
    m0, m1 = model.site_mode_range(site_index)
    blk_lo, blk_hi = store.mode_range()
    new_lo, new_hi = (blk_lo, m1) if left else (m0, blk_hi)
    par_block = parity_matrix(model, store.basis)
    par_site = parity_matrix(model, local.basis)
    eye_site = SectorMatrix.identity(local.basis)
    eye_block = store.ops[KEY_I]
    fused = (FusedBasis(store.basis, local.basis) if left
             else FusedBasis(local.basis, store.basis))

    def kron_lr(a, b):
        return sector_apply(a, b, "kron") if left else sector_apply(b, a, "kron")

    ops = {}
    cache = {}
    for key in _required_keys(model, new_lo, new_hi):
        if key == KEY_I:
            ops[key] = SectorMatrix.identity(fused.basis)
        elif key == KEY_H:
            ops[key] = _enlarged_hamiltonian(model, store, site_index, fused,
                                             par_block, par_site, cache)
        elif key[0] == "C":
            (m, dag), = key[1:]
            if m0 <= m < m1:
                site_mat = _site_local_matrix(model, site_index, ((m, dag),))
                if left:
                    # single factor on the new (later) site drags block parity
                    ops[key] = sector_apply(par_block, site_mat, "kron")
                else:
                    ops[key] = sector_apply(site_mat, eye_block, "kron")
            else:
                ops[key] = kron_lr(store.op(key), eye_site)
        else:
            f1, f2 = key[1], key[2]
            on_site1 = m0 <= f1[0] < m1
            on_site2 = m0 <= f2[0] < m1
            if on_site1 and on_site2:
                ops[key] = kron_lr(eye_block,
                                   _site_local_matrix(model, site_index, (f1, f2)))
            elif not on_site1 and not on_site2:
                ops[key] = kron_lr(store.op(key), eye_site)
            elif left:
                # f1 in the block, f2 on the later site: (c_f1 P_blk) x c_f2
                head = sector_apply(store.op(("C", f1)), par_block, "multiply")
                ops[key] = sector_apply(
                    head, _site_local_matrix(model, site_index, (f2,)), "kron")
            else:
                # f1 on the earlier site, f2 in the block: (c_f1 P_site) x c_f2
                head = sector_apply(_site_local_matrix(model, site_index, (f1,)),
                                    par_site, "multiply")
                ops[key] = sector_apply(head, store.op(("C", f2)), "kron")

    perm = None
    if store.product_perm is not None:
        perm = _extend_perm(model, store, fused, left)
    sites = (store.sites[0], site_index + 1) if left else (site_index, store.sites[1])
    return BlockStore(model, store.side, sites, fused.basis, ops,
                      product_perm=perm, fused=fused)


def _enlarged_hamiltonian(model, store, site_index, fused, par_block, par_site,
                          cache):
    local = model.local
    left = store.side == "L"
    m0, m1 = model.site_mode_range(site_index)
    blk_lo, blk_hi = store.mode_range()
    new_lo, new_hi = (blk_lo, m1) if left else (m0, blk_hi)
    eye_site = SectorMatrix.identity(local.basis)

    def kron_lr(a, b):
        return sector_apply(a, b, "kron") if left else sector_apply(b, a, "kron")

    h = SectorMatrix(fused.basis, fused.basis, model.local.zero_qn())
    _accumulate(h, kron_lr(store.op(KEY_H), eye_site))
    site_h = np.zeros((local.dim, local.dim))
    for coef, factors in model.terms:
        modes = [f[0] for f in factors]
        if not all(new_lo <= m < new_hi for m in modes):
            continue
        inside_old = [f for f in factors if blk_lo <= f[0] < blk_hi]
        on_site = [f for f in factors if m0 <= f[0] < m1]
        if not on_site:
            continue                      # already inside the old block H
        if not inside_old:
            site_h += coef * local.string_matrix(factors, m0)
            continue
        blk_op = store.resolve(tuple(inside_old), cache)
        site_op = _site_local_matrix(model, site_index, tuple(on_site))
        if left:
            if len(on_site) % 2:
                blk_op = sector_apply(blk_op, par_block, "multiply")
            cross = sector_apply(blk_op, site_op, "kron")
        else:
            if len(inside_old) % 2:
                site_op = sector_apply(site_op, par_site, "multiply")
            cross = sector_apply(site_op, blk_op, "kron")
        _accumulate(h, cross, coef)
    if np.any(site_h):
        _accumulate(h, kron_lr(store.ops[KEY_I],
                               _site_sector_op(model, site_index, site_h)))
    return h


def _extend_perm(model, store, fused, left):
    local = model.local
    state_index = {q: i for i, q in enumerate(local.state_qns)}
    old_dim = store.basis.total_dim
    perm = np.empty(fused.basis.total_dim, dtype=int)
    for (qa, qb), off in fused.layout.items():
        q = qn_add(qa, qb)
        base = fused.basis.offset(q) + off
        if left:
            d_old = store.basis.dim(qa)
            o_old = store.basis.offset(qa)
            s_idx = state_index[qb]
            for i in range(d_old):
                perm[base + i] = store.product_perm[o_old + i] * local.dim + s_idx
        else:
            s_idx = state_index[qa]
            d_old = store.basis.dim(qb)
            o_old = store.basis.offset(qb)
            for i in range(d_old):
                perm[base + i] = s_idx * old_dim + store.product_perm[o_old + i]
    return perm


# --------------------------------------------------- auxiliary materialization

def materialize_aux(table, left_store, right_store):
    """Build the partially summed composite operators referenced by a table."""
    out = {"L": {}, "R": {}}
    for side, defs, store in (("L", table.left_aux, left_store),
                              ("R", table.right_aux, right_store)):
        cache = {}
        for key, aux in defs.items():
            acc = None
            for coef, factors in aux.terms:
                mat = store.resolve(factors, cache)
                if acc is None:
                    acc = SectorMatrix(mat.row_basis, mat.col_basis, mat.delta)
                _accumulate(acc, mat, coef)
            out[side][key] = acc
    return out["L"], out["R"]


def _resolve_ref(key, store, aux_mats):
    if key == KEY_I:
        return store.ops[KEY_I]
    if key == KEY_H:
        return store.ops[KEY_H]
    if key[0] == "AUX":
        return aux_mats[key[2]]
    return store.op(key)


# --------------------------------------------------------- dense superblock

def assemble_dense(model, table, left_store, right_store):
    """Densify sum_rows alpha * (L x s1 x s2 x R) in site-product ordering.

    Requires exact (never truncated) stores, whose product permutations map
    sector ordering back to plain Kronecker ordering; the result is directly
    comparable with ``model.dense_hamiltonian()``.
    """
    if left_store.product_perm is None or right_store.product_perm is None:
        raise BlockError("dense assembly needs exact block stores")
    laux, raux = materialize_aux(table, left_store, right_store)
    a, b, c = table.bounds
    mps = model.local.modes_per_site
    s1_site, s2_site = a // mps, b // mps
    local = model.local
    par_site = local.parity_dense()

    def block_dense(store, mat):
        dense = mat.to_dense()
        perm = store.product_perm
        out = np.zeros_like(dense)
        out[np.ix_(perm, perm)] = dense
        return out

    par_left = block_dense(left_store, SectorMatrix(
        left_store.basis, left_store.basis, local.zero_qn(),
        {(q, q): local.parity_sign(q) * np.eye(d)
         for q, d in left_store.basis.entries}))

    dim = (left_store.basis.total_dim * local.dim ** 2
           * right_store.basis.total_dim)
    h = np.zeros((dim, dim))
    for row in table.rows:
        lmat = _resolve_ref(row.left, left_store, laux)
        rmat = _resolve_ref(row.right, right_store, raux)
        ld = block_dense(left_store, lmat)
        rd = block_dense(right_store, rmat)
        o1 = local.string_matrix(row.site1, a)
        o2 = local.string_matrix(row.site2, b)
        e_l, e_1, e_2 = row.dress
        if e_l:
            ld = ld @ par_left
        if e_1:
            o1 = o1 @ par_site
        if e_2:
            o2 = o2 @ par_site
        h += row.alpha * np.kron(np.kron(np.kron(ld, o1), o2), rd)
    return h


# ------------------------------------------------------ superblock wavefunction

class SuperblockWavefunction:
    """Two-site wavefunction in sector-decomposed form: one (left dim x right
    dim) dense matrix per compatible (qL, q1, q2, qR) combination fusing to
    the target quantum number."""

    def __init__(self, left_basis, site_basis, right_basis, target):
        self.left_basis = left_basis
        self.site_basis = site_basis
        self.right_basis = right_basis
        self.target = tuple(target)
        self.keys = []
        for ql, dl in left_basis.entries:
            for q1, _ in site_basis.entries:
                for q2, _ in site_basis.entries:
                    rest = tuple(t - x - y - z for t, x, y, z
                                 in zip(self.target, ql, q1, q2))
                    if rest in right_basis:
                        self.keys.append((ql, q1, q2, rest))
        self.keys.sort()
        self.blocks = {}

    def block_shape(self, key):
        return (self.left_basis.dim(key[0]), self.right_basis.dim(key[3]))

    def zero_fill(self):
        for key in self.keys:
            self.blocks[key] = np.zeros(self.block_shape(key))
        return self

    def random_fill(self, rng):
        for key in self.keys:
            self.blocks[key] = rng.standard_normal(self.block_shape(key))
        return self.normalize()

    def size(self):
        return sum(int(np.prod(self.block_shape(k))) for k in self.keys)

    def to_vector(self):
        if not self.keys:
            return np.zeros(0)
        return np.concatenate([self.blocks[k].ravel() for k in self.keys])

    def from_vector(self, vec):
        pos = 0
        for key in self.keys:
            shape = self.block_shape(key)
            n = shape[0] * shape[1]
            self.blocks[key] = vec[pos:pos + n].reshape(shape)
            pos += n
        if pos != vec.size:
            raise SectorError("vector length does not match sector structure")
        return self

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(b * b))
                                 for b in self.blocks.values())))

    def normalize(self):
        n = self.norm()
        if n == 0.0:
            raise SectorError("cannot normalize a zero wavefunction")
        for key in self.blocks:
            self.blocks[key] = self.blocks[key] / n
        return self

    def copy(self):
        out = SuperblockWavefunction(self.left_basis, self.site_basis,
                                     self.right_basis, self.target)
        out.blocks = {k: v.copy() for k, v in self.blocks.items()}
        return out


# ------------------------------------------------------------------- the plan

@dataclass
class PlanGroup:
    """One fused accumulation: all tasks mapping psi block A into out block B."""

    psi_key: tuple
    out_key: tuple
    members: list        # (left block array, right block array, scale)


@dataclass
class EffectiveHamiltonianPlan:
    groups: list
    psi_struct: SuperblockWavefunction
    flops: int
    workspace_doubles: int
    staging_doubles: int


def build_plan(model, table, left_store, right_store, psi_struct,
               aux_mats=None):
    """Resolve an operator table into per-sector fused-multiply groups.

    Grouping is by shared input wavefunction block (the broadcast A) and
    output block; per-member scales fold the row coefficient, the two site
    scalars, and every Jordan-Wigner parity sign.
    """
    local = model.local
    a, b, c = table.bounds
    if aux_mats is None:
        laux, raux = materialize_aux(table, left_store, right_store)
    else:
        laux, raux = aux_mats
    sign = local.parity_sign
    groups = {}
    shapes = {k: psi_struct.block_shape(k) for k in psi_struct.keys}
    key_set = set(psi_struct.keys)
    for row in table.rows:
        lmat = _resolve_ref(row.left, left_store, laux)
        rmat = _resolve_ref(row.right, right_store, raux)
        if lmat is None or rmat is None:
            continue
        o1 = _site_sector_op(model, a // local.modes_per_site,
                             local.string_matrix(row.site1, a))
        o2 = _site_sector_op(model, b // local.modes_per_site,
                             local.string_matrix(row.site2, b))
        e_l, e_1, e_2 = row.dress
        site1_map = {cq: (rq, float(blk[0, 0]))
                     for (rq, cq), blk in o1.blocks.items()}
        site2_map = {cq: (rq, float(blk[0, 0]))
                     for (rq, cq), blk in o2.blocks.items()}
        for psi_key in psi_struct.keys:
            ql, q1, q2, qr = psi_key
            hit1 = site1_map.get(q1)
            hit2 = site2_map.get(q2)
            if hit1 is None or hit2 is None:
                continue
            q1p, s1 = hit1
            q2p, s2 = hit2
            qlp = qn_add(ql, lmat.delta)
            lblk = lmat.blocks.get((qlp, ql))
            if lblk is None:
                continue
            qrp = qn_add(qr, rmat.delta)
            rblk = rmat.blocks.get((qrp, qr))
            if rblk is None:
                continue
            out_key = (qlp, q1p, q2p, qrp)
            if out_key not in key_set:
                continue
            scale = row.alpha * s1 * s2
            if e_l:
                scale *= sign(ql)
            if e_1:
                scale *= sign(q1)
            if e_2:
                scale *= sign(q2)
            if scale == 0.0:
                continue
            grp = groups.setdefault((psi_key, out_key),
                                    PlanGroup(psi_key, out_key, []))
            grp.members.append((lblk, rblk, scale))

    group_list = [groups[k] for k in sorted(groups)]
    flops = 0
    workspace = 0
    staging = 0
    for grp in group_list:
        m, n = shapes[grp.psi_key]
        q, r = shapes[grp.out_key]
        p = len(grp.members)
        flops += flops_fused(m, n, q, r, p)
        workspace = max(workspace, m * p * r)
        staging = max(staging, q * m * p + r * n * p + m * p * r)
    return EffectiveHamiltonianPlan(group_list, psi_struct, flops,
                                    workspace, staging)
