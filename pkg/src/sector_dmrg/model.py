"""Hamiltonian definition, model builders, and operator factorization.

A model is a general two-body Hamiltonian

    H = E0 + sum_mn t[m,n] c+_m c_n + sum_mnpq v[m,n,p,q] c+_m c+_n c_p c_q

over chain-ordered modes.  Fermionic models place two spin-orbital modes
(up, down) on each site with Jordan-Wigner sign bookkeeping; spin-1/2 chains
place one ladder-operator mode per site with no signs.  Chain builders and
integral files express their physics through the same term list, which also
drives the factorization of H across a two-site partition
(left block | site | site | right block).

Factorization performs the partial summations that keep the number of block
operators crossing a boundary quadratic in the mode count: any term leaving
two or fewer of its indices outside one block is folded, together with its
integral coefficient, into a composite (auxiliary) operator on that block
keyed by the outside factors.  Ties between the two blocks fold to the left.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .sectors import DensificationError, SectorBasis

SPIN_HALF = "spinhalf"
FERMION = "fermion"

KEY_I = ("I",)
KEY_H = ("H",)

COEF_TOL = 1e-15


class ModelError(Exception):
    pass


class PartitionError(ModelError):
    pass


class IntegralFormatError(ModelError):
    pass


# ------------------------------------------------------------ local site space

class LocalSpace:
    """Single-site Hilbert space: QN-labeled basis plus local mode operators."""

    def __init__(self, statistics):
        self.statistics = statistics
        if statistics == SPIN_HALF:
            self.modes_per_site = 1
            self.dim = 2
            self.state_qns = [(-1,), (1,)]
            sp = np.array([[0.0, 0.0], [1.0, 0.0]])
            self._creators = [sp]
            self.charges = [(2,)]
        elif statistics == FERMION:
            self.modes_per_site = 2
            self.dim = 4
            # product order (up, down): |0>, |dn>, |up>, |updn>; QN-sorted as is
            self.state_qns = [(0, 0), (1, -1), (1, 1), (2, 0)]
            adag = np.array([[0.0, 0.0], [1.0, 0.0]])
            z = np.diag([1.0, -1.0])
            self._creators = [np.kron(adag, np.eye(2)), np.kron(z, adag)]
            self.charges = [(1, 1), (1, -1)]
        else:
            raise ModelError(f"unknown statistics {statistics!r}")
        self.basis = SectorBasis([(q, 1) for q in self.state_qns])
        self.qn_ncomp = len(self.state_qns[0])

    def creator(self, k):
        return self._creators[k]

    def factor_matrix(self, k, dag):
        return self._creators[k] if dag else self._creators[k].T

    def parity_dense(self):
        if self.statistics == SPIN_HALF:
            return np.eye(self.dim)
        return np.diag([(-1.0) ** q[0] for q in self.state_qns])

    def parity_sign(self, qn):
        if self.statistics == SPIN_HALF:
            return 1.0
        return -1.0 if qn[0] % 2 else 1.0

    def string_matrix(self, factors, site_mode0):
        """Dense site operator for a factor string (global modes) on this site."""
        op = np.eye(self.dim)
        for m, dag in factors:
            op = op @ self.factor_matrix(m - site_mode0, dag)
        return op

    def zero_qn(self):
        return tuple(0 for _ in range(self.qn_ncomp))


# ------------------------------------------------------------------- integrals

@dataclass
class Integrals:
    """One- and two-body coefficients over the model's index convention:
    spatial orbitals for fermionic kinds, sites for spin chains."""

    n_modes: int
    one_body: np.ndarray
    two_body: dict
    core: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.one_body, dtype=float)
        if t.shape != (self.n_modes, self.n_modes):
            raise ModelError(f"one-body shape {t.shape} != N={self.n_modes}")
        if not np.all(np.isfinite(t)):
            raise ModelError("non-finite one-body entry")
        if np.max(np.abs(t - t.T), initial=0.0) > 1e-12:
            raise ModelError("one-body integrals not symmetric within 1e-12")
        self.one_body = t
        for idx, val in self.two_body.items():
            if len(idx) != 4 or not all(0 <= i < self.n_modes for i in idx):
                raise ModelError(f"two-body index {idx} out of range")
            if not math.isfinite(val):
                raise ModelError(f"non-finite two-body entry at {idx}")


def load_integrals(path):
    """Parse the plain-text integral format.

    First line ``N <modes>``; then ``T i j value`` or ``V i j k l value``
    with 1-based indices; optional trailing ``E0 value``; ``#`` comments and
    blank lines ignored.  Mirror T entries must agree within 1e-12; repeated
    identical index tuples are summed.
    """
    t_acc, v_acc = {}, {}
    core = 0.0
    n = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if n is None:
                    if parts[0] != "N" or len(parts) != 2:
                        raise ValueError("expected header 'N <modes>'")
                    n = int(parts[1])
                    if n < 1:
                        raise ValueError("mode count must be positive")
                elif parts[0] == "T":
                    if len(parts) != 4:
                        raise ValueError("T lines take 'T i j value'")
                    i, j = int(parts[1]) - 1, int(parts[2]) - 1
                    _check_range((i, j), n)
                    t_acc[(i, j)] = t_acc.get((i, j), 0.0) + float(parts[3])
                elif parts[0] == "V":
                    if len(parts) != 6:
                        raise ValueError("V lines take 'V i j k l value'")
                    idx = tuple(int(x) - 1 for x in parts[1:5])
                    _check_range(idx, n)
                    v_acc[idx] = v_acc.get(idx, 0.0) + float(parts[5])
                elif parts[0] == "E0":
                    core = float(parts[1])
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise IntegralFormatError(f"{path}:{lineno}: {exc}") from exc
    if n is None:
        raise IntegralFormatError(f"{path}: empty file")
    one = np.zeros((n, n))
    for (i, j), val in t_acc.items():
        if (j, i) in t_acc and abs(t_acc[(j, i)] - val) > 1e-12:
            raise IntegralFormatError(
                f"{path}: T[{i + 1},{j + 1}] breaks symmetry by "
                f"{abs(t_acc[(j, i)] - val):.3e}")
        one[i, j] = val
        one[j, i] = val
    return Integrals(n, one, {k: v for k, v in v_acc.items() if v != 0.0}, core)


def _check_range(idx, n):
    for i in idx:
        if not 0 <= i < n:
            raise ValueError(f"index {i + 1} outside 1..{n}")


def save_integrals(integrals, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"N {integrals.n_modes}\n")
        t = integrals.one_body
        for i in range(integrals.n_modes):
            for j in range(i, integrals.n_modes):
                if t[i, j] != 0.0:
                    fh.write(f"T {i + 1} {j + 1} {float(t[i, j])!r}\n")
        for idx in sorted(integrals.two_body):
            val = float(integrals.two_body[idx])
            ijkl = " ".join(str(i + 1) for i in idx)
            fh.write(f"V {ijkl} {val!r}\n")
        if integrals.core:
            fh.write(f"E0 {float(integrals.core)!r}\n")


# ----------------------------------------------------------------- model spec

@dataclass
class ModelSpec:
    kind: str
    n: int = None
    j: float = 1.0
    t: float = 1.0
    u: float = 0.0
    path: str = None

    KINDS = ("heisenberg-chain", "hubbard-chain", "integral-file")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.kind != "integral-file":
            if self.n is None or self.n < 2:
                raise ModelError("chain models need N >= 2")
            for name in ("j", "t", "u"):
                if not math.isfinite(getattr(self, name)):
                    raise ModelError(f"non-finite parameter {name}")
        elif not self.path:
            raise ModelError("integral-file models need a path")


# ------------------------------------------------------- mode-level term list

def mode_sorted(factors, fermionic):
    """Stable-sort factors by mode; returns (sign, tuple) or (0, ()) if the
    string annihilates identically (equal-dagger pair on one mode)."""
    factors = list(factors)
    sign = 1
    # insertion sort counting distinct-mode crossings
    for i in range(1, len(factors)):
        j = i
        while j > 0 and factors[j - 1][0] > factors[j][0]:
            factors[j - 1], factors[j] = factors[j], factors[j - 1]
            if fermionic:
                sign = -sign
            j -= 1
    for a, b in zip(factors, factors[1:]):
        if a[0] == b[0] and a[1] == b[1]:
            return 0, ()
    return sign, tuple(factors)


def _merge_terms(raw, fermionic):
    acc = {}
    for coef, factors in raw:
        if coef == 0.0:
            continue
        sign, ops = mode_sorted(factors, fermionic)
        if sign == 0:
            continue
        acc[ops] = acc.get(ops, 0.0) + sign * coef
    return [(c, ops) for ops, c in sorted(acc.items()) if abs(c) > COEF_TOL]


class Model:
    """Built model: integrals, local site space, and the mode-level term list."""

    def __init__(self, spec, integrals, local, n_sites, terms, core):
        self.spec = spec
        self.integrals = integrals
        self.local = local
        self.n_sites = n_sites
        self.n_modes = n_sites * local.modes_per_site
        self.terms = terms
        self.core = core
        self.pair_keys = self._collect_pair_keys()

    # -- geometry helpers

    def site_of_mode(self, m):
        return m // self.local.modes_per_site

    def site_mode_range(self, s):
        mps = self.local.modes_per_site
        return s * mps, (s + 1) * mps

    def mode_charge(self, m):
        return self.local.charges[m % self.local.modes_per_site]

    def factor_delta(self, factors):
        delta = self.local.zero_qn()
        for m, dag in factors:
            ch = self.mode_charge(m)
            delta = tuple(d + (c if dag else -c) for d, c in zip(delta, ch))
        return delta

    def default_target(self):
        if self.local.statistics == SPIN_HALF:
            return (self.n_sites % 2,)
        return (self.n_sites, self.n_sites % 2)

    def _collect_pair_keys(self):
        keys = set()
        for _, ops in self.terms:
            for i in range(len(ops)):
                keys.add((ops[i],))
                for j in range(i + 1, len(ops)):
                    keys.add((ops[i], ops[j]))
        return keys

    def partition_at(self, position):
        """Mode partition for the two free sites (position, position + 1)."""
        if not 0 <= position <= self.n_sites - 2:
            raise PartitionError(f"position {position} outside chain")
        mps = self.local.modes_per_site
        a = position * mps
        b = a + mps
        c = b + mps
        return (list(range(0, a)), list(range(a, b)),
                list(range(b, c)), list(range(c, self.n_modes)))

    def dense_hamiltonian(self):
        """Direct dense assembly from the term list (kron string per term)."""
        dim = self.local.dim ** self.n_sites
        if dim > 4096:
            raise DensificationError(f"dense dimension {dim} exceeds 4096")
        h = self.core * np.eye(dim)
        par = self.local.parity_dense()
        fermionic = self.local.statistics == FERMION
        eye = np.eye(self.local.dim)
        for coef, ops in self.terms:
            per_site = {}
            counts = {}
            for m, dag in ops:
                s = self.site_of_mode(m)
                m0, _ = self.site_mode_range(s)
                mat = self.local.factor_matrix(m - m0, dag)
                per_site[s] = per_site.get(s, eye) @ mat
                counts[s] = counts.get(s, 0) + 1
            # every site is dressed by the parity of all factors on later
            # sites, including sites that carry no factor of their own
            term = np.eye(1)
            seen = 0
            for s in range(self.n_sites):
                seen += counts.get(s, 0)
                mat = per_site.get(s, eye)
                if fermionic and (len(ops) - seen) % 2:
                    mat = mat @ par
                term = np.kron(term, mat)
            h += coef * term
        return h


def build_model(spec):
    """Materialize a ModelSpec into local basis plus mode-level terms."""
    if spec.kind == "heisenberg-chain":
        n = spec.n
        j = spec.j
        one = np.zeros((n, n))
        two = {}
        for i in range(n - 1):
            one[i, i + 1] = one[i + 1, i] = j / 2.0
            one[i, i] += -j / 2.0
            one[i + 1, i + 1] += -j / 2.0
            two[(i, i + 1, i + 1, i)] = j
        integrals = Integrals(n, one, two, j * (n - 1) / 4.0)
    elif spec.kind == "hubbard-chain":
        n = spec.n
        one = np.zeros((n, n))
        for i in range(n - 1):
            one[i, i + 1] = one[i + 1, i] = -spec.t
        two = {(i, i, i, i): spec.u / 2.0 for i in range(n)} if spec.u else {}
        integrals = Integrals(n, one, two, 0.0)
    else:
        integrals = load_integrals(spec.path)
    return model_from_integrals(spec, integrals)


def model_from_integrals(spec, integrals):
    """Model construction shared by the builders and checkpoint reload.

    Spin chains keep one ladder mode per site (commuting operators);
    everything else expands spatial orbitals into fermionic spin-orbital
    modes with the spin-summed two-body convention.
    """
    if spec.kind == "heisenberg-chain":
        local = LocalSpace(SPIN_HALF)
        terms = _merge_terms(_spin_terms(integrals), False)
    else:
        local = LocalSpace(FERMION)
        terms = _merge_terms(_fermion_terms(integrals), True)
    return Model(spec, integrals, local, integrals.n_modes, terms,
                 integrals.core)


def _spin_terms(integrals):
    raw = []
    t = integrals.one_body
    for i in range(integrals.n_modes):
        for j in range(integrals.n_modes):
            if t[i, j] != 0.0:
                raw.append((t[i, j], ((i, 1), (j, 0))))
    for (i, j, k, l), val in integrals.two_body.items():
        raw.append((val, ((i, 1), (j, 1), (k, 0), (l, 0))))
    return raw


def _fermion_terms(integrals):
    """Spin-summed expansion: spatial (i,j,k,l) -> spin-orbital modes 2i+s."""
    raw = []
    t = integrals.one_body
    for i in range(integrals.n_modes):
        for j in range(integrals.n_modes):
            if t[i, j] == 0.0:
                continue
            for s in (0, 1):
                raw.append((t[i, j], ((2 * i + s, 1), (2 * j + s, 0))))
    for (i, j, k, l), val in integrals.two_body.items():
        if val == 0.0:
            continue
        for s in (0, 1):
            for tt in (0, 1):
                raw.append((val, ((2 * i + s, 1), (2 * j + tt, 1),
                                  (2 * k + tt, 0), (2 * l + s, 0))))
    return raw


# ---------------------------------------------------------------- factorization

class TableRow(NamedTuple):
    left: tuple        # operator key on the left block
    site1: tuple       # factor string on the first free site (global modes)
    site2: tuple
    right: tuple
    alpha: float
    dress: tuple       # parity exponents (e_left, e_site1, e_site2)


@dataclass
class AuxDef:
    """Partially summed composite operator: everything on ``side`` that
    multiplies the outside factor string ``key``."""

    side: str
    key: tuple
    terms: list = field(default_factory=list)   # (coef, inside factor string)


@dataclass
class OperatorTable:
    position: int
    bounds: tuple                      # mode boundaries (a, b, c)
    rows: list
    left_aux: dict
    right_aux: dict

    def crossing_operator_count(self):
        """Distinct non-trivial block operators referenced by the table."""
        left = {r.left for r in self.rows} - {KEY_I, KEY_H}
        right = {r.right for r in self.rows} - {KEY_I, KEY_H}
        return len(left) + len(right)


def _validate_partition(model, partition):
    left, s1, s2, right = (list(p) for p in partition)
    flat = left + s1 + s2 + right
    if flat != list(range(model.n_modes)):
        raise PartitionError("partition must cover all modes exactly once, "
                             "contiguously ordered")
    mps = model.local.modes_per_site
    if len(s1) != mps or len(s2) != mps:
        raise PartitionError(f"intermediate subsystems must hold {mps} mode(s)")
    if len(left) % mps or len(right) % mps:
        raise PartitionError("block boundaries must align with sites")
    return len(left), len(left) + len(s1), len(left) + len(s1) + len(s2)


def factorize(model, partition):
    """Distribute every Hamiltonian term over (left | site | site | right).

    Returns the operator table whose rows, materialized against block
    operators, reproduce H exactly:  H = sum_rows alpha * (L x s1 x s2 x R)
    with parity dressings applied per row.  Auxiliary definitions carry the
    partially summed composites referenced by the rows.
    """
    a, b, c = _validate_partition(model, partition)
    position = a // model.local.modes_per_site
    fermionic = model.local.statistics == FERMION
    rows = {}
    left_aux, right_aux = {}, {}

    def part_of(mode):
        if mode < a:
            return 0
        if mode < b:
            return 1
        if mode < c:
            return 2
        return 3

    def add_row(left, s1, s2, right, alpha, parities, accumulate=True):
        p1, p2, pr = parities if fermionic else (0, 0, 0)
        dress = ((p1 + p2 + pr) % 2, (p2 + pr) % 2, pr % 2)
        key = (left, s1, s2, right, dress)
        if accumulate:
            rows[key] = rows.get(key, 0.0) + alpha
        else:
            rows[key] = alpha   # aux rows: the coefficients live in the bucket

    def plain_key(factors):
        if len(factors) == 0:
            return KEY_I
        if len(factors) == 1:
            return ("C",) + factors
        return ("P",) + factors

    has_hl = has_hr = False
    for coef, ops in model.terms:
        split = ([], [], [], [])
        for f in ops:
            split[part_of(f[0])].append(f)
        lam, s1, s2, rho = (tuple(p) for p in split)
        k = len(ops)
        if len(lam) == k:
            has_hl = True
            continue
        if len(rho) == k:
            has_hr = True
            continue
        outside_l = len(s1) + len(s2) + len(rho)
        outside_r = len(lam) + len(s1) + len(s2)
        if len(lam) >= max(1, len(rho)) and outside_l <= 2:
            key = s1 + s2 + rho
            bucket = left_aux.setdefault(key, AuxDef("L", key))
            bucket.terms.append((coef, lam))
            add_row(("AUX", "L", key), s1, s2, plain_key(rho), 1.0,
                    (len(s1), len(s2), len(rho)), accumulate=False)
        elif len(rho) >= 1 and outside_r <= 2:
            key = lam + s1 + s2
            bucket = right_aux.setdefault(key, AuxDef("R", key))
            bucket.terms.append((coef, rho))
            add_row(plain_key(lam), s1, s2, ("AUX", "R", key), 1.0,
                    (len(s1), len(s2), len(rho)), accumulate=False)
        else:
            add_row(plain_key(lam), s1, s2, plain_key(rho), coef,
                    (len(s1), len(s2), len(rho)))

    table_rows = []
    if has_hl or a > 0:
        table_rows.append(TableRow(KEY_H, (), (), KEY_I, 1.0, (0, 0, 0)))
    if has_hr or c < model.n_modes:
        table_rows.append(TableRow(KEY_I, (), (), KEY_H, 1.0, (0, 0, 0)))
    if model.core:
        table_rows.append(TableRow(KEY_I, (), (), KEY_I, model.core, (0, 0, 0)))
    for (left, s1, s2, right, dress), alpha in sorted(rows.items()):
        if abs(alpha) > COEF_TOL:
            table_rows.append(TableRow(left, s1, s2, right, alpha, dress))
    return OperatorTable(position, (a, b, c), table_rows, left_aux, right_aux)


def auxiliary_count(model, position):
    """Distinct block operators crossing the boundary at ``position``."""
    table = factorize(model, model.partition_at(position))
    return table.crossing_operator_count()
