"""Two-site DMRG ground-state driver.

Each iteration factorizes the Hamiltonian across the current partition,
materializes the partially summed boundary operators, and resolves the
operator table into per-sector accumulation groups.  Diagonalization runs a
Lanczos loop with full reorthogonalization whose matrix-vector product fans
the groups out as maze-runner tasks: every task stages its operand stacks
into a per-worker arena, runs the two-kernel fused batched multiply, and
accumulates into the shared output block under that block's lock.

Renormalization eigendecomposes the reduced density matrix of the enlarged
block sector by sector, keeps the top-D states globally, and rotates every
maintained operator individually (no cross-position summation), staging the
rotation and operator payloads through per-lane dependency-tree arenas.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .blocks import BlockStore, enlarge_block
from .gemm import default_backend
from .mazerunner import Task
from .sbmm4s import batched_gemm_interleaved, concat_gemm_accumulate
from .sectors import SectorBasis, SectorMatrix
from .ttcache import Arena, DependencyNode, Payload, plan_check, visit


class DmrgError(Exception):
    pass


# ---------------------------------------------------------------------- lanczos

class LanczosResult(NamedTuple):
    energy: float
    vector: np.ndarray
    iterations: int
    converged: bool


def lanczos_ground(apply_op, guess, tol=1e-12, max_iter=200):
    """Smallest eigenpair of a symmetric operator by Lanczos iteration.

    Full reorthogonalization against all stored Krylov vectors keeps the
    basis numerically orthogonal.  Convergence requires the true residual
    norm ||H v - E v|| <= tol * (1 + |E|); if the beta-based estimate lies,
    the loop restarts from the current Ritz vector.
    """
    guess = np.asarray(guess, dtype=float)
    nrm = np.linalg.norm(guess)
    if nrm == 0.0 or guess.size == 0:
        raise DmrgError("lanczos needs a nonzero starting vector")
    dim = guess.size
    v = guess / nrm
    total_iter = 0
    for _restart in range(5):
        basis = [v]
        alphas, betas = [], []
        energy, ritz = None, None
        exhausted = False
        while total_iter < max_iter and len(basis) <= dim:
            w = apply_op(basis[-1])
            total_iter += 1
            alphas.append(float(np.dot(basis[-1], w)))
            w = w - alphas[-1] * basis[-1]
            if betas:
                w = w - betas[-1] * basis[-2]
            for b in basis:                      # full reorthogonalization
                w = w - np.dot(b, w) * b
            tri = np.diag(alphas)
            if betas:
                off = np.diag(betas, 1)
                tri = tri + off + off.T
            evals, evecs = np.linalg.eigh(tri)
            energy = float(evals[0])
            ritz = evecs[:, 0]
            beta = float(np.linalg.norm(w))
            est = abs(beta * ritz[-1])
            if est <= 0.1 * tol * (1.0 + abs(energy)) or beta < 1e-14 \
                    or len(basis) == dim:
                exhausted = beta < 1e-14 or len(basis) == dim
                break
            betas.append(beta)
            basis.append(w / beta)
        vec = np.zeros(dim)
        for c, b in zip(ritz, basis):
            vec += c * b
        vec /= np.linalg.norm(vec)
        resid = apply_op(vec) - energy * vec
        if np.linalg.norm(resid) <= tol * (1.0 + abs(energy)):
            return LanczosResult(energy, vec, total_iter, True)
        if total_iter >= max_iter or exhausted:
            return LanczosResult(energy, vec, total_iter, exhausted)
        v = vec
    return LanczosResult(energy, vec, total_iter, False)


# ------------------------------------------------------------- plan application

def _f_view(arena, region, shape):
    flat = np.frombuffer(arena.view(region), dtype=np.float64)
    return flat.reshape(shape, order="F")


def apply_plan(plan, psi, out, pool=None, arenas=None, backend=None,
               locks=None):
    """out += H_eff applied to psi, group by group.

    Every group stages its L and R stacks and scratch region in an arena
    (one arena per worker lane, single-threaded cursor each) and runs the
    two fused kernels; the accumulate step locks the output block.
    """
    backend = backend or default_backend()
    if locks is None:
        locks = {}
    groups = plan.groups

    def make_task(grp):
        def run(ctx):
            a = psi.blocks[grp.psi_key]
            b = out.blocks[grp.out_key]
            m, n = a.shape
            q, r = b.shape
            p = len(grp.members)
            arena = ctx.workspace if ctx is not None and ctx.workspace \
                else Arena(8 * (q * m * p + r * n * p + m * p * r))

            def load_l(view, _db):
                stack = np.frombuffer(view, dtype=np.float64).reshape(
                    (q, m, p), order="F")
                for i, (lb, _rb, _s) in enumerate(grp.members):
                    stack[:, :, i] = lb

            def load_r(view, _db):
                stack = np.frombuffer(view, dtype=np.float64).reshape(
                    (r, n, p), order="F")
                for i, (_lb, rb, s) in enumerate(grp.members):
                    np.multiply(rb, s, out=stack[:, :, i])

            pl = Payload(8 * q * m * p, load_l)
            pr = Payload(8 * r * n * p, load_r)
            pt = Payload(8 * m * p * r)          # scratch, no copy
            reg_l = arena.load(pl)
            reg_r = arena.load(pr)
            reg_t = arena.load(pt)
            try:
                l_stack = _f_view(arena, reg_l, (q, m, p))
                r_stack = _f_view(arena, reg_r, (r, n, p))
                ws = np.frombuffer(arena.view(reg_t), dtype=np.float64)
                temp = batched_gemm_interleaved(a, r_stack, ws, backend)
                lock = locks.get(grp.out_key)
                if lock is not None:
                    with lock:
                        concat_gemm_accumulate(l_stack, temp, 1.0, b, backend)
                else:
                    concat_gemm_accumulate(l_stack, temp, 1.0, b, backend)
            finally:
                arena.unload(pt)
                arena.unload(pr)
                arena.unload(pl)

        return run

    if pool is None or pool.workers == 1:
        arena = arenas[0] if arenas else None
        ctx = _InlineCtx(arena)
        for grp in groups:
            make_task(grp)(ctx)
    else:
        stats = pool.run_batch((Task(fn=make_task(g)) for g in groups),
                               workspaces=arenas)
        if stats.errors:
            raise stats.errors[0][1]
    return out


class _InlineCtx:
    def __init__(self, workspace):
        self.workspace = workspace


apply_effective_hamiltonian = apply_plan


def flop_estimate(obj):
    """Exact FLOP count of a plan or of an iterable of (m, n, k) GEMM shapes."""
    if hasattr(obj, "flops"):
        return obj.flops
    return sum(2 * m * n * k for m, n, k in obj)


# ------------------------------------------------------------- renormalization

@dataclass
class RenormResult:
    store: BlockStore
    transform: SectorMatrix
    truncation_error: float
    kept: int


def _select_states(sector_scores, d_max):
    """Global top-D selection with deterministic tie-breaking.

    ``sector_scores``: {qn: descending score array}.  Ties break by
    (score, qn lexicographic, intra-sector index).
    """
    ranked = []
    for q in sorted(sector_scores):
        for idx, s in enumerate(sector_scores[q]):
            ranked.append((-s, q, idx))
    ranked.sort()
    kept = {}
    for negs, q, idx in ranked[:d_max]:
        kept.setdefault(q, []).append(idx)
    return kept


def rdm_eigensystem(psi, side, fused):
    """Reduced density matrix of the enlarged block, eigendecomposed per sector.

    Returns {sector: (descending eigenvalues, matching eigenvector columns)}.
    """
    slabs = {}
    if side == "L":
        for (ql, q1, q2, qr), blk in psi.blocks.items():
            qe = tuple(a + b for a, b in zip(ql, q1))
            off = fused.layout[(ql, q1)]
            key = (qe, q2, qr)
            if key not in slabs:
                slabs[key] = np.zeros((fused.basis.dim(qe), blk.shape[1]))
            slabs[key][off:off + blk.shape[0], :] = blk
    else:
        for (ql, q1, q2, qr), blk in psi.blocks.items():
            qf = tuple(a + b for a, b in zip(q2, qr))
            off = fused.layout[(q2, qr)]
            key = (qf, ql, q1)
            if key not in slabs:
                slabs[key] = np.zeros((fused.basis.dim(qf), blk.shape[0]))
            slabs[key][off:off + blk.shape[1], :] = blk.T
    rho = {}
    for (qe, _a, _b), slab in slabs.items():
        acc = rho.get(qe)
        rho[qe] = slab @ slab.T if acc is None else acc + slab @ slab.T
    out = {}
    for qe, mat in rho.items():
        evals, evecs = np.linalg.eigh(mat)
        out[qe] = (evals[::-1].copy(), evecs[:, ::-1].copy())
    return out


def _transform_tree(enlarged, w, new_basis, backend, pool):
    """Rotate every enlarged operator as W^T O W through per-lane arenas.

    The dependency tree per lane: root carries the transform blocks, one
    child per operator carries that operator's blocks; the child task reads
    both from the arena prefix and writes the rotated operator out.
    """

    def pack(mat):
        manifest = []
        chunks = []
        offset = 0
        for key in mat.block_keys():
            blk = np.ascontiguousarray(mat.blocks[key])
            manifest.append((key, blk.shape, offset))
            chunks.append(blk.tobytes())
            offset += blk.nbytes
        raw = b"".join(chunks)

        def loader(view, _db, raw=raw):
            view[:len(raw)] = raw

        return Payload(len(raw), loader), manifest

    def unpack(arena, region, manifest):
        blocks = {}
        for key, shape, off in manifest:
            n = shape[0] * shape[1]
            flat = np.frombuffer(arena.view(region), dtype=np.float64,
                                 count=n, offset=off)
            blocks[key] = flat.reshape(shape)
        return blocks

    w_payload, w_manifest = pack(w)
    new_ops = {}
    op_keys = sorted(enlarged.ops, key=repr)
    lanes = max(1, min(pool.workers if pool else 1, len(op_keys)))
    lane_roots = []
    for lane in range(lanes):
        root = DependencyNode(("W", lane), w_payload)
        for key in op_keys[lane::lanes]:
            mat = enlarged.ops[key]
            op_payload, op_manifest = pack(mat)

            def task(arena, regions, key=key, mat=mat, manifest=op_manifest,
                     lane=lane):
                w_blocks = unpack(arena, regions[("W", lane)], w_manifest)
                o_blocks = unpack(arena, regions[("op", key)], manifest)
                res = SectorMatrix(new_basis, new_basis, mat.delta)
                for (rq, cq), blk in o_blocks.items():
                    wl = w_blocks.get((rq, rq))
                    wr = w_blocks.get((cq, cq))
                    if wl is None or wr is None:
                        continue
                    tmp = np.zeros((wl.shape[1], blk.shape[1]))
                    backend.gemm(wl.T, blk, tmp, beta=0.0)
                    dst = np.zeros((wl.shape[1], wr.shape[1]))
                    backend.gemm(tmp, wr, dst, beta=0.0)
                    res.blocks[(rq, cq)] = dst
                new_ops[key] = res

            node = DependencyNode(("op", key), op_payload, tasks=[task])
            root.children.append(node)
        lane_roots.append(root)

    def traverse(root):
        def run(_ctx):
            visit(root, None, Arena(plan_check(root)))
        return run

    if pool is None or pool.workers == 1 or lanes == 1:
        for root in lane_roots:
            traverse(root)(None)
    else:
        stats = pool.run_batch([Task(fn=traverse(r)) for r in lane_roots])
        if stats.errors:
            raise stats.errors[0][1]
    new_ops[("I",)] = SectorMatrix.identity(new_basis)
    return new_ops


def renormalize(model, psi, side, old_store, site_index, d_max,
                pool=None, backend=None):
    """Enlarge ``old_store`` by one site, truncate to the top-D reduced
    density matrix eigenstates, and rotate every maintained operator."""
    backend = backend or default_backend()
    enlarged = enlarge_block(model, old_store, site_index)
    fused = enlarged.fused
    eig = rdm_eigensystem(psi, side, fused)
    scores = {q: vals for q, (vals, _) in eig.items()}
    kept = _select_states(scores, d_max)
    total = sum(float(np.sum(v)) for v in scores.values())
    kept_weight = sum(float(np.sum(scores[q][idx])) for q, idx in kept.items())
    trunc_err = min(1.0, max(0.0, 1.0 - kept_weight / max(total, 1e-300)))

    new_basis = SectorBasis([(q, len(idx)) for q, idx in kept.items()])
    w = SectorMatrix(fused.basis, new_basis, model.local.zero_qn())
    for q, idx in kept.items():
        w.blocks[(q, q)] = eig[q][1][:, idx]
    new_ops = _transform_tree(enlarged, w, new_basis, backend, pool)
    store = BlockStore(model, old_store.side, enlarged.sites, new_basis,
                       new_ops, product_perm=None, fused=fused, transform=w)
    n_kept = sum(len(v) for v in kept.values())
    return RenormResult(store, w, trunc_err, n_kept)


def exactify_store(enlarged):
    """Treat an un-truncated enlargement as its own renormalized store."""
    w = SectorMatrix.identity(enlarged.basis)
    enlarged.transform = w
    return enlarged


def spectral_truncate(model, enlarged, d_max, backend=None, pool=None):
    """Warmup truncation: keep the D lowest block-Hamiltonian eigenstates."""
    backend = backend or default_backend()
    if enlarged.basis.total_dim <= d_max:
        return exactify_store(enlarged)
    h = enlarged.ops[("H",)]
    scores = {}
    vecs = {}
    for q, d in enlarged.basis.entries:
        blk = h.blocks.get((q, q))
        mat = blk if blk is not None else np.zeros((d, d))
        evals, evecs = np.linalg.eigh(mat)
        scores[q] = -evals           # lowest energy first, as descending score
        vecs[q] = evecs
    kept = _select_states(scores, d_max)
    new_basis = SectorBasis([(q, len(idx)) for q, idx in kept.items()])
    w = SectorMatrix(enlarged.basis, new_basis, model.local.zero_qn())
    for q, idx in kept.items():
        w.blocks[(q, q)] = vecs[q][:, idx]
    new_ops = _transform_tree(enlarged, w, new_basis, backend, pool)
    return BlockStore(model, enlarged.side, enlarged.sites, new_basis,
                      new_ops, product_perm=None, fused=enlarged.fused,
                      transform=w)
