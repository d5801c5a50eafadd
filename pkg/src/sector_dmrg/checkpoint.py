"""Checkpoint serialization for interrupted runs.

Layout (all integers little-endian):

    bytes 0..7    magic ``SDMRGCK1``
    bytes 8..11   format version (u32)
    bytes 12..19  payload length (u64)
    bytes 20..51  SHA-256 of the payload
    bytes 52..    payload

The payload is a sequence of sections ``tag(4s) | length(u64) | body``:
one ``META`` section (UTF-8 JSON: model integrals and parameters, target,
seed, RNG state, sweep cursor, records, a digest of the Hamiltonian terms),
one ``STOR`` section per block store, and one ``PSI.`` section for the
current wavefunction.  Matrix sections carry a JSON descriptor followed by
raw float64 block data, blocks sorted by sector key.  Everything is ordered
deterministically, so saving a freshly loaded checkpoint reproduces the file
byte for byte.  Files are written to a temporary sibling and renamed into
place.
"""

import ast
import hashlib
import json
import os
import struct as _struct

import numpy as np

from .blocks import BlockStore, SuperblockWavefunction
from .driver import DmrgState, SweepRecord
from .model import Integrals, ModelSpec, model_from_integrals
from .sectors import FusedBasis, SectorBasis, SectorMatrix

MAGIC = b"SDMRGCK1"
VERSION = 1


class CheckpointError(Exception):
    pass


def _terms_digest(model):
    blob = repr(model.terms) + repr(model.core) + repr(model.n_sites)
    return hashlib.sha256(blob.encode()).hexdigest()


# -------------------------------------------------------------- matrix codecs

def _encode_matrix(mat):
    if mat is None:
        return None, b""
    blocks = []
    chunks = []
    offset = 0
    for rq, cq in mat.block_keys():
        arr = np.ascontiguousarray(mat.blocks[(rq, cq)], dtype="<f8")
        blocks.append([list(rq), list(cq), arr.shape[0], arr.shape[1], offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    desc = {
        "row_basis": [[list(q), d] for q, d in mat.row_basis.entries],
        "col_basis": [[list(q), d] for q, d in mat.col_basis.entries],
        "delta": list(mat.delta),
        "blocks": blocks,
    }
    return desc, b"".join(chunks)


def _decode_matrix(desc, data):
    if desc is None:
        return None
    row = SectorBasis([(tuple(q), d) for q, d in desc["row_basis"]])
    col = SectorBasis([(tuple(q), d) for q, d in desc["col_basis"]])
    mat = SectorMatrix(row, col, tuple(desc["delta"]))
    for rq, cq, rows, cols, off in desc["blocks"]:
        n = rows * cols
        arr = np.frombuffer(data, dtype="<f8", count=n,
                            offset=off).reshape(rows, cols).copy()
        mat.set_block(tuple(rq), tuple(cq), arr)
    return mat


def _encode_store(slot, side, width, store):
    op_descs = []
    blobs = []
    offset = 0
    for key in sorted(store.ops, key=repr):
        desc, data = _encode_matrix(store.ops[key])
        op_descs.append([repr(key), desc, offset, len(data)])
        blobs.append(data)
        offset += len(data)
    w_desc, w_data = _encode_matrix(store.transform)
    op_descs.append(["__transform__", w_desc, offset, len(w_data)])
    blobs.append(w_data)
    header = {
        "slot": slot, "side": side, "width": width,
        "sites": list(store.sites),
        "fused": None if store.fused is None else
                 [[[list(q), d] for q, d in store.fused.basis_a.entries],
                  [[list(q), d] for q, d in store.fused.basis_b.entries]],
        "perm": None if store.product_perm is None
                else [int(x) for x in store.product_perm],
        "ops": op_descs,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    return _struct.pack("<Q", len(hjson)) + hjson + b"".join(blobs)


def _decode_store(model, body):
    (hlen,) = _struct.unpack_from("<Q", body, 0)
    header = json.loads(body[8:8 + hlen].decode())
    data = body[8 + hlen:]
    ops = {}
    transform = None
    for key_repr, desc, off, length in header["ops"]:
        mat = _decode_matrix(desc, data[off:off + length])
        if key_repr == "__transform__":
            transform = mat
        else:
            ops[ast.literal_eval(key_repr)] = mat
    fused = None
    if header["fused"] is not None:
        ea, eb = header["fused"]
        fused = FusedBasis(SectorBasis([(tuple(q), d) for q, d in ea]),
                           SectorBasis([(tuple(q), d) for q, d in eb]))
    basis = ops[("I",)].row_basis
    perm = None if header["perm"] is None else np.array(header["perm"])
    store = BlockStore(model, header["side"], tuple(header["sites"]), basis,
                       ops, product_perm=perm, fused=fused,
                       transform=transform)
    return header["slot"], header["side"], header["width"], store


def _encode_psi(psi):
    blocks = []
    chunks = []
    offset = 0
    for key in sorted(psi.blocks):
        arr = np.ascontiguousarray(psi.blocks[key], dtype="<f8")
        blocks.append([[list(q) for q in key],
                       arr.shape[0], arr.shape[1], offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "left_basis": [[list(q), d] for q, d in psi.left_basis.entries],
        "right_basis": [[list(q), d] for q, d in psi.right_basis.entries],
        "target": list(psi.target),
        "blocks": blocks,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    return _struct.pack("<Q", len(hjson)) + hjson + b"".join(chunks)


def _decode_psi(model, body):
    (hlen,) = _struct.unpack_from("<Q", body, 0)
    header = json.loads(body[8:8 + hlen].decode())
    data = body[8 + hlen:]
    left = SectorBasis([(tuple(q), d) for q, d in header["left_basis"]])
    right = SectorBasis([(tuple(q), d) for q, d in header["right_basis"]])
    psi = SuperblockWavefunction(left, model.local.basis, right,
                                 tuple(header["target"]))
    for key, rows, cols, off in header["blocks"]:
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols,
                            offset=off).reshape(rows, cols).copy()
        psi.blocks[tuple(tuple(q) for q in key)] = arr
    return psi


# ------------------------------------------------------------------- sections

def _section(tag, body):
    return tag + _struct.pack("<Q", len(body)) + body


def save_checkpoint(state, path):
    """Serialize the full solver state and atomically replace ``path``."""
    model = state.model
    spec = model.spec
    meta = {
        "spec": {"kind": spec.kind, "n": spec.n, "j": spec.j, "t": spec.t,
                 "u": spec.u, "path": spec.path},
        "integrals": {
            "n_modes": model.integrals.n_modes,
            "one_body": [[float(x) for x in row]
                         for row in model.integrals.one_body],
            "two_body": sorted(
                [list(k) + [float(v)]
                 for k, v in model.integrals.two_body.items()]),
            "core": float(model.integrals.core),
        },
        "digest": _terms_digest(model),
        "target": list(state.target),
        "seed": state.seed,
        "rng_state": json.loads(json.dumps(state.rng.bit_generator.state)),
        "position": state.position,
        "sweeps_done": state.sweeps_done,
        "records": [[r.sweep, r.position, r.direction, r.energy,
                     r.truncation_error, r.lanczos_iterations,
                     r.wall_seconds, r.flops, r.converged]
                    for r in state.records],
        "left_widths": sorted(state.left),
        "right_widths": sorted(state.right),
    }
    sections = [_section(b"META", json.dumps(meta, sort_keys=True).encode())]
    for side, stores in (("L", state.left), ("R", state.right)):
        for width in sorted(stores):
            sections.append(_section(
                b"STOR", _encode_store(f"{side}{width}", side, width,
                                       stores[width])))
    if state.psi is not None:
        sections.append(_section(b"PSI.", _encode_psi(state.psi)))
    payload = b"".join(sections)
    blob = (MAGIC + _struct.pack("<I", VERSION)
            + _struct.pack("<Q", len(payload))
            + hashlib.sha256(payload).digest() + payload)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Reconstruct a DmrgState; corrupt or mismatched files raise."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 52 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = _struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} != {VERSION}")
    (length,) = _struct.unpack_from("<Q", blob, 12)
    digest = blob[20:52]
    payload = blob[52:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: truncated payload "
                              f"({len(payload)} of {length} bytes)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")

    sections = []
    pos = 0
    while pos < len(payload):
        tag = payload[pos:pos + 4]
        (length,) = _struct.unpack_from("<Q", payload, pos + 4)
        body = payload[pos + 12:pos + 12 + length]
        if len(body) != length:
            raise CheckpointError(f"{path}: truncated section {tag!r}")
        sections.append((tag, body))
        pos += 12 + length

    meta = None
    for tag, body in sections:
        if tag == b"META":
            meta = json.loads(body.decode())
    if meta is None:
        raise CheckpointError(f"{path}: missing META section")

    spec = ModelSpec(**meta["spec"])
    ints = meta["integrals"]
    integrals = Integrals(
        ints["n_modes"], np.array(ints["one_body"]),
        {tuple(row[:4]): row[4] for row in ints["two_body"]}, ints["core"])
    model = model_from_integrals(spec, integrals)
    if _terms_digest(model) != meta["digest"]:
        raise CheckpointError(f"{path}: Hamiltonian digest mismatch")

    rng = np.random.default_rng(meta["seed"])
    rng.bit_generator.state = meta["rng_state"]
    state = DmrgState(model=model, target=tuple(meta["target"]),
                      seed=meta["seed"], rng=rng)
    state.position = meta["position"]
    state.sweeps_done = meta["sweeps_done"]
    state.records = [SweepRecord(*row) for row in meta["records"]]
    for tag, body in sections:
        if tag == b"STOR":
            _slot, side, width, store = _decode_store(model, body)
            (state.left if side == "L" else state.right)[width] = store
        elif tag == b"PSI.":
            state.psi = _decode_psi(model, body)
    return state
