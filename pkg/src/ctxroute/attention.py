"""Dense and routed attention with stable softmax, var-len packing, and VJPs.

The routed path restricts each query's softmax to the union of tokens in its
selected chunks, with 1/sqrt(d) scaling (scaling applies to attention, not to
routing scores). Queries with identical selections are grouped so each group
shares one key/value gather; scores inside a group are computed row by row in
ascending token order, which keeps packed and per-query evaluation bitwise
identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeMismatch
from .inputs import AttentionInputs
from .lattice import ChunkPartition
from .routing import RoutingTable


@dataclass(frozen=True)
class AttentionOutput:
    """Context vectors [H, L, d] plus per-query diagnostics.

    ``lse`` is the log-sum-exp of each query's scaled scores (-inf where the
    selection was empty); ``empty_context`` flags those rows, whose output is
    the zero vector rather than an error.
    """

    O: np.ndarray
    lse: Optional[np.ndarray] = None
    empty_context: Optional[np.ndarray] = None

    def __post_init__(self):
        self.O.setflags(write=False)


@dataclass(frozen=True)
class HeadPack:
    """Gather layout for one head: queries grouped by identical token sets."""

    group_queries: tuple[np.ndarray, ...]
    gather_indices: tuple[np.ndarray, ...]
    cu_lengths: np.ndarray  # [G+1] cumulative gathered-token counts


@dataclass(frozen=True)
class VarLenPack:
    """Head-major packing of the routed attention workload."""

    heads: tuple[HeadPack, ...]

    @property
    def group_counts(self) -> list[int]:
        return [len(hp.group_queries) for hp in self.heads]


def _softmax_rows(Qg: np.ndarray, Kg: np.ndarray, Vg: np.ndarray, scale: float,
                  out: np.ndarray, lse: np.ndarray, rows: np.ndarray) -> None:
    """Row-wise scaled softmax-attend; fixed summation order per row."""
    for r, q in zip(rows, Qg):
        s = (Kg @ q) * scale
        m = s.max()
        p = np.exp(s - m)
        z = p.sum()
        out[r] = (p @ Vg) / z
        lse[r] = m + np.log(z)


def dense_attention(inputs: AttentionInputs) -> AttentionOutput:
    """Reference full attention: softmax(Q K^T / sqrt(d)) V per head."""
    H, L, d = inputs.H, inputs.L, inputs.d
    scale = 1.0 / np.sqrt(d)
    Q = inputs.Q.astype(np.float64, copy=False)
    K = inputs.K.astype(np.float64, copy=False)
    V = inputs.V.astype(np.float64, copy=False)
    O = np.empty((H, L, d), dtype=np.float64)
    lse = np.empty((H, L), dtype=np.float64)
    for h in range(H):
        S = (Q[h] @ K[h].T) * scale
        m = S.max(axis=1, keepdims=True)
        P = np.exp(S - m)
        z = P.sum(axis=1, keepdims=True)
        O[h] = (P / z) @ V[h]
        lse[h] = (m + np.log(z))[:, 0]
    return AttentionOutput(O=O, lse=lse, empty_context=np.zeros((H, L), dtype=bool))


def build_varlen_pack(table: RoutingTable, partition: ChunkPartition) -> VarLenPack:
    """Group queries with identical token-level selections, per head.

    Gather lists are ascending and duplicate-free (selected chunks never
    overlap); groups are ordered by their selection byte pattern, which is
    deterministic for a fixed table.
    """
    H, L, C = table.mandatory.shape
    sel = table.selected()
    chunk_ranges = [c.token_indices() for c in partition.chunks]
    heads = []
    for h in range(H):
        packed = np.packbits(sel[h], axis=1)
        uniq, inverse = np.unique(packed, axis=0, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        splits = np.searchsorted(inverse[order], np.arange(1, len(uniq)))
        group_queries = tuple(np.split(order, splits))
        gather = []
        for g, qs in enumerate(group_queries):
            chunk_ids = np.flatnonzero(sel[h, qs[0]])
            if chunk_ids.size:
                gather.append(np.concatenate([chunk_ranges[c] for c in chunk_ids]))
            else:
                gather.append(np.empty(0, dtype=np.int64))
        cu = np.zeros(len(gather) + 1, dtype=np.int64)
        np.cumsum([g.size for g in gather], out=cu[1:])
        heads.append(HeadPack(group_queries=group_queries,
                              gather_indices=tuple(gather), cu_lengths=cu))
    return VarLenPack(heads=tuple(heads))


def routed_attention(
    inputs: AttentionInputs,
    table: RoutingTable,
    partition: ChunkPartition,
    pack: Optional[VarLenPack] = None,
) -> AttentionOutput:
    """Sparse attention over the table's selected chunks.

    A query with an empty selection yields a zero row and sets its
    empty_context flag; that corner is reachable only when every forced link
    is disabled.
    """
    H, L, d = inputs.H, inputs.L, inputs.d
    if table.mandatory.shape[:2] != (H, L) or partition.length != L:
        raise ShapeMismatch("routing table / partition inconsistent with inputs")
    if pack is None:
        pack = build_varlen_pack(table, partition)
    scale = 1.0 / np.sqrt(d)
    Q = inputs.Q.astype(np.float64, copy=False)
    K = inputs.K.astype(np.float64, copy=False)
    V = inputs.V.astype(np.float64, copy=False)
    O = np.zeros((H, L, d), dtype=np.float64)
    lse = np.full((H, L), -np.inf, dtype=np.float64)
    empty = np.zeros((H, L), dtype=bool)
    for h, hp in enumerate(pack.heads):
        for qs, toks in zip(hp.group_queries, hp.gather_indices):
            if toks.size == 0:
                empty[h, qs] = True
                continue
            Kg = K[h][toks]
            Vg = V[h][toks]
            _softmax_rows(Q[h][qs], Kg, Vg, scale, O[h], lse[h], qs)
    return AttentionOutput(O=O, lse=lse, empty_context=empty)


def _vjp_accumulate(Qg, Kg, Vg, Gg, scale, dQ, dK, dV, rows, toks) -> None:
    for r, q, g in zip(rows, Qg, Gg):
        s = (Kg @ q) * scale
        m = s.max()
        p = np.exp(s - m)
        w = p / p.sum()
        dw = Vg @ g
        ds = w * (dw - w @ dw)
        dQ[r] = (ds @ Kg) * scale
        np.add.at(dK, toks, np.outer(ds, q) * scale)
        np.add.at(dV, toks, np.outer(w, g))


def attention_vjp(
    inputs: AttentionInputs,
    upstream: np.ndarray,
    table: Optional[RoutingTable] = None,
    partition: Optional[ChunkPartition] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic vector-Jacobian product of attention output w.r.t. Q, K, V.

    Routing is held fixed (selection is not differentiated). With
    ``table=None`` the dense path is differentiated. Gradient rows of keys and
    values no query ever attends are exactly zero.
    """
    H, L, d = inputs.H, inputs.L, inputs.d
    if upstream.shape != (H, L, d):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != {(H, L, d)}")
    scale = 1.0 / np.sqrt(d)
    Q = inputs.Q.astype(np.float64, copy=False)
    K = inputs.K.astype(np.float64, copy=False)
    V = inputs.V.astype(np.float64, copy=False)
    G = upstream.astype(np.float64, copy=False)
    dQ = np.zeros((H, L, d), dtype=np.float64)
    dK = np.zeros((H, L, d), dtype=np.float64)
    dV = np.zeros((H, L, d), dtype=np.float64)

    if table is None:
        for h in range(H):
            S = (Q[h] @ K[h].T) * scale
            m = S.max(axis=1, keepdims=True)
            P = np.exp(S - m)
            W = P / P.sum(axis=1, keepdims=True)
            dW = G[h] @ V[h].T
            dS = W * (dW - (W * dW).sum(axis=1, keepdims=True))
            dQ[h] = (dS @ K[h]) * scale
            dK[h] = (dS.T @ Q[h]) * scale
            dV[h] = W.T @ G[h]
        return dQ, dK, dV

    if partition is None:
        raise ShapeMismatch("partition required when differentiating routed attention")
    pack = build_varlen_pack(table, partition)
    for h, hp in enumerate(pack.heads):
        for qs, toks in zip(hp.group_queries, hp.gather_indices):
            if toks.size == 0:
                continue
            _vjp_accumulate(Q[h][qs], K[h][toks], V[h][toks], G[h][qs],
                            scale, dQ[h], dK[h], dV[h], qs, toks)
    return dQ, dK, dV
