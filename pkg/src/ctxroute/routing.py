"""Parameter-free chunk routing: pooled descriptors, masking, top-k, drop perturbations.

Routing scores are raw inner products between a query and each chunk's
mean-pooled key descriptor (no 1/sqrt(d) scaling; the argmax is scale
invariant). Selection is per head and per query token unless chunk-level
shared routing is requested explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .errors import DropDisabled, ShapeMismatch
from .inputs import AttentionInputs
from .lattice import ChunkPartition, TokenStream

Provenance = Enum("Provenance", ["MANDATORY", "ROUTED", "DROPPED_IN"])


@dataclass(frozen=True)
class DropConfig:
    """Training-time routing perturbation parameters."""

    p_max: float = 0.0
    rate: float = 0.0  # Poisson rate of drop-in insertions
    seed: int = 0
    enabled: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p_max <= 1.0):
            raise ValueError("p_max must lie in [0, 1]")
        if self.rate < 0.0:
            raise ValueError("rate must be non-negative")


@dataclass(frozen=True)
class RoutingConfig:
    k: int = 5
    causal: bool = False
    force_cross_modal: bool = True
    force_intra_shot: bool = True
    force_self_chunk: bool = True
    shared_routing: bool = False  # chunk-level fast path; never substituted silently
    drop: Optional[DropConfig] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class ChunkDescriptors:
    """Per-head mean-pooled key descriptor for every chunk, shape [H, C, d]."""

    values: np.ndarray

    @property
    def head_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def chunk_count(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class RoutingTable:
    """Per-head, per-query chunk selections with provenance.

    The three boolean masks are disjoint and shaped [H, L, C]. ``scores``
    keeps the raw query-descriptor inner products for diagnostics.
    """

    mandatory: np.ndarray
    routed: np.ndarray
    dropped_in: np.ndarray
    scores: np.ndarray
    k: int
    causal: bool

    def __post_init__(self):
        for a in (self.mandatory, self.routed, self.dropped_in, self.scores):
            a.setflags(write=False)

    @property
    def head_count(self) -> int:
        return int(self.mandatory.shape[0])

    @property
    def length(self) -> int:
        return int(self.mandatory.shape[1])

    @property
    def chunk_count(self) -> int:
        return int(self.mandatory.shape[2])

    def selected(self) -> np.ndarray:
        """Union mask of all provenances, [H, L, C]."""
        return self.mandatory | self.routed | self.dropped_in

    def selection(self, head: int, query: int) -> list[tuple[int, Provenance]]:
        """Sorted (chunk_id, provenance) pairs for one (head, query)."""
        out = []
        for cid in np.flatnonzero(self.mandatory[head, query]):
            out.append((int(cid), Provenance.MANDATORY))
        for cid in np.flatnonzero(self.routed[head, query]):
            out.append((int(cid), Provenance.ROUTED))
        for cid in np.flatnonzero(self.dropped_in[head, query]):
            out.append((int(cid), Provenance.DROPPED_IN))
        return sorted(out)


def pool_descriptors(keys: np.ndarray, partition: ChunkPartition) -> ChunkDescriptors:
    """Streaming segment mean of key vectors per chunk.

    keys has shape [H, L, d]; the mean is accumulated in float64 regardless of
    the storage dtype.
    """
    if keys.ndim != 3:
        raise ShapeMismatch(f"keys must be [H, L, d], got {keys.shape}")
    H, L, d = keys.shape
    if L != partition.length:
        raise ShapeMismatch(f"partition covers {partition.length} tokens, keys have {L}")
    starts = np.array([c.start for c in partition.chunks], dtype=np.intp)
    counts = partition.chunk_sizes().astype(np.float64)
    out = np.empty((H, len(starts), d), dtype=np.float64)
    for h in range(H):
        sums = np.add.reduceat(keys[h].astype(np.float64, copy=False), starts, axis=0)
        out[h] = sums / counts[:, None]
    return ChunkDescriptors(values=out)


def route_scores(query: np.ndarray, descriptors: ChunkDescriptors, head: int) -> np.ndarray:
    """Raw inner product of one query against every chunk descriptor."""
    desc = descriptors.values[head]
    if query.shape != (desc.shape[1],):
        raise ShapeMismatch(f"query dim {query.shape} vs descriptor dim {desc.shape[1]}")
    return desc @ query.astype(np.float64, copy=False)


def _effective_query_shots(stream: TokenStream) -> np.ndarray:
    return np.fromiter(
        (m.effective_shot for m in stream.metas), dtype=np.int64, count=stream.length
    )


def _mandatory_mask(
    partition: ChunkPartition, stream: TokenStream, config: RoutingConfig
) -> np.ndarray:
    """Token-level forced-link mask [L, C]; head independent."""
    L, C = partition.length, partition.chunk_count
    mand = np.zeros((L, C), dtype=bool)
    if config.force_cross_modal:
        text = partition.text_chunk_ids()
        if text.size:
            mand[:, text] = True
    if config.force_intra_shot:
        qshot = _effective_query_shots(stream)
        cshot = partition.chunk_shot_ids()
        mand |= qshot[:, None] == cshot[None, :]
    if config.force_self_chunk:
        mand[np.arange(L), partition.chunk_of_token] = True
    return mand


def candidate_mask(
    query_token: int,
    partition: ChunkPartition,
    stream: TokenStream,
    config: RoutingConfig,
) -> tuple[set[int], set[int]]:
    """Forced (mandatory) chunks and the routable candidate pool for one query.

    Candidates exclude every mandatory chunk; with causality on they are
    further limited to chunks strictly before the query's own chunk, so the
    router never spends budget on a chunk it already has.
    """
    if query_token < 0 or query_token >= partition.length:
        raise ShapeMismatch(f"query token {query_token} outside stream")
    mand_row = _mandatory_mask(partition, stream, config)[query_token]
    cand_row = ~mand_row
    if config.causal:
        own = int(partition.chunk_of_token[query_token])
        cand_row &= np.arange(partition.chunk_count) < own
    return (
        set(np.flatnonzero(mand_row).tolist()),
        set(np.flatnonzero(cand_row).tolist()),
    )


def topk_select(scores: dict[int, float] | np.ndarray, k: int,
                candidates: Optional[Iterable[int]] = None) -> set[int]:
    """The k highest-scoring candidates; ties break toward the lower chunk id.

    ``scores`` is either {chunk_id: score} or a dense score vector combined
    with an explicit candidate iterable.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(scores, dict):
        items = sorted(scores.items())
    else:
        cand = sorted(candidates) if candidates is not None else range(len(scores))
        items = [(int(c), float(scores[c])) for c in cand]
    if len(items) <= k:
        return {c for c, _ in items}
    order = sorted(items, key=lambda cs: (-cs[1], cs[0]))
    return {c for c, _ in order[:k]}


def drop_rng(seed: int, head: int, query: int) -> np.random.Generator:
    """Counter-style generator keyed by (seed, head, query).

    Streams are independent and order-free, so parallel and serial evaluation
    of a table draw identical perturbations.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(head, query)))


def apply_drop(
    routed: Iterable[int],
    config: DropConfig,
    rng: np.random.Generator,
    candidates: Iterable[int],
    k: Optional[int] = None,
) -> tuple[set[int], set[int]]:
    """Drop-off then drop-in on one query's routed set.

    Removes floor(p_drop * k) routed chunks with p_drop uniform on [0, p_max]
    (k defaults to |routed|, clamping when the routed set is smaller than the
    budget), then inserts Poisson(rate) chunks drawn from the candidate pool
    minus the pre-drop routed set. Mandatory chunks are not candidates and
    therefore can never be dropped or duplicated.

    Returns (kept_routed, dropped_in).
    """
    if not config.enabled:
        raise DropDisabled("apply_drop called with enabled=False")
    routed = sorted(set(routed))
    pool = sorted(set(candidates) - set(routed))
    budget = len(routed) if k is None else k
    p_drop = rng.uniform(0.0, config.p_max)
    n_drop = min(int(np.floor(p_drop * budget)), len(routed))
    kept = set(routed)
    if n_drop > 0:
        removed = rng.choice(np.array(routed, dtype=np.int64), size=n_drop, replace=False)
        kept -= {int(c) for c in removed}
    m = int(rng.poisson(config.rate))
    added: set[int] = set()
    if m > 0 and pool:
        picked = rng.choice(np.array(pool, dtype=np.int64), size=min(m, len(pool)), replace=False)
        added = {int(c) for c in picked}
    return kept, added


def build_routing_table(
    inputs: AttentionInputs,
    partition: ChunkPartition,
    stream: TokenStream,
    config: RoutingConfig,
) -> RoutingTable:
    """Route every (head, query) pair: mandatory links, top-k, optional drops.

    Selection is deterministic for a fixed (inputs, config, drop seed).
    """
    H, L = inputs.H, inputs.L
    if L != partition.length:
        raise ShapeMismatch(f"partition covers {partition.length} tokens, inputs have {L}")
    C = partition.chunk_count

    desc = pool_descriptors(inputs.K, partition)
    q64 = inputs.Q.astype(np.float64, copy=False)
    scores = np.empty((H, L, C), dtype=np.float64)
    for h in range(H):
        scores[h] = q64[h] @ desc.values[h].T

    mand = _mandatory_mask(partition, stream, config)
    cand = ~mand
    own_chunk = partition.chunk_of_token
    if config.causal:
        cand &= np.arange(C)[None, :] < own_chunk[:, None]

    if config.shared_routing:
        # Every query in a chunk votes through the chunk's mean query vector.
        starts = np.array([c.start for c in partition.chunks], dtype=np.intp)
        counts = partition.chunk_sizes().astype(np.float64)
        chunk_scores = np.empty((H, C, C), dtype=np.float64)
        for h in range(H):
            qmean = np.add.reduceat(q64[h], starts, axis=0) / counts[:, None]
            chunk_scores[h] = qmean @ desc.values[h].T
        scores = chunk_scores[:, own_chunk, :]

    routed = np.zeros((H, L, C), dtype=bool)
    masked = np.where(cand[None, :, :], scores, -np.inf)
    n_take = np.minimum(config.k, cand.sum(axis=1))  # [L]
    # Stable argsort on negated scores: equal scores keep ascending chunk id.
    order = np.argsort(-masked, axis=2, kind="stable")
    take = np.arange(C)[None, None, :] < n_take[None, :, None]
    np.put_along_axis(routed, order, take, axis=2)

    dropped = np.zeros((H, L, C), dtype=bool)
    if config.drop is not None and config.drop.enabled:
        cand_ids = [np.flatnonzero(cand[i]) for i in range(L)]
        for h in range(H):
            for i in range(L):
                r_ids = np.flatnonzero(routed[h, i])
                rng = drop_rng(config.drop.seed, h, i)
                kept, added = apply_drop(r_ids, config.drop, rng, cand_ids[i], k=config.k)
                routed[h, i] = False
                if kept:
                    routed[h, i, sorted(kept)] = True
                if added:
                    dropped[h, i, sorted(added)] = True

    mandatory = np.broadcast_to(mand, (H, L, C)).copy()
    return RoutingTable(
        mandatory=mandatory,
        routed=routed,
        dropped_in=dropped,
        scores=scores,
        k=config.k,
        causal=config.causal,
    )


def routing_count_matrix(table: RoutingTable, partition: ChunkPartition) -> np.ndarray:
    """Aggregate selections to chunk granularity: [H, C, C, 3] counts.

    Entry [h, a, b, p] counts query tokens in chunk a selecting chunk b with
    provenance p (0=mandatory, 1=routed, 2=dropped-in).
    """
    H, L, C = table.mandatory.shape
    out = np.zeros((H, C, C, 3), dtype=np.int64)
    own = partition.chunk_of_token
    for p, mask in enumerate((table.mandatory, table.routed, table.dropped_in)):
        for h in range(H):
            np.add.at(out[h, :, :, p], own, mask[h].astype(np.int64))
    return out


def routed_chunk_graph(table: RoutingTable, partition: ChunkPartition) -> np.ndarray:
    """Boolean chunk adjacency: a->b iff any query in a routes to b, any head."""
    counts = routing_count_matrix(table, partition)
    return counts[:, :, :, 1].sum(axis=0) > 0


def detect_loop_closures(
    table: RoutingTable, partition: ChunkPartition
) -> list[tuple[int, int]]:
    """Isolated mutual routing pairs (a, b): a and b route to each other and
    neither routes to any strictly earlier chunk besides its partner.

    Empty whenever causal routing is on (all routed edges point backward, so
    no mutual edge can exist).
    """
    adj = routed_chunk_graph(table, partition)
    C = adj.shape[0]
    pairs = []
    for a in range(C):
        for b in range(a + 1, C):
            if not (adj[a, b] and adj[b, a]):
                continue
            earlier_a = [c for c in np.flatnonzero(adj[a]) if c < a and c != b]
            earlier_b = [c for c in np.flatnonzero(adj[b]) if c < b and c != a]
            if not earlier_a and not earlier_b:
                pairs.append((a, b))
    return pairs
