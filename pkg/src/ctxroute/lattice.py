"""Flattened multi-modal token stream: boundary tagging and content-aligned chunking.

The stream interleaves text (caption) and video tokens. Boundaries never cut
through a frame or a caption segment, so every chunk is homogeneous in
(modality, shot) and video chunks start and end on frame boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyStream, IndexOutOfRange, NonMonotonicStream

# Chunk-level shot id of the global caption chunk. Token metadata never stores
# this value; at token level the GLOBAL_CAPTION scope is the marker.
GLOBAL_CAPTION_SHOT = -1


class Modality(Enum):
    TEXT = "text"
    VIDEO = "video"


class CaptionScope(Enum):
    GLOBAL_CAPTION = "global"
    SHOT_CAPTION = "shot"
    NOT_CAPTION = "none"


@dataclass(frozen=True)
class TokenMeta:
    """Per-token position metadata in the flattened stream.

    Text tokens carry the frame_id of their insertion point and the shot_id of
    the shot they caption (the global caption uses the first shot's id and is
    distinguished by its caption_scope, not by a sentinel value).
    """

    index: int
    modality: Modality
    shot_id: int
    frame_id: int
    spatial: Optional[tuple[int, int]] = None
    caption_scope: CaptionScope = CaptionScope.NOT_CAPTION

    def __post_init__(self):
        if self.index < 0 or self.shot_id < 0 or self.frame_id < 0:
            raise ValueError(f"negative field in TokenMeta at index {self.index}")
        is_text = self.modality is Modality.TEXT
        if is_text != (self.caption_scope is not CaptionScope.NOT_CAPTION):
            raise ValueError(
                f"caption_scope {self.caption_scope} inconsistent with modality at index {self.index}"
            )
        if is_text and self.spatial is not None:
            raise ValueError(f"text token at index {self.index} carries spatial metadata")

    @property
    def effective_shot(self) -> int:
        """Shot id used by routing; the global caption sits before all shots."""
        if self.caption_scope is CaptionScope.GLOBAL_CAPTION:
            return GLOBAL_CAPTION_SHOT
        return self.shot_id


@dataclass(frozen=True)
class TokenStream:
    """A validated stream plus its boundary index tables.

    All three tables are strictly increasing, start at 0, and their implied
    segments tile [0, L). ``frame_starts`` marks the finest content units:
    one entry per video frame and one per caption segment.
    """

    length: int
    metas: tuple[TokenMeta, ...]
    frame_starts: np.ndarray
    shot_starts: np.ndarray
    modality_run_starts: np.ndarray

    def __post_init__(self):
        for table in (self.frame_starts, self.shot_starts, self.modality_run_starts):
            table.setflags(write=False)

    def segment_bounds(self, table: np.ndarray) -> list[tuple[int, int]]:
        edges = list(table) + [self.length]
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True)
class Chunk:
    """A contiguous homogeneous token run acting as one routing candidate."""

    chunk_id: int
    start: int
    end: int
    kind: Modality
    shot_id: int  # GLOBAL_CAPTION_SHOT for the global caption chunk

    @property
    def token_count(self) -> int:
        return self.end - self.start

    def token_indices(self) -> np.ndarray:
        return np.arange(self.start, self.end)


@dataclass(frozen=True)
class ChunkPartition:
    """Content-aligned variable-length chunks tiling the stream."""

    chunks: tuple[Chunk, ...]
    chunk_of_token: np.ndarray  # [L] int, token index -> chunk_id
    target_size: int

    def __post_init__(self):
        self.chunk_of_token.setflags(write=False)

    @property
    def length(self) -> int:
        return int(self.chunk_of_token.shape[0])

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    def chunk_sizes(self) -> np.ndarray:
        return np.array([c.token_count for c in self.chunks], dtype=np.int64)

    def chunk_shot_ids(self) -> np.ndarray:
        return np.array([c.shot_id for c in self.chunks], dtype=np.int64)

    def text_chunk_ids(self) -> np.ndarray:
        return np.array(
            [c.chunk_id for c in self.chunks if c.kind is Modality.TEXT], dtype=np.int64
        )


def _meta_arrays(metas: Sequence[TokenMeta]):
    shot = np.fromiter((m.shot_id for m in metas), dtype=np.int64, count=len(metas))
    frame = np.fromiter((m.frame_id for m in metas), dtype=np.int64, count=len(metas))
    is_text = np.fromiter(
        (m.modality is Modality.TEXT for m in metas), dtype=bool, count=len(metas)
    )
    scope = np.fromiter(
        (0 if m.caption_scope is CaptionScope.NOT_CAPTION
         else (1 if m.caption_scope is CaptionScope.SHOT_CAPTION else 2)
         for m in metas),
        dtype=np.int64,
        count=len(metas),
    )
    return shot, frame, is_text, scope


def tag_boundaries(metas: Sequence[TokenMeta]) -> TokenStream:
    """Scan a meta sequence once and derive the boundary index tables.

    Raises EmptyStream on zero tokens and NonMonotonicStream when shot_id
    decreases anywhere or frame_id decreases within a shot's video tokens.
    """
    L = len(metas)
    if L == 0:
        raise EmptyStream("token stream has no tokens")
    for i, m in enumerate(metas):
        if m.index != i:
            raise ValueError(f"token index {m.index} at position {i}; indices must be 0..L-1")

    shot, frame, is_text, scope = _meta_arrays(metas)
    if np.any(np.diff(shot) < 0):
        raise NonMonotonicStream("shot_id decreases along the stream")
    for s in np.unique(shot):
        vf = frame[(shot == s) & ~is_text]
        if vf.size and np.any(np.diff(vf) < 0):
            raise NonMonotonicStream(f"frame_id decreases within shot {int(s)}")

    def change_points(*keys: np.ndarray) -> np.ndarray:
        changed = np.zeros(L, dtype=bool)
        changed[0] = True
        for key in keys:
            changed[1:] |= key[1:] != key[:-1]
        return np.flatnonzero(changed).astype(np.int64)

    # Finest units: a new segment whenever frame, shot, modality, or caption
    # scope flips (scope separates adjacent global/shot caption segments).
    frame_starts = change_points(frame, shot, is_text.astype(np.int64), scope)
    shot_starts = change_points(shot)
    modality_run_starts = change_points(is_text.astype(np.int64))
    return TokenStream(
        length=L,
        metas=tuple(metas),
        frame_starts=frame_starts,
        shot_starts=shot_starts,
        modality_run_starts=modality_run_starts,
    )


def build_chunks(stream: TokenStream, target_size: int) -> ChunkPartition:
    """Greedy left-to-right packing of whole content units into chunks.

    Video frames within one (shot, modality) run are accumulated until the next
    frame would exceed ``target_size``; a frame larger than the target becomes
    its own chunk. Caption segments are never merged: each is one chunk.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")

    units = stream.segment_bounds(stream.frame_starts)
    metas = stream.metas
    chunks: list[Chunk] = []

    def close(start: int, end: int):
        m = metas[start]
        chunks.append(
            Chunk(
                chunk_id=len(chunks),
                start=start,
                end=end,
                kind=m.modality,
                shot_id=m.effective_shot,
            )
        )

    open_start: Optional[int] = None
    open_end = 0
    open_key = None
    for a, b in units:
        m = metas[a]
        if m.modality is Modality.TEXT:
            if open_start is not None:
                close(open_start, open_end)
                open_start = None
            close(a, b)
            continue
        key = (m.shot_id,)
        size = b - a
        if open_start is not None and (key != open_key or open_end - open_start + size > target_size):
            close(open_start, open_end)
            open_start = None
        if open_start is None:
            open_start, open_key = a, key
        open_end = b
    if open_start is not None:
        close(open_start, open_end)

    chunk_of_token = np.empty(stream.length, dtype=np.int64)
    for c in chunks:
        chunk_of_token[c.start : c.end] = c.chunk_id
    return ChunkPartition(
        chunks=tuple(chunks), chunk_of_token=chunk_of_token, target_size=target_size
    )


def chunk_lookup(partition: ChunkPartition, token_index: int) -> int:
    """O(1) lookup of the chunk containing a token."""
    if token_index < 0 or token_index >= partition.length:
        raise IndexOutOfRange(
            f"token index {token_index} outside [0, {partition.length})"
        )
    return int(partition.chunk_of_token[token_index])
