"""Directed temporal-KNN graph over a FrameGrid.

Each point receives edges from its k nearest points in the preceding frame;
points in frame 1 connect within their own frame (excluding themselves,
since a self-edge carries an all-zero feature difference). Topology is a
deterministic function of the coordinates alone, never learned. Nearness is
compared on squared Euclidean distances, with ties broken by the lower
source index; the edge list is sorted by (dst, src).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pointveil.data import FrameGrid

MODE_TEMPORAL = "temporal"
MODE_WITHIN_FRAME = "within_frame"  # ablation: drop cross-frame edges
MODE_SPATIAL_ALL = "spatial_all"    # ablation: KNN over all frames jointly

_MODES = (MODE_TEMPORAL, MODE_WITHIN_FRAME, MODE_SPATIAL_ALL)


@dataclass
class TemporalGraph:
    node_coords: np.ndarray   # (N, 3) float
    node_frame: np.ndarray    # (N,) int32, 1-based
    edges: np.ndarray         # (E, 2) int32 rows (src, dst), sorted by (dst, src)
    k: int

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_nodes)


def candidate_set(grid: FrameGrid, i: int, mode: str = MODE_TEMPORAL) -> np.ndarray:
    """Indices of the potential neighbors of node i (frame-major indexing)."""
    if mode not in _MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    n = grid.n_points
    if not 0 <= i < n:
        raise IndexError(f"node index {i} out of range 0..{n - 1}")
    p = grid.points_per_frame
    frame = i // p  # 0-based
    if mode == MODE_SPATIAL_ALL:
        return np.concatenate([np.arange(i), np.arange(i + 1, n)]).astype(np.int64)
    if mode == MODE_TEMPORAL and frame > 0:
        return np.arange((frame - 1) * p, frame * p, dtype=np.int64)
    same = np.arange(frame * p, (frame + 1) * p, dtype=np.int64)
    return same[same != i]


def build_temporal_graph(grid: FrameGrid, k: int, mode: str = MODE_TEMPORAL) -> TemporalGraph:
    """KNN edge construction; each node takes min(k, |candidates|) sources."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in _MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    coords = grid.node_coords().astype(np.float64)
    frames = grid.node_frames()
    f, p = grid.frames, grid.points_per_frame
    n = f * p
    src_blocks: list[np.ndarray] = []
    dst_blocks: list[np.ndarray] = []

    if mode == MODE_SPATIAL_ALL:
        d2 = _pairwise_sq(coords, coords)
        np.fill_diagonal(d2, np.inf)
        kk = min(k, n - 1)
        if kk > 0:
            order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
            src_blocks.append(order.reshape(-1))
            dst_blocks.append(np.repeat(np.arange(n), kk))
    else:
        cube = coords.reshape(f, p, 3)
        # Within-frame part: frame 1 always, every frame under the ablation.
        own_frames = np.arange(f) if mode == MODE_WITHIN_FRAME else np.arange(min(f, 1))
        if own_frames.size and p > 1:
            blocks = cube[own_frames]
            diff = blocks[:, :, None, :] - blocks[:, None, :, :]
            d2 = np.einsum("fijc,fijc->fij", diff, diff)
            d2[:, np.arange(p), np.arange(p)] = np.inf
            kk = min(k, p - 1)
            order = np.argsort(d2.reshape(-1, p), axis=1, kind="stable")[:, :kk]
            base = (own_frames * p).repeat(p)
            src_blocks.append((order + base[:, None]).reshape(-1))
            dst_blocks.append(np.repeat(base + np.tile(np.arange(p), own_frames.size), kk))
        if mode == MODE_TEMPORAL and f > 1:
            diff = cube[1:, :, None, :] - cube[:-1, None, :, :]
            d2 = np.einsum("fijc,fijc->fij", diff, diff)
            kk = min(k, p)
            order = np.argsort(d2.reshape(-1, p), axis=1, kind="stable")[:, :kk]
            base = (np.arange(f - 1) * p).repeat(p)
            src_blocks.append((order + base[:, None]).reshape(-1))
            dst_blocks.append(np.repeat(np.arange(p, n), kk))

    if src_blocks:
        src = np.concatenate(src_blocks)
        dst = np.concatenate(dst_blocks)
        order = np.lexsort((src, dst))
        edges = np.column_stack([src[order], dst[order]]).astype(np.int32)
    else:
        edges = np.zeros((0, 2), dtype=np.int32)
    return TemporalGraph(coords, frames, edges, k)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def dump_edges_csv(graph: TemporalGraph, path: str) -> None:
    """Debug dump: one `dst,src,distance` line per edge."""
    src = graph.edges[:, 0]
    dst = graph.edges[:, 1]
    dist = np.sqrt(np.sum((graph.node_coords[src] - graph.node_coords[dst]) ** 2, axis=1))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dst,src,distance\n")
        for d, s, w in zip(dst, src, dist):
            fh.write(f"{d},{s},{float(w)!r}\n")
