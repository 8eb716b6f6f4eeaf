"""Temporal transaction graph.

Nodes are transactions sorted by ``(cardholder_id, timestamp, txn_id)``.
Each node's in-neighbours are its ``k`` most recent predecessors from the
same cardholder plus a self-loop, stored as CSR (``indptr``/``indices``),
oldest first, self last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GTANGRPH"
VERSION = 1
_HEADER = struct.Struct("<8sIQIQ")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalGraph:
    indptr: np.ndarray
    indices: np.ndarray
    timestamp: np.ndarray
    cardholder: np.ndarray
    txn_id: np.ndarray
    max_edges: int

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        """Stored edges, self-loops included."""
        return int(self.indptr[-1])

    @property
    def n_temporal_edges(self) -> int:
        return self.n_edges - self.n_nodes

    def in_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edge_targets(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), self.in_degree())

    def edge_timestamps(self) -> np.ndarray:
        return self.timestamp[self.indices]


def _check_sorted(cardholder, timestamp, txn_id) -> None:
    if len(cardholder) < 2:
        return
    dc = np.diff(cardholder)
    dt = np.diff(timestamp)
    di = np.diff(txn_id)
    ok = (dc > 0) | ((dc == 0) & ((dt > 0) | ((dt == 0) & (di > 0))))
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise GraphError(f"records not sorted by (cardholder, timestamp, txn_id) at row {bad + 1}")


def build_graph(cardholder, timestamp, txn_id, max_edges: int = 6) -> TemporalGraph:
    """Build the recency-truncated temporal graph.

    Inputs are parallel arrays, already sorted by ``(cardholder, timestamp,
    txn_id)``. Runs in O(N + E) with no Python loop over nodes.
    """
    if max_edges < 1:
        raise GraphError("max_edges must be >= 1")
    cardholder = np.ascontiguousarray(cardholder, dtype=np.int64)
    timestamp = np.ascontiguousarray(timestamp, dtype=np.int64)
    txn_id = np.ascontiguousarray(txn_id, dtype=np.int64)
    _check_sorted(cardholder, timestamp, txn_id)
    n = len(cardholder)
    node = np.arange(n, dtype=np.int64)
    new_group = np.ones(n, dtype=bool)
    if n > 1:
        new_group[1:] = cardholder[1:] != cardholder[:-1]
    group_start = np.maximum.accumulate(np.where(new_group, node, 0)) if n else node
    n_pred = np.minimum(node - group_start, max_edges)
    degree = n_pred + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degree, out=indptr[1:])
    first = node - n_pred
    offset = np.arange(indptr[-1], dtype=np.int64) - np.repeat(indptr[:-1], degree)
    indices = np.repeat(first, degree) + offset
    return TemporalGraph(indptr, indices, timestamp, cardholder, txn_id, int(max_edges))


def build_graph_from_table(table, max_edges: int = 6) -> TemporalGraph:
    if not table.is_sorted():
        raise GraphError("table is not sorted by (cardholder, timestamp, txn_id)")
    return build_graph(table.cardholder_id, table.timestamp, table.txn_id, max_edges)


@dataclass(frozen=True)
class Violation:
    source: int
    target: int
    reason: str


def verify_no_future_edges(graph: TemporalGraph) -> list[Violation]:
    """All edges whose source is later than, or on a different card from, the target."""
    dst = graph.edge_targets()
    src = graph.indices
    if len(src) and (src.min() < 0 or src.max() >= graph.n_nodes):
        raise GraphError("edge source out of range")
    future = graph.timestamp[src] > graph.timestamp[dst]
    foreign = graph.cardholder[src] != graph.cardholder[dst]
    out = []
    for e in np.flatnonzero(future | foreign):
        reason = "future source" if future[e] else "different cardholder"
        if future[e] and foreign[e]:
            reason = "future source, different cardholder"
        out.append(Violation(int(src[e]), int(dst[e]), reason))
    return out


# ---------------------------------------------------------------- binary format


def save_graph(graph: TemporalGraph, path: str | Path, provenance: str = "") -> None:
    """Little-endian flat file: header, offsets, neighbours, edge timestamps, node arrays.

    A trailer holds ``provenance`` as length-prefixed UTF-8 text.
    """
    raw = provenance.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, graph.n_nodes, graph.max_edges, graph.n_edges))
        for arr in (graph.indptr, graph.indices, graph.edge_timestamps(),
                    graph.timestamp, graph.cardholder, graph.txn_id):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def load_graph(path: str | Path) -> TemporalGraph:
    return _read_graph(path)[0]


def graph_provenance(path: str | Path) -> str:
    """The provenance text stored in a graph file's trailer."""
    return _read_graph(path)[1]


def _read_graph(path: str | Path) -> tuple[TemporalGraph, str]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise GraphError(f"{path}: truncated header")
        magic, version, n, k, e = _HEADER.unpack(head)
        if magic != MAGIC:
            raise GraphError(f"{path}: not a graph file")
        if version != VERSION:
            raise GraphError(f"{path}: unsupported version {version}")

        def read(count):
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise GraphError(f"{path}: truncated body")
            return np.frombuffer(buf, dtype="<i8").astype(np.int64)

        indptr, indices, edge_ts = read(n + 1), read(e), read(e)
        timestamp, cardholder, txn_id = read(n), read(n), read(n)
        trailer = fh.read(4)
        if len(trailer) != 4:
            raise GraphError(f"{path}: truncated trailer")
        (n_raw,) = struct.unpack("<I", trailer)
        raw = fh.read(n_raw)
        if len(raw) != n_raw:
            raise GraphError(f"{path}: truncated trailer")
    graph = TemporalGraph(indptr, indices, timestamp, cardholder, txn_id, int(k))
    if not np.array_equal(graph.edge_timestamps(), edge_ts):
        raise GraphError(f"{path}: edge timestamps inconsistent with node timestamps")
    return graph, raw.decode("utf-8")


# ---------------------------------------------------------------- mini-batch subgraphs


@dataclass(frozen=True)
class BatchSubgraph:
    """k-hop in-neighbourhood of a set of center nodes.

    ``nodes`` lists global ids with the centers first, then nodes first reached
    at hop 1, hop 2, ...; ``hop_sizes[l]`` is the number of nodes within ``l``
    hops. ``edge_src``/``edge_dst`` are local ids sorted by destination and
    cover every destination below ``hop_sizes[-2]``; ``edge_counts[l]`` is the
    number of those edges whose destination lies within ``l`` hops, for
    ``l < hops``.
    """

    nodes: np.ndarray
    hop_sizes: tuple[int, ...]
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_counts: tuple[int, ...]

    @property
    def n_centers(self) -> int:
        return self.hop_sizes[0]

    @property
    def hops(self) -> int:
        return len(self.hop_sizes) - 1

    def block(self, hop: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Edges into nodes within ``hop`` hops: ``(src, dst, n_dst)``."""
        e = self.edge_counts[hop]
        return self.edge_src[:e], self.edge_dst[:e], self.hop_sizes[hop]

    def local_index(self, global_ids: np.ndarray) -> np.ndarray:
        order = np.argsort(self.nodes, kind="stable")
        pos = np.searchsorted(self.nodes[order], global_ids)
        pos = np.minimum(pos, len(order) - 1)
        found = self.nodes[order][pos] == global_ids
        if not np.all(found):
            raise KeyError("node not in subgraph")
        return order[pos]


def _gather(graph: TemporalGraph, nodes: np.ndarray, fanout: int | None, rng) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated in-neighbour lists of ``nodes`` and their degrees."""
    starts = graph.indptr[nodes]
    deg = graph.indptr[nodes + 1] - starts
    if fanout is not None and np.any(deg > fanout + 1):
        parts = []
        for s, d in zip(starts, deg):
            nb = graph.indices[s:s + d]
            if d > fanout + 1:
                keep = np.sort(rng.choice(d - 1, size=fanout, replace=False))
                nb = np.concatenate([nb[keep], nb[-1:]])
            parts.append(nb)
        deg = np.array([len(p) for p in parts], dtype=np.int64)
        return (np.concatenate(parts) if parts else np.zeros(0, np.int64)), deg
    total = int(deg.sum())
    offs = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(deg) - deg, deg)
    return graph.indices[np.repeat(starts, deg) + offs], deg


def sample_batch(graph: TemporalGraph, centers, hops: int, rng: np.random.Generator | None = None,
                 fanout: int | None = None) -> BatchSubgraph:
    """Expand ``hops`` levels of in-neighbours around ``centers``.

    With ``fanout`` set, nodes with more than ``fanout`` predecessors keep a
    random subset (drawn from ``rng``) plus the self-loop; by default all
    retained neighbours are expanded and the result is deterministic.
    """
    if hops < 1:
        raise GraphError("hops must be >= 1")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if centers.size == 0:
        raise GraphError("empty center set")
    if centers.min() < 0 or centers.max() >= graph.n_nodes:
        raise GraphError("center id out of range")
    if len(np.unique(centers)) != len(centers):
        raise GraphError("duplicate center ids")
    if fanout is not None and rng is None:
        raise GraphError("fanout sampling needs an rng")

    levels = [centers]
    seen = np.sort(centers)
    frontier = centers
    nb_lists: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(hops):
        nb, deg = _gather(graph, frontier, fanout, rng)
        nb_lists.append((nb, deg))
        new = np.setdiff1d(np.unique(nb), seen, assume_unique=True)
        levels.append(new)
        seen = np.union1d(seen, new)
        frontier = new
    nodes = np.concatenate(levels)
    hop_sizes = tuple(int(x) for x in np.cumsum([len(lv) for lv in levels]))

    # edges into every node within hops-1 hops, in local-id order
    order = np.argsort(nodes, kind="stable")
    sorted_nodes = nodes[order]

    def to_local(ids):
        return order[np.searchsorted(sorted_nodes, ids)]

    src_parts, dst_parts, counts = [], [], [0]
    offset = 0
    for lvl in range(hops):
        nb, deg = nb_lists[lvl]
        n_lvl = len(levels[lvl])
        dst_parts.append(np.repeat(np.arange(offset, offset + n_lvl, dtype=np.int64), deg))
        src_parts.append(to_local(nb))
        counts.append(counts[-1] + len(nb))
        offset += n_lvl
    edge_counts = tuple(counts[1:])
    return BatchSubgraph(nodes, hop_sizes, np.concatenate(src_parts), np.concatenate(dst_parts), edge_counts)
