"""Sparse hypergraphs, line graphs, and line-graph induction.

A hypergraph is stored hyperedge-major (CSC-style offsets into a flat
node-id array) together with a node->hyperedge inverted index; both the
convolution kernels and the fast line-graph induction traverse those two
layouts. Hypergraph and LineGraph are immutable after construction and
safe to share across threads.

Line-graph induction comes in two flavours with identical output:

* ``induce_line_graph_naive`` checks every unordered hyperedge pair with
  plain set arithmetic; it is the reference oracle.
* ``induce_line_graph_fast`` enumerates only candidate pairs that
  co-occur under some node (via the inverted index), computes
  intersections by merging sorted member arrays inside nogil JIT
  kernels, and partitions the pair work across ``threads`` workers.
  Intersection and union sizes are exact integers and the single final
  division happens in double precision, so the result is bit-identical
  to the naive oracle for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError, EmptyHyperedge, NodeIdOutOfRange

VIEW_TAGS = ("entity", "item", "word", "review")


class Hyperedge:
    """A non-empty set of node ids with a provenance tag.

    Members are normalized to a sorted, duplicate-free tuple.
    """

    __slots__ = ("members", "provenance")

    def __init__(self, members, provenance=""):
        normalized = tuple(sorted(set(int(m) for m in members)))
        if not normalized:
            raise EmptyHyperedge("hyperedge must contain at least one node")
        if normalized[0] < 0:
            raise NodeIdOutOfRange(f"negative node id {normalized[0]}")
        object.__setattr__(self, "members", normalized)
        object.__setattr__(self, "provenance", str(provenance))

    def __setattr__(self, name, value):
        raise AttributeError("Hyperedge is immutable")

    def __len__(self):
        return len(self.members)

    def __eq__(self, other):
        return (
            isinstance(other, Hyperedge)
            and self.members == other.members
            and self.provenance == other.provenance
        )

    def __hash__(self):
        return hash((self.members, self.provenance))

    def __repr__(self):
        return f"Hyperedge({list(self.members)}, provenance={self.provenance!r})"


def jaccard(e_p: Hyperedge, e_q: Hyperedge) -> float:
    """Intersection-over-union of two hyperedges, exact ints divided last."""
    a, b = set(e_p.members), set(e_q.members)
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class Hypergraph:
    """Immutable hypergraph over nodes 0..node_count-1.

    ``edge_offsets``/``edge_nodes`` hold the hyperedge-major incidence
    (sorted node ids per hyperedge); ``node_offsets``/``node_edges`` is
    the node->hyperedge inverted index (sorted edge ids per node).
    """

    node_count: int
    hyperedges: tuple
    view_tag: str = "item"
    turn_index: int = 0
    edge_offsets: np.ndarray = field(repr=False, default=None)
    edge_nodes: np.ndarray = field(repr=False, default=None)
    node_offsets: np.ndarray = field(repr=False, default=None)
    node_edges: np.ndarray = field(repr=False, default=None)

    @property
    def edge_count(self) -> int:
        return len(self.hyperedges)

    @property
    def node_degrees(self) -> np.ndarray:
        """d(v) = number of hyperedges containing node v."""
        return np.diff(self.node_offsets)

    @property
    def edge_degrees(self) -> np.ndarray:
        """delta(h) = number of nodes in hyperedge h."""
        return np.diff(self.edge_offsets)

    def incidence_dense(self) -> np.ndarray:
        """Densified 0/1 incidence matrix, node_count x edge_count."""
        H = np.zeros((self.node_count, self.edge_count), dtype=np.float64)
        for h, edge in enumerate(self.hyperedges):
            for v in edge.members:
                H[v, h] = 1.0
        return H

    def to_text(self) -> str:
        lines = [f"nodes={self.node_count} edges={self.edge_count} view={self.view_tag}"]
        for edge in self.hyperedges:
            lines.append(edge.provenance + "\t" + " ".join(str(v) for v in edge.members))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, turn_index: int = 0) -> "Hypergraph":
        lines = text.splitlines()
        if not lines:
            raise DataError("empty hypergraph serialization")
        try:
            header = dict(part.split("=", 1) for part in lines[0].split())
            node_count = int(header["nodes"])
            edge_count = int(header["edges"])
            view_tag = header["view"]
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad hypergraph header: {lines[0]!r}") from exc
        edges = []
        for line in lines[1 : edge_count + 1]:
            provenance, _, ids = line.partition("\t")
            edges.append(Hyperedge((int(tok) for tok in ids.split()), provenance))
        if len(edges) != edge_count:
            raise DataError(f"expected {edge_count} hyperedges, found {len(edges)}")
        return build_incidence(edges, node_count, view_tag=view_tag, turn_index=turn_index)


def build_incidence(
    hyperedges,
    node_count: int,
    view_tag: str = "item",
    turn_index: int = 0,
) -> Hypergraph:
    """Assemble a Hypergraph from hyperedges, validating node ids.

    Column order of the incidence follows input order. Degree vectors
    are derived from the two sparse layouts, never from a dense matrix.
    """
    if view_tag not in VIEW_TAGS:
        raise DataError(f"unknown view tag {view_tag!r}")
    edges = tuple(
        e if isinstance(e, Hyperedge) else Hyperedge(e) for e in hyperedges
    )
    for h, edge in enumerate(edges):
        if edge.members[-1] >= node_count:
            raise NodeIdOutOfRange(
                f"hyperedge {h} references node {edge.members[-1]} "
                f">= node_count {node_count}"
            )

    sizes = np.fromiter((len(e) for e in edges), dtype=np.int64, count=len(edges))
    edge_offsets = np.zeros(len(edges) + 1, dtype=np.int64)
    np.cumsum(sizes, out=edge_offsets[1:])
    edge_nodes = np.empty(int(edge_offsets[-1]), dtype=np.int64)
    for h, edge in enumerate(edges):
        edge_nodes[edge_offsets[h] : edge_offsets[h + 1]] = edge.members

    # invert: node -> sorted hyperedge ids
    node_deg = np.bincount(edge_nodes, minlength=node_count).astype(np.int64)
    node_offsets = np.zeros(node_count + 1, dtype=np.int64)
    np.cumsum(node_deg, out=node_offsets[1:])
    node_edges = np.empty_like(edge_nodes)
    cursor = node_offsets[:-1].copy()
    for h in range(len(edges)):
        for v in edge_nodes[edge_offsets[h] : edge_offsets[h + 1]]:
            node_edges[cursor[v]] = h
            cursor[v] += 1

    for arr in (edge_offsets, edge_nodes, node_offsets, node_edges):
        arr.setflags(write=False)
    return Hypergraph(
        node_count=node_count,
        hyperedges=edges,
        view_tag=view_tag,
        turn_index=turn_index,
        edge_offsets=edge_offsets,
        edge_nodes=edge_nodes,
        node_offsets=node_offsets,
        node_edges=node_edges,
    )


@dataclass(frozen=True)
class LineGraph:
    """Weighted line graph: one node per hyperedge, CSR adjacency.

    Symmetric, zero diagonal; a nonzero weight is the exact
    intersection-over-union of the two hyperedges.
    """

    hyperedge_count: int
    row_offsets: np.ndarray = field(repr=False, default=None)
    cols: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)
    turn_index: int = 0

    @property
    def edge_pair_count(self) -> int:
        """Number of undirected weighted edges."""
        return len(self.cols) // 2

    def adjacency_dense(self) -> np.ndarray:
        L = np.zeros((self.hyperedge_count, self.hyperedge_count), dtype=np.float64)
        for p in range(self.hyperedge_count):
            for idx in range(self.row_offsets[p], self.row_offsets[p + 1]):
                L[p, self.cols[idx]] = self.weights[idx]
        return L

    def equals(self, other: "LineGraph") -> bool:
        """Bit-exact structural and weight equality."""
        return (
            self.hyperedge_count == other.hyperedge_count
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.weights, other.weights)
        )


def _assemble_line_graph(n_edges, ps, qs, weights, turn_index) -> LineGraph:
    """Build symmetric CSR from unique upper-triangle pairs (p < q)."""
    rows = np.concatenate([ps, qs])
    cols = np.concatenate([qs, ps])
    w = np.concatenate([weights, weights])
    order = np.lexsort((cols, rows))
    rows, cols, w = rows[order], cols[order], w[order]
    row_offsets = np.zeros(n_edges + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_edges), out=row_offsets[1:])
    for arr in (row_offsets, cols, w):
        arr.setflags(write=False)
    return LineGraph(
        hyperedge_count=n_edges,
        row_offsets=row_offsets,
        cols=cols,
        weights=w,
        turn_index=turn_index,
    )


def induce_line_graph_naive(g: Hypergraph) -> LineGraph:
    """Reference induction: test every unordered pair with set arithmetic.

    O(edge_count^2 * max edge size); the oracle the fast path is checked
    against.
    """
    member_sets = [frozenset(e.members) for e in g.hyperedges]
    ps, qs, ws = [], [], []
    for p in range(len(member_sets)):
        sp = member_sets[p]
        for q in range(p + 1, len(member_sets)):
            inter = len(sp & member_sets[q])
            if inter:
                ps.append(p)
                qs.append(q)
                ws.append(inter / len(sp | member_sets[q]))
    return _assemble_line_graph(
        g.edge_count,
        np.asarray(ps, dtype=np.int64),
        np.asarray(qs, dtype=np.int64),
        np.asarray(ws, dtype=np.float64),
        g.turn_index,
    )


@njit(cache=True)
def _enumerate_candidates(node_offsets, node_edges):
    """All co-occurring hyperedge pairs (p < q), one entry per shared node."""
    total = 0
    for v in range(len(node_offsets) - 1):
        d = node_offsets[v + 1] - node_offsets[v]
        total += d * (d - 1) // 2
    ps = np.empty(total, dtype=np.int64)
    qs = np.empty(total, dtype=np.int64)
    k = 0
    for v in range(len(node_offsets) - 1):
        lo, hi = node_offsets[v], node_offsets[v + 1]
        for i in range(lo, hi):
            for j in range(i + 1, hi):
                ps[k] = node_edges[i]
                qs[k] = node_edges[j]
                k += 1
    return ps, qs


@njit(nogil=True, cache=True)
def _pair_weights_chunk(ps, qs, edge_offsets, edge_nodes, inter, weight, lo, hi):
    """Merge-count intersections for candidate pairs in [lo, hi).

    Writes only slots lo..hi-1, so chunks can run concurrently and the
    result is independent of scheduling.
    """
    for t in range(lo, hi):
        p, q = ps[t], qs[t]
        i, iend = edge_offsets[p], edge_offsets[p + 1]
        j, jend = edge_offsets[q], edge_offsets[q + 1]
        common = 0
        while i < iend and j < jend:
            a, b = edge_nodes[i], edge_nodes[j]
            if a == b:
                common += 1
                i += 1
                j += 1
            elif a < b:
                i += 1
            else:
                j += 1
        inter[t] = common
        union = (iend - edge_offsets[p]) + (jend - edge_offsets[q]) - common
        weight[t] = common / union


def induce_line_graph_fast(g: Hypergraph, threads: int = 1, counters: dict | None = None) -> LineGraph:
    """Inverted-index induction, bit-identical to the naive oracle.

    Candidate pairs are enumerated per node bucket, deduplicated into a
    deterministic (p, q) order, then weighted in parallel chunks. When
    ``counters`` is given, ``counters['candidate_pairs']`` records the
    number of enumerated (pre-deduplication) candidates.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    m = g.edge_count
    ps_raw, qs_raw = _enumerate_candidates(g.node_offsets, g.node_edges)
    if counters is not None:
        counters["candidate_pairs"] = int(len(ps_raw))
    if len(ps_raw) == 0:
        empty = np.empty(0, dtype=np.int64)
        return _assemble_line_graph(m, empty, empty, empty.astype(np.float64), g.turn_index)

    codes = np.unique(ps_raw * np.int64(m) + qs_raw)
    ps = codes // m
    qs = codes - ps * m

    n_pairs = len(ps)
    inter = np.empty(n_pairs, dtype=np.int64)
    weight = np.empty(n_pairs, dtype=np.float64)
    bounds = np.linspace(0, n_pairs, threads + 1, dtype=np.int64)
    if threads == 1:
        _pair_weights_chunk(ps, qs, g.edge_offsets, g.edge_nodes, inter, weight, 0, n_pairs)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _pair_weights_chunk,
                    ps, qs, g.edge_offsets, g.edge_nodes, inter, weight,
                    int(bounds[c]), int(bounds[c + 1]),
                )
                for c in range(threads)
                if bounds[c] < bounds[c + 1]
            ]
            for fut in futures:
                fut.result()

    keep = inter > 0
    return _assemble_line_graph(m, ps[keep], qs[keep], weight[keep], g.turn_index)
