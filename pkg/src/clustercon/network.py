"""Clustered networks: a static undirected connected graph with a fixed node
partition into clusters, plus the derived inter-cluster structure.

A cluster is a block of the partition; its induced sub-graph must be
connected.  For each pair of distinct clusters joined by at least one cross
edge there is exactly one inter-cluster: the set of nodes incident to a cross
edge between the pair, with the cross edges themselves as its edge set.  The
cluster edge sets and inter-cluster edge sets partition the parent edge set,
so the union of all sub-graphs returns the original graph.

Node ids are 1-based in the public API (matrices are indexed 0-based).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    """Base class for clustered-network validation failures."""


class SelfEdge(NetworkError):
    pass


class BadPartition(NetworkError):
    pass


class DisconnectedParent(NetworkError):
    pass


class DisconnectedCluster(NetworkError):
    def __init__(self, cluster: int, message: str | None = None):
        self.cluster = cluster
        super().__init__(message or f"cluster {cluster} induces a disconnected sub-graph")


class EmptySet(NetworkError):
    pass


class UnknownNode(NetworkError):
    pass


class InfeasibleRequest(NetworkError):
    pass


Edge = tuple[int, int]


def _norm_edge(p: int, q: int) -> Edge:
    if p == q:
        raise SelfEdge(f"self-edge ({p},{p}) not allowed")
    return (p, q) if p < q else (q, p)


def _connected(nodes: frozenset[int], adjacency: dict[int, set[int]]) -> bool:
    """BFS connectivity of the sub-graph on `nodes` using `adjacency`."""
    if not nodes:
        return False
    start = next(iter(nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adjacency.get(u, ()):
            if v in nodes and v not in seen:
                seen.add(v)
                queue.append(v)
    return seen == nodes


@dataclass(frozen=True)
class InterCluster:
    """One inter-cluster: nodes of two clusters joined by cross edges.

    `index` is the 1-based label r assigned by the pair-to-label bijection,
    `clusters` the (p, q) cluster pair with p < q, `nodes` the member set,
    and `edges` the cross edges only (induced same-cluster edges excluded).
    """

    index: int
    clusters: tuple[int, int]
    nodes: frozenset[int]
    edges: frozenset[Edge]


@dataclass(frozen=True)
class AugmentedMatrix:
    """N x N matrix padded with zero rows/columns for nodes outside `source_set`."""

    matrix: np.ndarray
    source_set: frozenset[int]


@dataclass(frozen=True)
class ClusteredNetwork:
    """Validated clustered network with all derived sub-graph structure.

    Immutable after construction; safe to share across concurrent simulations.
    Use :func:`build_clustered_network` instead of the constructor.
    """

    n_nodes: int
    edges: frozenset[Edge]
    partition: tuple[frozenset[int], ...]
    inter_clusters: tuple[InterCluster, ...] = field(default=())

    @property
    def n_clusters(self) -> int:
        return len(self.partition)

    @property
    def n_inter_clusters(self) -> int:
        return len(self.inter_clusters)

    def cluster_of(self, p: int) -> int:
        """1-based index of the cluster containing node p."""
        self._check_node(p)
        for k, block in enumerate(self.partition, start=1):
            if p in block:
                return k
        raise UnknownNode(f"node {p} not covered by the partition")

    def neighbors(self, p: int) -> frozenset[int]:
        self._check_node(p)
        out = {q for q in range(1, self.n_nodes + 1) if _ordered(p, q) in self.edges}
        return frozenset(out)

    def cluster_edges(self, k: int) -> frozenset[Edge]:
        """Edges of the sub-graph induced by cluster k."""
        block = self.partition[k - 1]
        return frozenset(e for e in self.edges if e[0] in block and e[1] in block)

    def partition_neighbors(self, p: int) -> tuple[frozenset[int], dict[int, frozenset[int]]]:
        """Split the neighbor set of node p by sub-graph membership.

        Returns (same-cluster neighbors, {r: neighbors via inter-cluster r}).
        Neighbors are taken through sub-graph edges (cluster edges for the
        first set, cross edges E_pq for each inter-cluster), so the returned
        sets are pairwise disjoint and union exactly to the adjacency
        neighborhood of p.  Empty sets are possible and preserved.
        """
        self._check_node(p)
        k = self.cluster_of(p)
        same = frozenset(_other(e, p) for e in self.cluster_edges(k) if p in e)
        per_inter: dict[int, frozenset[int]] = {}
        for ic in self.inter_clusters:
            per_inter[ic.index] = frozenset(_other(e, p) for e in ic.edges if p in e)
        return same, per_inter

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for p, q in self.edges:
            a[p - 1, q - 1] = 1.0
            a[q - 1, p - 1] = 1.0
        return a

    def laplacian_matrix(self) -> np.ndarray:
        a = self.adjacency_matrix()
        return np.diag(a.sum(axis=1)) - a

    def augmented_adjacency(self, source: frozenset[int] | set[int]) -> AugmentedMatrix:
        """Augmented adjacency of the sub-graph induced by `source`.

        If `source` equals an inter-cluster node set, its cross-edge set is
        used; otherwise all induced edges are.  Rows/columns of nodes outside
        `source` are zero.
        """
        source = frozenset(source)
        if not source:
            raise EmptySet("source set must be non-empty")
        for p in source:
            self._check_node(p)
        edges = self._subgraph_edges(source)
        a = np.zeros((self.n_nodes, self.n_nodes))
        for p, q in edges:
            a[p - 1, q - 1] = 1.0
            a[q - 1, p - 1] = 1.0
        return AugmentedMatrix(matrix=a, source_set=source)

    def augmented_laplacian(self, source: frozenset[int] | set[int]) -> AugmentedMatrix:
        """Augmented Laplacian L[S] = diag(A[S] 1) - A[S] of the sub-graph on S."""
        aug = self.augmented_adjacency(source)
        a = aug.matrix
        return AugmentedMatrix(matrix=np.diag(a.sum(axis=1)) - a, source_set=aug.source_set)

    def cluster_laplacian(self, k: int) -> np.ndarray:
        return self.augmented_laplacian(self.partition[k - 1]).matrix

    def inter_cluster_laplacian(self, r: int) -> np.ndarray:
        return self.augmented_laplacian(self.inter_clusters[r - 1].nodes).matrix

    def agent_cluster_laplacian_rows(self) -> np.ndarray:
        """N x N matrix whose row p is row p of the augmented Laplacian of
        the cluster containing p.  Row p applied to stacked outputs gives
        minus the same-cluster consensus sum of agent p."""
        w = np.zeros((self.n_nodes, self.n_nodes))
        for p in range(1, self.n_nodes + 1):
            lk = self.cluster_laplacian(self.cluster_of(p))
            w[p - 1, :] = lk[p - 1, :]
        return w

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "edges": sorted([list(e) for e in self.edges]),
            "clusters": [sorted(block) for block in self.partition],
        }

    def to_adjacency_text(self) -> str:
        """Plain adjacency-list dump for inspection, one `p: q1 q2 ...` line per node."""
        lines = []
        for p in range(1, self.n_nodes + 1):
            nbrs = " ".join(str(q) for q in sorted(self.neighbors(p)))
            lines.append(f"{p}: {nbrs}")
        return "\n".join(lines) + "\n"

    def _subgraph_edges(self, source: frozenset[int]) -> frozenset[Edge]:
        for ic in self.inter_clusters:
            if ic.nodes == source:
                return ic.edges
        return frozenset(e for e in self.edges if e[0] in source and e[1] in source)

    def _check_node(self, p: int) -> None:
        if not (isinstance(p, (int, np.integer)) and 1 <= p <= self.n_nodes):
            raise UnknownNode(f"node {p} outside [1..{self.n_nodes}]")


def _ordered(p: int, q: int) -> Edge:
    return (p, q) if p < q else (q, p)


def _other(edge: Edge, p: int) -> int:
    return edge[1] if edge[0] == p else edge[0]


def build_clustered_network(
    n_nodes: int,
    edges,
    partition,
) -> ClusteredNetwork:
    """Validate and assemble a clustered network.

    `edges` is an iterable of node pairs, `partition` an iterable of node
    collections.  Raises SelfEdge, BadPartition, DisconnectedParent or
    DisconnectedCluster on invalid input.
    """
    if n_nodes < 2:
        raise NetworkError("need at least 2 nodes")

    norm_edges = set()
    for p, q in edges:
        p, q = int(p), int(q)
        for v in (p, q):
            if not 1 <= v <= n_nodes:
                raise UnknownNode(f"edge endpoint {v} outside [1..{n_nodes}]")
        norm_edges.add(_norm_edge(p, q))
    norm_edges = frozenset(norm_edges)

    blocks = tuple(frozenset(int(v) for v in block) for block in partition)
    if any(not block for block in blocks):
        raise BadPartition("empty cluster in partition")
    seen: set[int] = set()
    for block in blocks:
        for v in block:
            if not 1 <= v <= n_nodes:
                raise UnknownNode(f"cluster node {v} outside [1..{n_nodes}]")
            if v in seen:
                raise BadPartition(f"node {v} appears in more than one cluster")
            seen.add(v)
    if seen != set(range(1, n_nodes + 1)):
        missing = sorted(set(range(1, n_nodes + 1)) - seen)
        raise BadPartition(f"partition does not cover nodes {missing}")

    adjacency: dict[int, set[int]] = {p: set() for p in range(1, n_nodes + 1)}
    for p, q in norm_edges:
        adjacency[p].add(q)
        adjacency[q].add(p)

    if not _connected(frozenset(range(1, n_nodes + 1)), adjacency):
        raise DisconnectedParent("parent graph is not connected")

    cluster_edge_sets = []
    for k, block in enumerate(blocks, start=1):
        block_edges = frozenset(e for e in norm_edges if e[0] in block and e[1] in block)
        block_adj = {p: {q for q in adjacency[p] if _ordered(p, q) in block_edges} for p in block}
        if not _connected(block, block_adj):
            raise DisconnectedCluster(k)
        cluster_edge_sets.append(block_edges)

    inter_clusters = []
    label = 0
    for p_idx in range(len(blocks)):
        for q_idx in range(p_idx + 1, len(blocks)):
            bp, bq = blocks[p_idx], blocks[q_idx]
            cross = frozenset(
                e for e in norm_edges
                if (e[0] in bp and e[1] in bq) or (e[0] in bq and e[1] in bp)
            )
            if not cross:
                continue
            members = frozenset(v for e in cross for v in e)
            label += 1
            inter_clusters.append(
                InterCluster(index=label, clusters=(p_idx + 1, q_idx + 1), nodes=members, edges=cross)
            )

    # Edge-partition sanity: cluster plus inter-cluster edges tile E exactly.
    tiled: set[Edge] = set()
    for es in cluster_edge_sets:
        tiled.update(es)
    for ic in inter_clusters:
        assert not (tiled & ic.edges), "edge assigned to two sub-graphs"
        tiled.update(ic.edges)
    assert tiled == set(norm_edges), "sub-graph edges do not tile the parent edge set"

    return ClusteredNetwork(
        n_nodes=n_nodes,
        edges=norm_edges,
        partition=blocks,
        inter_clusters=tuple(inter_clusters),
    )


def network_from_dict(data: dict) -> ClusteredNetwork:
    return build_clustered_network(
        n_nodes=int(data["n_nodes"]),
        edges=data["edges"],
        partition=data["clusters"],
    )


def load_network(path) -> ClusteredNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


def random_clustered_network(
    n_nodes: int,
    n_clusters: int,
    extra_edge_prob: float,
    seed: int,
) -> ClusteredNetwork:
    """Seeded random clustered network with every invariant guaranteed.

    Construction: draw near-uniform cluster sizes, grow a random spanning
    tree inside each cluster (keeps every cluster sub-graph connected), join
    the clusters by a random cluster-level spanning tree (keeps the parent
    connected), then sprinkle extra edges with probability `extra_edge_prob`.
    Deterministic for a fixed seed.
    """
    if not 1 <= n_clusters <= n_nodes:
        raise InfeasibleRequest(f"cannot split {n_nodes} nodes into {n_clusters} clusters")
    if not 0.0 <= extra_edge_prob <= 1.0:
        raise NetworkError("extra_edge_prob must be a probability")

    rng = np.random.default_rng(seed)

    sizes = np.ones(n_clusters, dtype=int)
    for _ in range(n_nodes - n_clusters):
        sizes[rng.integers(n_clusters)] += 1
    perm = rng.permutation(n_nodes) + 1
    blocks = []
    pos = 0
    for s in sizes:
        blocks.append(sorted(perm[pos:pos + s].tolist()))
        pos += s

    edges: set[Edge] = set()
    for block in blocks:
        order = list(rng.permutation(block))
        for i in range(1, len(order)):
            j = int(rng.integers(i))
            edges.add(_norm_edge(int(order[i]), int(order[j])))

    cluster_order = list(rng.permutation(n_clusters))
    for i in range(1, n_clusters):
        j = int(rng.integers(i))
        a = int(rng.choice(blocks[cluster_order[i]]))
        b = int(rng.choice(blocks[cluster_order[j]]))
        edges.add(_norm_edge(a, b))

    if extra_edge_prob > 0.0:
        for p in range(1, n_nodes + 1):
            for q in range(p + 1, n_nodes + 1):
                if (p, q) not in edges and rng.random() < extra_edge_prob:
                    edges.add((p, q))

    return build_clustered_network(n_nodes, edges, blocks)
