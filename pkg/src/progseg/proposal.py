"""Object proposals on the super-voxel graph.

Edges carry a combined colour, normal and objectness dissimilarity, and a
graph-based segmentation pass (FH) groups the nodes into cliques.
"""

from dataclasses import dataclass

import numpy as np

_MISSING_NORMAL = 0.5


@dataclass
class WeightedGraph:
    nodes: np.ndarray   # node ids, sorted
    edges: np.ndarray   # (m, 2) int64, a < b
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.edges.shape[0] != self.weights.shape[0]:
            raise ValueError("one weight per edge required")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        if np.any(self.weights < 0):
            raise ValueError("edge weights must be non-negative")


@dataclass
class CliqueSet:
    members: list        # list of int64 arrays of node ids
    flags: np.ndarray    # y_r per clique

    def __len__(self):
        return len(self.members)

    def node_clique(self, nodes):
        """Map each of `nodes` to its clique index (-1 if absent)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        out = np.full(nodes.size, -1, dtype=np.int64)
        if not self.members:
            return out
        ids = np.concatenate(self.members)
        cl = np.repeat(np.arange(len(self.members)), [m.size for m in self.members])
        order = np.argsort(ids)
        ids, cl = ids[order], cl[order]
        pos = np.clip(np.searchsorted(ids, nodes), 0, max(ids.size - 1, 0))
        hit = ids[pos] == nodes
        out[hit] = cl[pos[hit]]
        return out


def weight_components(lab_a, lab_b, n_a, n_b, has_a, has_b, obj_a, obj_b):
    """Colour, normal and objectness terms, each in [0, 1]."""
    w_col = np.minimum(np.linalg.norm(np.asarray(lab_a) - lab_b, axis=-1) / 100.0, 1.0)
    dot = np.sum(np.asarray(n_a) * n_b, axis=-1)
    w_nrm = np.clip((1.0 - dot) / 2.0, 0.0, 1.0)
    w_nrm = np.where(np.asarray(has_a) & has_b, w_nrm, _MISSING_NORMAL)
    w_obj = np.clip(np.abs(np.asarray(obj_a, float) - obj_b), 0.0, 1.0)
    return w_col, w_nrm, w_obj


def edge_weights(svs, edges, nodes=None):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if nodes is None:
        nodes = np.unique(edges)
    a, b = edges[:, 0], edges[:, 1]
    c = svs._c
    parts = weight_components(c["lab"][a], c["lab"][b], c["normal"][a], c["normal"][b],
                              c["has_normal"][a], c["has_normal"][b],
                              c["objectness"][a], c["objectness"][b])
    return WeightedGraph(np.unique(np.asarray(nodes, dtype=np.int64)), edges, sum(parts))


class _DisjointSet:
    def __init__(self, n):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n)

    def find(self, x):
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a, b, w):
        if self.size[a] < self.size[b] or (self.size[a] == self.size[b] and a > b):
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        return a


def _edge_order(graph, local):
    lo = np.minimum(graph.nodes[local[:, 0]], graph.nodes[local[:, 1]])
    hi = np.maximum(graph.nodes[local[:, 0]], graph.nodes[local[:, 1]])
    return np.lexsort((hi, lo, graph.weights))


def fh_segment(graph, k=0.5, min_size=3, merge_log=None):
    """Graph-based (FH) grouping of graph nodes into cliques.

    Edges are processed in (weight, min id, max id) order. If `merge_log` is a
    list, every accepted merge of the main pass is appended as
    (edge index, threshold) for replay checks.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    n = graph.nodes.size
    if n == 0:
        return CliqueSet([], np.zeros(0, dtype=np.int64))
    local = np.searchsorted(graph.nodes, graph.edges)
    if graph.edges.size and not np.array_equal(graph.nodes[np.minimum(local, n - 1)], graph.edges):
        raise ValueError("edge endpoint missing from node list")
    order = _edge_order(graph, local)
    ds = _DisjointSet(n)
    w_all = graph.weights
    for e in order.tolist():
        ra, rb = ds.find(local[e, 0]), ds.find(local[e, 1])
        if ra == rb:
            continue
        w = w_all[e]
        thr = min(ds.internal[ra] + k / ds.size[ra], ds.internal[rb] + k / ds.size[rb])
        if w <= thr:
            ds.union(ra, rb, w)
            if merge_log is not None:
                merge_log.append((e, thr))
    if min_size > 1:
        for e in order.tolist():
            ra, rb = ds.find(local[e, 0]), ds.find(local[e, 1])
            if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
                ds.union(ra, rb, w_all[e])
    roots = np.array([ds.find(i) for i in range(n)])
    # cliques numbered by their smallest member
    _, first, inv = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    cl = rank[inv]
    order_nodes = np.argsort(cl, kind="stable")
    bounds = np.cumsum(np.bincount(cl, minlength=first.size))[:-1]
    members = np.split(graph.nodes[order_nodes], bounds)
    return CliqueSet(members, np.zeros(len(members), dtype=np.int64))


def flag_objectness(members, sizes, objectness):
    """1 iff the size-weighted mean objectness of the members is at least 0.5."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("clique has no members")
    total = sizes.sum()
    mean = np.dot(sizes, objectness) / total if total > 0 else np.mean(objectness)
    return int(mean >= 0.5)


def flag_cliques(cliques, svs):
    c = svs._c
    cliques.flags = np.array(
        [flag_objectness(m, c["count"][m], c["objectness"][m]) for m in cliques.members],
        dtype=np.int64)
    return cliques


def clique_adjacency(cliques, edges):
    """Unique clique pairs (r < q) joined by at least one graph edge."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if not len(cliques) or edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ra = cliques.node_clique(edges[:, 0])
    rb = cliques.node_clique(edges[:, 1])
    ok = (ra >= 0) & (rb >= 0) & (ra != rb)
    pairs = np.stack([np.minimum(ra[ok], rb[ok]), np.maximum(ra[ok], rb[ok])], axis=1)
    return np.unique(pairs, axis=0) if pairs.size else np.zeros((0, 2), dtype=np.int64)


def propose(svs, edges, nodes, k=0.5, min_size=3):
    graph = edge_weights(svs, edges, nodes)
    return flag_cliques(fh_segment(graph, k, min_size), svs), graph


def write_cliques(cliques, path):
    with open(path, "w") as f:
        for r, (m, y) in enumerate(zip(cliques.members, cliques.flags)):
            f.write(f"{r} {int(y)} " + " ".join(str(int(x)) for x in m) + "\n")


def read_cliques(path):
    members, flags = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            flags.append(int(parts[1]))
            members.append(np.array([int(x) for x in parts[2:]], dtype=np.int64))
    return CliqueSet(members, np.array(flags, dtype=np.int64))
