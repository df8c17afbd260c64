import numpy as np
import pytest

from progseg import proposal
from progseg.proposal import WeightedGraph, fh_segment

trivial = pytest.mark.trivial


def _w(**kw):
    base = dict(lab_a=[50, 0, 0], lab_b=[50, 0, 0], n_a=[0, 0, 1], n_b=[0, 0, 1],
                has_a=True, has_b=True, obj_a=0.3, obj_b=0.3)
    base.update(kw)
    return float(sum(proposal.weight_components(**base)))


@trivial
def test_identical_centroids_weight_zero():
    assert _w() == 0.0


@trivial
def test_opposite_normals_weight_one():
    assert _w(n_b=[0, 0, -1]) == 1.0


@trivial
def test_objectness_extremes_weight_one():
    assert _w(obj_a=0.0, obj_b=1.0) == 1.0


def _groups(cliques):
    return sorted(sorted(m.tolist()) for m in cliques.members)


@trivial
def test_fh_chain_example():
    g = WeightedGraph([0, 1, 2], [[0, 1], [1, 2]], [0.1, 0.9])
    # after AB merge the threshold is min(0.1 + 1/2, 0 + 1/1) = 0.6 < 0.9
    assert _groups(fh_segment(g, k=1.0, min_size=1)) == [[0, 1], [2]]


@trivial
def test_fh_zero_weights_single_clique():
    g = WeightedGraph(np.arange(5), [[0, 1], [1, 2], [2, 3], [3, 4], [0, 4]], np.zeros(5))
    assert _groups(fh_segment(g, k=0.5, min_size=1)) == [[0, 1, 2, 3, 4]]


@trivial
def test_fh_tiny_k_keeps_singletons():
    g = WeightedGraph(np.arange(4), [[0, 1], [1, 2], [2, 3]], [0.1, 0.2, 0.3])
    assert _groups(fh_segment(g, k=1e-9, min_size=1)) == [[0], [1], [2], [3]]


def test_fh_empty_graph():
    c = fh_segment(WeightedGraph([], np.zeros((0, 2)), []))
    assert len(c) == 0


def test_fh_rejects_bad_graphs():
    with pytest.raises(ValueError):
        WeightedGraph([0, 1], [[0, 0]], [0.1])
    with pytest.raises(ValueError):
        WeightedGraph([0, 1], [[0, 1]], [-0.1])


def _naive_fh(n, edges, w, k, min_size):
    """Plain FH with explicit component lists."""
    comp = {i: {i} for i in range(n)}
    owner = list(range(n))
    internal = {i: 0.0 for i in range(n)}
    order = sorted(range(len(w)), key=lambda e: (w[e], min(edges[e]), max(edges[e])))
    for e in order:
        a, b = owner[edges[e][0]], owner[edges[e][1]]
        if a == b:
            continue
        if w[e] <= min(internal[a] + k / len(comp[a]), internal[b] + k / len(comp[b])):
            keep, gone = (a, b)
            comp[keep] |= comp.pop(gone)
            internal[keep] = max(internal[keep], internal.pop(gone), w[e])
            for x in comp[keep]:
                owner[x] = keep
    for e in order:
        a, b = owner[edges[e][0]], owner[edges[e][1]]
        if a != b and (len(comp[a]) < min_size or len(comp[b]) < min_size):
            comp[a] |= comp.pop(b)
            internal.pop(b)
            for x in comp[a]:
                owner[x] = a
    return sorted(sorted(c) for c in comp.values())


@pytest.mark.parametrize("seed", range(30))
def test_fh_matches_naive_oracle(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(2, 25))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if g.random() < 0.25]
    if not pairs:
        pairs = [(0, 1)]
    w = g.uniform(0, 1, len(pairs)).round(2)  # rounding forces ties
    k, ms = float(g.uniform(0.1, 2)), int(g.integers(1, 4))
    got = _groups(fh_segment(WeightedGraph(np.arange(n), pairs, w), k, ms))
    assert got == _naive_fh(n, pairs, list(w), k, ms)


def test_fh_partition_and_boundary_replay():
    g = np.random.default_rng(9)
    n = 40
    pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if g.random() < 0.15])
    w = g.uniform(0, 1, len(pairs))
    graph = WeightedGraph(np.arange(n), pairs, w)
    log = []
    cl = fh_segment(graph, k=0.3, min_size=1, merge_log=log)
    allm = np.concatenate(cl.members)
    assert np.array_equal(np.sort(allm), np.arange(n))
    # every merge was accepted at or below its threshold
    assert all(w[e] <= thr for e, thr in log)
    # replaying the merges, every rejected edge between final cliques exceeded MInt
    owner = cl.node_clique(np.arange(n))
    size, internal, parent = np.ones(n), np.zeros(n), np.arange(n)

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x
    merged = {e for e, _ in log}
    for e in np.lexsort((pairs[:, 1], pairs[:, 0], w)).tolist():
        a, b = find(pairs[e, 0]), find(pairs[e, 1])
        if a == b:
            continue
        mint = min(internal[a] + 0.3 / size[a], internal[b] + 0.3 / size[b])
        if e in merged:
            assert w[e] <= mint
            parent[b] = a
            size[a] += size[b]
            internal[a] = max(internal[a], internal[b], w[e])
        else:
            assert w[e] > mint
            assert owner[pairs[e, 0]] != owner[pairs[e, 1]]


@trivial
@pytest.mark.parametrize("obj, expect", [([1.0, 1.0, 1.0], 1), ([0.0, 0.0], 0), ([0.25, 0.75], 1)])
def test_flag_objectness(obj, expect):
    assert proposal.flag_objectness(np.arange(len(obj)), np.ones(len(obj)), np.array(obj)) == expect


def test_flag_objectness_requires_members():
    with pytest.raises(ValueError):
        proposal.flag_objectness([], [], [])


def test_clique_dump_round_trip(tmp_path):
    c = proposal.CliqueSet([np.array([1, 4]), np.array([2])], np.array([1, 0]))
    proposal.write_cliques(c, tmp_path / "c.txt")
    assert (tmp_path / "c.txt").read_text() == "0 1 1 4\n1 0 2\n"
    back = proposal.read_cliques(tmp_path / "c.txt")
    assert _groups(back) == [[1, 4], [2]]
    assert back.flags.tolist() == [1, 0]


def test_clique_adjacency_pairs():
    c = proposal.CliqueSet([np.array([0, 1]), np.array([2]), np.array([3])], np.zeros(3, int))
    e = proposal.clique_adjacency(c, [[0, 1], [1, 2], [0, 2], [2, 3]])
    assert e.tolist() == [[0, 1], [1, 2]]
