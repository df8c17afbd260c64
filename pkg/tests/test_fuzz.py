"""Randomized invariant checks over the map, the mean-field step and FH."""

from collections import Counter

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from progseg import crf
from progseg import voxel_map as vm
from progseg.geometry import look_at
from progseg.proposal import WeightedGraph, fh_segment
from conftest import make_frame, small_intrinsics

NUM_LABELS = 6
OBJECTS = {3, 4, 5}


def _map_violations(vmap, idx):
    out = []
    t, w = vmap.tsdf[idx], vmap.weight[idx]
    if not np.all(np.isfinite(t)) or np.any(np.abs(t) > 1):
        out.append("tsdf outside [-1, 1]")
    if np.any(w < 0) or np.any(w > vmap.weight_cap):
        out.append("weight outside [0, cap]")
    o = vmap.objectness[idx]
    if np.any(o < 0) or np.any(o > 1):
        out.append("objectness outside [0, 1]")
    c = vmap.label_conf[idx]
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        out.append("negative label confidence")
    lab = vmap.label[idx]
    if np.any(lab < -1) or np.any(lab >= NUM_LABELS):
        out.append("label out of range")
    if np.any((lab < 0) & (c > 0)):
        out.append("confidence without a label")
    return out


def _random_frame(g, intr, index):
    eye = g.uniform([-1, -1, 0.2], [1, 1, 1.5])
    pose = look_at(eye, eye + g.normal(size=3))
    depth = g.uniform(0.2, 4.0, (intr.height, intr.width))
    depth[g.random(depth.shape) < 0.2] = 0.0
    if g.random() < 0.3:
        depth[:] = g.uniform(0.5, 2.0)
    label = g.integers(0, NUM_LABELS, depth.shape)
    prob = g.uniform(0, 1, depth.shape)
    return make_frame(depth, intr, pose, index=index, label=label, prob=prob)


def _map_ops(g, state):
    """Integrate, cull, fuse and update objectness for one random frame: four operations."""
    if state.get("vmap") is None or g.random() < 0.01:
        state["vmap"] = vm.VoxelMap(voxel_size=float(g.choice([0.02, 0.05, 0.1])), truncation=0.15,
                                    weight_cap=int(g.integers(1, 8)))
    vmap, intr = state["vmap"], state["intr"]
    fr = _random_frame(g, intr, state["frame"])
    state["frame"] += 1
    touched = vm.integrate_depth(vmap, fr)
    active = vm.frustum_active(vmap, fr.pose, intr, candidates=touched)
    vm.fuse_semantic(vmap, active, fr)
    vm.update_objectness(vmap, active, fr, OBJECTS)
    return _map_violations(vmap, np.arange(len(vmap))), 4


def _best_label_op(g, _):
    n = int(g.integers(1, 9))
    cur_l = g.integers(-1, NUM_LABELS, n)
    cur_c = np.where(cur_l < 0, 0.0, g.exponential(1.0, n))
    obs_l = g.integers(0, NUM_LABELS, n)
    obs_p = g.uniform(0, 1, n)
    lab, conf = vm.best_label_update(cur_l, cur_c, obs_l, obs_p)
    out = []
    if np.any((lab != cur_l) & (lab != obs_l)):
        out.append("fused label from nowhere")
    if not np.all(np.isfinite(conf)) or np.any(conf < 0):
        out.append("fused negative confidence")
    return out, 1


def random_state(g):
    n, nl = int(g.integers(1, 13)), int(g.integers(2, 6))
    hist = g.exponential(1.0, (n, nl)) * (g.random((n, nl)) < 0.6)
    if g.random() < 0.2:
        hist *= 1e3
    prev = g.dirichlet(np.ones(nl), n) if g.random() < 0.5 else None
    unary, _ = crf.build_unary(hist, prev, g.random(n) < 0.5, tau=float(g.uniform(0, 1)))
    pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if g.random() < 0.4],
                     dtype=np.int64).reshape(-1, 2)
    kernel = crf.kernel_matrix(n, pairs, g.uniform(0, 1, len(pairs)))
    nr = int(g.integers(0, 4))
    clique_of = g.integers(-1, nr, n) if nr else np.full(n, -1)
    edges = np.array([(a, b) for a in range(nr) for b in range(a + 1, nr) if g.random() < 0.5],
                     dtype=np.int64).reshape(-1, 2)
    allowed = None
    if g.random() < 0.3:
        allowed = g.random((n, nl)) < 0.5
        allowed[np.arange(n), g.integers(0, nl, n)] = True
    state = crf.MeanFieldState(unary, kernel, clique_of, g.integers(0, 2, nr), edges,
                               g.random(nl) < 0.5, crf.learn_cooccurrence(nl, counts=g.integers(0, 9, (nl, nl))),
                               allowed=allowed)
    w = crf.CrfWeights(1.0, *g.uniform(0, 3, 4), relation=str(g.choice(["coupled", "separable"])))
    return state, w


def _mean_field_op(g, _):
    state, w = random_state(g)
    steps = int(g.integers(1, 4))
    out = []
    for _ in range(steps):
        crf.mean_field_step(state, w)
        q = state.q
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            out.append("Q not a finite non-negative array")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
            out.append("Q row does not sum to one")
        if state.allowed is not None and np.any(q[~state.allowed] != 0):
            out.append("masked label has mass")
    return out, steps


def _fh_op(g, _):
    n = int(g.integers(1, 40))
    pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if g.random() < 4.0 / n],
                     dtype=np.int64).reshape(-1, 2)
    w = g.uniform(0, 1, len(pairs)).round(int(g.integers(1, 4)))
    ids = np.sort(g.choice(10 * n, n, replace=False))
    cl = fh_segment(WeightedGraph(ids, ids[pairs] if len(pairs) else pairs, w),
                    float(g.uniform(0.01, 3)), int(g.integers(1, 5)))
    allm = np.concatenate(cl.members) if len(cl) else np.zeros(0, np.int64)
    if not np.array_equal(np.sort(allm), ids) or any(len(m) == 0 for m in cl.members):
        return ["FH output is not a partition"], 1
    return [], 1


OPS = ((_map_ops, 0.05), (_best_label_op, 0.35), (_mean_field_op, 0.4), (_fh_op, 0.2))


def run_fuzz(n_ops, seed=0):
    """Run random operations until `n_ops` calls were made; returns (counts, violations)."""
    g = np.random.default_rng(seed)
    fns, p = zip(*OPS)
    p = np.array(p) / sum(p)
    state = {"intr": small_intrinsics(6, 5, 4.0, 0.1, 5.0), "frame": 0}
    counts, violations, done = Counter(), [], 0
    while done < n_ops:
        fn = fns[g.choice(len(fns), p=p)]
        bad, k = fn(g, state)
        counts[fn.__name__.strip("_")] += k
        done += k
        violations += [(done, v) for v in bad]
    return counts, violations


def test_short_fuzz_run():
    counts, violations = run_fuzz(3000, seed=7)
    assert violations == []
    assert set(counts) == {"map_ops", "best_label_op", "mean_field_op", "fh_op"}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.integers(1, 6))
def test_softmax_rows_sum_to_one(row, n):
    q = crf.softmax(np.tile(row, (n, 1)))
    assert np.all(np.abs(q.sum(axis=1) - 1) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(-1, 5), st.floats(0, 100), st.integers(0, 5), st.floats(0, 1))
def test_best_label_keeps_confidence_non_negative(cl, cc, ol, op):
    cc = 0.0 if cl < 0 else cc
    lab, conf = vm.best_label_update(np.array([cl]), np.array([cc]), np.array([ol]), np.array([op]))
    assert lab[0] in (cl, ol) and conf[0] >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.floats(0, 1)), max_size=30),
       st.floats(0.01, 5), st.integers(1, 4))
def test_fh_always_partitions(edges, k, min_size):
    edges = [(a, b, w) for a, b, w in edges if a != b]
    pairs = np.array([(a, b) for a, b, _ in edges], dtype=np.int64).reshape(-1, 2)
    w = np.array([x for _, _, x in edges])
    cl = fh_segment(WeightedGraph(np.arange(10), pairs, w), k, min_size)
    assert np.array_equal(np.sort(np.concatenate(cl.members)), np.arange(10))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.01, 2), st.floats(0.01, 2))
def test_kernel_in_unit_interval(v, ta, tb):
    w = crf.CrfWeights(theta_alpha=ta, theta_beta=tb)
    k = crf.pairwise_kernel(np.array([v[:3]]), np.array([v[3:]]), np.zeros((1, 3)), np.zeros((1, 3)), w)
    assert 0 <= k[0] <= 1
