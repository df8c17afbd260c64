import numpy as np
import pytest

from progseg import supervoxel as sv
from conftest import block_map

trivial = pytest.mark.trivial


@trivial
def test_distance_zero_for_identical():
    p = sv.ClusterParams()
    assert sv.cluster_distance([1, 2, 3], [50, 1, 2], [1, 2, 3], [50, 1, 2], p) == 0.0


@trivial
def test_distance_normalised_unit_terms():
    p = sv.ClusterParams(alpha=1, beta=1, n_c=400.0, spacing=0.08)
    # D_c = n_c and D_s = n_s
    d = sv.cluster_distance([np.sqrt(p.n_s), 0, 0], [20.0, 0, 0], [0, 0, 0], [0, 0, 0], p)
    assert d == pytest.approx(np.sqrt(2), abs=1e-12)
    assert round(float(d), 5) == 1.41421


@trivial
def test_distance_worked_example():
    p = sv.ClusterParams(alpha=1, beta=1, n_c=1, n_s=1, spacing=1)
    d = sv.cluster_distance([0.3, 0, 0], [0.5, 0, 0], [0, 0, 0], [0, 0, 0], p)
    assert d == pytest.approx(np.sqrt(0.34), abs=1e-12)
    assert round(float(d), 5) == 0.58310


def _plane(n):
    r = np.arange(n)
    return np.stack(np.meshgrid(r, r, [0], indexing="ij"), -1).reshape(-1, 3)


@trivial
def test_seeds_on_plane_cover_every_cell():
    p = sv.ClusterParams(spacing=0.08)
    vmap, idx = block_map(_plane(20), voxel_size=0.008)
    svs = sv.SuperVoxelSet(p)
    new = sv.seed(svs, vmap, idx)
    # 20 voxels of 0.008 span two cells of 0.08 per axis
    cells = np.unique(np.floor(vmap.positions / p.spacing), axis=0)
    assert len(cells) == 4
    assert new.size >= 4


@trivial
def test_no_seeds_when_all_assigned():
    vmap, idx = block_map(_plane(6), voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=4.0))
    sv.seed(svs, vmap, idx)
    sv.assign_step(svs, vmap, idx)
    assert np.all(svs.assignment[idx] >= 0)
    assert sv.seed(svs, vmap, idx).size == 0


@trivial
def test_isolated_voxel_gets_one_seed():
    vmap, idx = block_map([[3, 4, 5]], voxel_size=0.5)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=2.0))
    new = sv.seed(svs, vmap, idx)
    assert new.size == 1
    assert np.array_equal(svs._c["pos"][new[0]], [1.5, 2.0, 2.5])


@trivial
def test_equidistant_voxel_goes_to_lower_id():
    vmap, idx = block_map([[0, 0, 0], [20, 0, 0], [10, 0, 0]], voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=10.0))
    ids = sv.seed(svs, vmap, idx[:2])
    assert ids.tolist() == [0, 1]
    best = sv.assign_step(svs, vmap, idx[2:])
    assert best.tolist() == [0]


@trivial
def test_colocated_voxel_takes_that_centroid():
    vmap, idx = block_map([[0, 0, 0], [6, 0, 0], [5, 0, 0]], voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=5.0))
    ids = sv.seed(svs, vmap, idx[:2])
    svs._c["pos"][ids[1]] = [5.0, 0.0, 0.0]
    assert sv.assign_step(svs, vmap, idx[2:]).tolist() == [ids[1]]


def test_kmeans_reaches_fixed_point():
    r = np.arange(10)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    vmap, idx = block_map(ijk, voxel_size=1.0)
    vmap.field("color")[idx] = np.random.default_rng(3).uniform(0, 255, (idx.size, 3))
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=4.0))
    prev = None
    for it in range(1, 21):
        sv.seed(svs, vmap, idx)
        sv.assign_step(svs, vmap, idx)
        sv.update_centroids(svs, vmap, idx)
        cur = svs.assignment[idx].copy()
        if prev is not None and np.array_equal(cur, prev):
            break
        prev = cur
    assert it <= 20 and np.array_equal(cur, prev)


@trivial
def test_centroid_is_member_mean():
    vmap, idx = block_map([[0, 0, 0], [0, 0, 1]], voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=10.0))
    sv.seed(svs, vmap, idx)
    sv.assign_step(svs, vmap, idx)
    sv.update_centroids(svs, vmap, idx)
    cid = svs.assignment[idx[0]]
    assert svs.assignment[idx[1]] == cid
    assert svs._c["pos"][cid][2] == 0.5


@trivial
def test_empty_cluster_removed():
    vmap, idx = block_map([[0, 0, 0], [0, 0, 1]], voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=10.0))
    sv.seed(svs, vmap, idx)
    sv.assign_step(svs, vmap, idx)
    sv.update_centroids(svs, vmap, idx)
    cid = int(svs.assignment[idx[0]])
    svs.assignment[idx] = -1
    sv.update_centroids(svs, vmap, idx)
    assert cid not in svs.live_ids().tolist()
    assert len(svs) == 0


@trivial
def test_label_hist_is_confidence_sum():
    r = np.arange(6)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    vmap, idx = block_map(ijk, voxel_size=1.0)
    g = np.random.default_rng(0)
    vmap.field("label")[idx] = g.integers(0, 4, idx.size)
    vmap.field("label_conf")[idx] = g.uniform(0, 3, idx.size)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=3.0), num_labels=4)
    sv.seed(svs, vmap, idx)
    sv.assign_step(svs, vmap, idx)
    sv.update_centroids(svs, vmap)
    for cid in svs.live_ids():
        m = svs.assignment[idx] == cid
        assert svs.label_hist[cid].sum() == pytest.approx(vmap.label_conf[idx][m].sum(), abs=1e-9)


def test_incremental_update_matches_rebuild():
    r = np.arange(8)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    vmap, idx = block_map(ijk, voxel_size=1.0)
    g = np.random.default_rng(5)
    vmap.field("color")[idx] = g.uniform(0, 255, (idx.size, 3))
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=3.0), num_labels=3)
    for step in range(4):
        sub = idx[g.random(idx.size) < 0.6]
        vmap.field("label")[sub] = g.integers(0, 3, sub.size)
        vmap.field("label_conf")[sub] = g.uniform(0, 2, sub.size)
        sv.seed(svs, vmap, sub)
        sv.assign_step(svs, vmap, sub)
        sv.update_centroids(svs, vmap, sub)
    inc = {k: svs._c[k][: svs.next_id].copy() for k in ("count", "pos", "label_hist")}
    sv.update_centroids(svs, vmap)
    for k, v in inc.items():
        assert np.allclose(v, svs._c[k][: svs.next_id], atol=1e-9), k


def _two_clusters(ijk, assignment):
    vmap, idx = block_map(ijk, voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=10.0))
    svs.sync(vmap)
    svs._grow_clusters(max(assignment) + 1)
    svs.next_id = max(assignment) + 1
    svs._c["alive"][: svs.next_id] = True
    svs._c["cell"][: svs.next_id] = -1
    svs.assignment[idx] = assignment
    sv.update_centroids(svs, vmap)
    return svs, vmap


@trivial
def test_face_sharing_clusters_one_edge():
    svs, vmap = _two_clusters([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [0, 1, 0, 1])
    assert sv.adjacency(svs, vmap).tolist() == [[0, 1]]


@trivial
def test_separated_clusters_no_edge():
    svs, vmap = _two_clusters([[0, 0, 0], [3, 0, 0]], [0, 1])
    assert sv.adjacency(svs, vmap).shape == (0, 2)


@trivial
def test_line_of_three_clusters_two_edges():
    svs, vmap = _two_clusters([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [0, 1, 2])
    e = sv.adjacency(svs, vmap)
    assert len(e) == 2
    assert e.tolist() == [[0, 1], [1, 2]]
    assert sv.adjacency(svs, vmap, np.arange(3)).tolist() == e.tolist()


def test_assignment_dump_restores_clusters(tmp_path):
    r = np.arange(6)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    vmap, idx = block_map(ijk, voxel_size=1.0)
    svs = sv.SuperVoxelSet(sv.ClusterParams(spacing=3.0))
    sv.seed(svs, vmap, idx)
    sv.assign_step(svs, vmap, idx)
    sv.update_centroids(svs, vmap, idx)
    sv.dump_assignments(svs, vmap, tmp_path / "c.bin")
    back = sv.restore(vmap, sv.load_assignments(tmp_path / "c.bin"), svs.params)
    assert np.array_equal(back.live_ids(), svs.live_ids())
    live = svs.live_ids()
    assert np.allclose(back._c["pos"][live], svs._c["pos"][live])
