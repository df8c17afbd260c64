"""Progressive super-voxel clustering: one local k-means iteration per frame.

Cluster statistics are kept as running sums. Each assigned voxel remembers
the contribution it last added to its cluster, so a frame only has to
revisit the voxels it touched instead of every member of every cluster.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.color import rgb2lab

from .hashing import pack_keys, unpack_keys
from .voxel_map import voxel_normals

_DUMP_MAGIC = b"PSVXCID\0"
_DUMP_VERSION = 1

_NEIGHBOR_OFFSETS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64)


@dataclass(frozen=True)
class ClusterParams:
    alpha: float = 1.0
    beta: float = 1.0
    n_c: float = 400.0
    n_s: float = None
    spacing: float = 0.08

    def __post_init__(self):
        if self.n_s is None:
            object.__setattr__(self, "n_s", self.spacing ** 2)
        if min(self.alpha, self.beta, self.n_c, self.n_s, self.spacing) <= 0:
            raise ValueError("cluster parameters must be strictly positive")


@dataclass
class SuperVoxel:
    id: int
    centroid_pos: np.ndarray
    centroid_color: np.ndarray
    centroid_normal: np.ndarray
    members: np.ndarray
    label_hist: np.ndarray
    mean_objectness: float


def voxel_lab(vmap, idx):
    rgb = np.clip(vmap.color[idx] / 255.0, 0.0, 1.0)
    if rgb.shape[0] == 0:
        return np.zeros((0, 3))
    return rgb2lab(rgb)


def cluster_distance(pos, lab, centroid_pos, centroid_lab, params):
    """sqrt(alpha*Dc/n_c + beta*Ds/n_s) with squared Lab and squared spatial distances."""
    dc = np.sum((np.asarray(lab, float) - centroid_lab) ** 2, axis=-1)
    ds = np.sum((np.asarray(pos, float) - centroid_pos) ** 2, axis=-1)
    return np.sqrt(params.alpha * dc / params.n_c + params.beta * ds / params.n_s)


class SuperVoxelSet:
    def __init__(self, params=None, num_labels=1):
        self.params = params or ClusterParams()
        self.num_labels = int(num_labels)
        self.next_id = 0
        self._ccap = 0
        self._c = {}
        self._grow_clusters(256)
        self._vcap = 0
        self._v = {}
        self._grow_voxels(1024)
        self.grid = {}
        self._fresh = []
        self.stats = {"distance_evals": 0, "seed_checks": 0}

    # storage -------------------------------------------------------------
    _CLUSTER_FIELDS = {
        "alive": (bool, None), "count": (np.int64, None),
        "sum_pos": (np.float64, 3), "sum_lab": (np.float64, 3),
        "sum_normal": (np.float64, 3), "normal_count": (np.int64, None),
        "sum_obj": (np.float64, None),
        "pos": (np.float64, 3), "lab": (np.float64, 3), "normal": (np.float64, 3),
        "has_normal": (bool, None), "objectness": (np.float64, None),
        "cell": (np.int64, None),
    }
    _VOXEL_FIELDS = {
        "assignment": (np.int64, None), "contrib_cid": (np.int64, None),
        "c_lab": (np.float64, 3), "c_normal": (np.float64, 3), "c_has_normal": (bool, None),
        "c_obj": (np.float64, None), "c_label": (np.int64, None), "c_conf": (np.float64, None),
        "c_inst": (np.int64, None), "c_iconf": (np.float64, None),
    }

    def _grow_clusters(self, n):
        if n <= self._ccap:
            return
        cap = max(n, 2 * self._ccap)
        for name, (dtype, width) in self._CLUSTER_FIELDS.items():
            arr = np.zeros((cap, width) if width else cap, dtype=dtype)
            if name in self._c:
                arr[: self._ccap] = self._c[name]
            self._c[name] = arr
        hist = np.zeros((cap, self.num_labels))
        ihist = np.zeros((cap, self._c["inst_hist"].shape[1] if "inst_hist" in self._c else 1))
        if "label_hist" in self._c:
            hist[: self._ccap] = self._c["label_hist"]
            ihist[: self._ccap] = self._c["inst_hist"]
        self._c["label_hist"], self._c["inst_hist"] = hist, ihist
        self._ccap = cap

    def _grow_voxels(self, n):
        if n <= self._vcap:
            return
        cap = max(n, 2 * self._vcap)
        for name, (dtype, width) in self._VOXEL_FIELDS.items():
            arr = np.zeros((cap, width) if width else cap, dtype=dtype)
            if name in self._v:
                arr[: self._vcap] = self._v[name]
            else:
                if name in ("assignment", "contrib_cid", "c_label"):
                    arr[:] = -1
            if name in ("assignment", "contrib_cid", "c_label") and name in self._v:
                arr[self._vcap :] = -1
            self._v[name] = arr
        self._vcap = cap

    def _ensure_instances(self, max_id):
        ih = self._c["inst_hist"]
        if max_id < ih.shape[1]:
            return
        wider = np.zeros((ih.shape[0], max_id + 1))
        wider[:, : ih.shape[1]] = ih
        self._c["inst_hist"] = wider

    def sync(self, vmap):
        self._grow_voxels(len(vmap))

    def __getattr__(self, name):
        c = self.__dict__.get("_c")
        if c is not None and name in c:
            return c[name][: self.next_id]
        raise AttributeError(name)

    @property
    def assignment(self):
        return self._v["assignment"]

    def live_ids(self):
        return np.flatnonzero(self.alive)

    def __len__(self):
        return int(self.alive.sum())

    def get(self, cid, vmap=None):
        """Materialise one cluster; member lookup scans all voxels."""
        members = np.flatnonzero(self._v["assignment"][: self._vcap] == cid)
        c = self._c
        return SuperVoxel(
            int(cid), c["pos"][cid].copy(), c["lab"][cid].copy(),
            c["normal"][cid].copy() if c["has_normal"][cid] else None,
            members, c["label_hist"][cid].copy(), float(c["objectness"][cid]))

    # spatial index of centroids -----------------------------------------
    def _cells(self, pos):
        return np.floor(np.asarray(pos) / self.params.spacing).astype(np.int64)

    def _grid_set(self, cids, new_cells):
        cell_of = self._c["cell"]
        grid = self.grid
        for cid, cell in zip(cids.tolist(), new_cells.tolist()):
            old = int(cell_of[cid])
            if old == cell:
                continue
            if old >= 0:
                bucket = grid[old]
                bucket.remove(cid)
                if not bucket:
                    del grid[old]
            grid.setdefault(cell, []).append(cid)
            cell_of[cid] = cell

    def _grid_remove(self, cids):
        cell_of = self._c["cell"]
        for cid in cids.tolist():
            old = int(cell_of[cid])
            if old >= 0:
                bucket = self.grid[old]
                bucket.remove(cid)
                if not bucket:
                    del self.grid[old]
            cell_of[cid] = -1

    def centroids_near(self, pos, reach):
        """Live cluster ids whose centroid cell lies within `reach` cells of any point."""
        if len(pos) == 0 or not self.grid:
            return np.zeros(0, dtype=np.int64)
        cells = np.unique(pack_keys(self._cells(pos)))
        r = np.arange(-reach, reach + 1)
        offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        base = unpack_keys(cells)
        nb = np.unique(pack_keys((base[:, None, :] + offs[None, :, :]).reshape(-1, 3)))
        found = []
        grid = self.grid
        for key in nb.tolist():
            bucket = grid.get(key)
            if bucket:
                found.extend(bucket)
        return np.unique(np.asarray(found, dtype=np.int64))

    # cluster creation ----------------------------------------------------
    def _new_clusters(self, pos, lab, normal, has_normal, obj):
        n = pos.shape[0]
        ids = np.arange(self.next_id, self.next_id + n)
        self._grow_clusters(self.next_id + n)
        self.next_id += n
        c = self._c
        c["alive"][ids] = True
        c["count"][ids] = 0
        c["pos"][ids] = pos
        c["lab"][ids] = lab
        c["normal"][ids] = normal
        c["has_normal"][ids] = has_normal
        c["objectness"][ids] = obj
        c["cell"][ids] = -1
        c["label_hist"][ids] = 0.0
        c["inst_hist"][ids] = 0.0
        for name in ("sum_pos", "sum_lab", "sum_normal", "normal_count", "sum_obj"):
            c[name][ids] = 0
        packed = pack_keys(self._cells(pos)).astype(np.int64)
        self._grid_set(ids, packed)
        self._fresh.extend(ids.tolist())
        return ids


def seed(svs, vmap, active):
    """Create clusters on active voxels that are unassigned and far from every centroid."""
    svs.sync(vmap)
    active = np.asarray(active, dtype=np.int64)
    s = svs.params.spacing
    cand = active[svs.assignment[active] < 0]
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    pos = vmap.ijk[cand] * vmap.voxel_size
    near_ids = svs.centroids_near(pos, 1)
    if near_ids.size:
        tree = cKDTree(svs._c["pos"][near_ids])
        d, _ = tree.query(pos, k=1, distance_upper_bound=s)
        svs.stats["seed_checks"] += int(cand.size)
        keep = ~(d <= s)
        cand, pos = cand[keep], pos[keep]
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    cells = svs._cells(pos)
    centre = (cells + 0.5) * s
    dist = np.sum((pos - centre) ** 2, axis=1)
    packed = pack_keys(cells)
    order = np.lexsort((cand, dist, packed))
    _, first = np.unique(packed[order], return_index=True)
    pick = np.sort(order[first])
    chosen = cand[pick]
    normal, has_n = voxel_normals(vmap, chosen)
    return svs._new_clusters(pos[pick], voxel_lab(vmap, chosen), normal, has_n,
                             vmap.objectness[chosen])


def assign_step(svs, vmap, active):
    """Assign every active voxel to its nearest centroid within 2S (ties go to the lowest id)."""
    svs.sync(vmap)
    active = np.asarray(active, dtype=np.int64)
    p = svs.params
    if active.size == 0:
        return active
    pos = vmap.ijk[active] * vmap.voxel_size
    lab = voxel_lab(vmap, active)
    cand = svs.centroids_near(pos, 2)
    best = np.full(active.size, -1, dtype=np.int64)
    if cand.size:
        c_pos = svs._c["pos"][cand]
        pairs = cKDTree(pos).sparse_distance_matrix(
            cKDTree(c_pos), 2 * p.spacing, output_type="ndarray")
        vi = pairs["i"].astype(np.int64)
        ci = pairs["j"].astype(np.int64)
        svs.stats["distance_evals"] += int(vi.size)
        if vi.size:
            cid = cand[ci]
            d2 = p.alpha * np.sum((lab[vi] - svs._c["lab"][cid]) ** 2, axis=1) / p.n_c
            d2 += p.beta * pairs["v"] ** 2 / p.n_s
            # group by voxel, take the smallest distance, break ties on lowest id
            order = np.argsort(vi, kind="stable")
            vi, cid, d2 = vi[order], cid[order], d2[order]
            starts = np.flatnonzero(np.r_[True, vi[1:] != vi[:-1]])
            grp = np.cumsum(np.r_[True, vi[1:] != vi[:-1]]) - 1
            dmin = np.minimum.reduceat(d2, starts)
            pick = np.where(d2 == dmin[grp], cid, np.iinfo(np.int64).max)
            best[vi[starts]] = np.minimum.reduceat(pick, starts)
    svs._v["assignment"][active] = best
    return best


def _voxel_contributions(svs, vmap, idx):
    """Current per-voxel values that feed cluster sums."""
    normal, has_n = voxel_normals(vmap, idx)
    return {
        "c_lab": voxel_lab(vmap, idx),
        "c_normal": normal,
        "c_has_normal": has_n,
        "c_obj": vmap.objectness[idx].astype(np.float64),
        "c_label": vmap.label[idx].astype(np.int64),
        "c_conf": vmap.label_conf[idx].astype(np.float64),
        "c_inst": vmap.instance[idx].astype(np.int64),
        "c_iconf": vmap.instance_conf[idx].astype(np.float64),
    }


def _accumulate(svs, vmap, idx, cids, contrib, sign):
    c = svs._c
    pos = vmap.ijk[idx] * vmap.voxel_size
    np.add.at(c["count"], cids, sign)
    np.add.at(c["sum_pos"], cids, sign * pos)
    np.add.at(c["sum_lab"], cids, sign * contrib["c_lab"])
    hn = contrib["c_has_normal"]
    np.add.at(c["sum_normal"], cids[hn], sign * contrib["c_normal"][hn])
    np.add.at(c["normal_count"], cids[hn], sign)
    np.add.at(c["sum_obj"], cids, sign * contrib["c_obj"])
    lab = contrib["c_label"]
    has = lab >= 0
    np.add.at(c["label_hist"], (cids[has], lab[has]), sign * contrib["c_conf"][has])
    inst = contrib["c_inst"]
    if inst.size:
        svs._ensure_instances(int(inst.max()))
        np.add.at(svs._c["inst_hist"], (cids, inst), sign * contrib["c_iconf"])


def update_centroids(svs, vmap, dirty=None):
    """Refresh cluster statistics from members; drop clusters left empty.

    With ``dirty=None`` every cluster is rebuilt from scratch. Otherwise only
    the contributions of the listed voxels are replaced, which is exact as
    long as every voxel whose fields or assignment changed is listed.
    """
    svs.sync(vmap)
    v = svs._v
    c = svs._c
    n = len(vmap)
    full = dirty is None
    if full:
        for name in ("count", "sum_pos", "sum_lab", "sum_normal", "normal_count", "sum_obj",
                     "label_hist", "inst_hist"):
            c[name][:] = 0
        v["contrib_cid"][:n] = -1
        dirty = np.flatnonzero(v["assignment"][:n] >= 0)
    dirty = np.unique(np.asarray(dirty, dtype=np.int64))
    old = v["contrib_cid"][dirty]
    had = old >= 0
    if had.any():
        d_old = dirty[had]
        prev = {k: v[k][d_old] for k in _voxel_contrib_keys}
        _accumulate(svs, vmap, d_old, old[had], prev, -1)
    new = v["assignment"][dirty]
    has = new >= 0
    d_new = dirty[has]
    if d_new.size:
        contrib = _voxel_contributions(svs, vmap, d_new)
        for k, val in contrib.items():
            v[k][d_new] = val
        _accumulate(svs, vmap, d_new, new[has], contrib, 1)
    v["contrib_cid"][dirty] = new
    affected = np.unique(np.concatenate([old[had], new[has], np.asarray(svs._fresh, dtype=np.int64)]))
    svs._fresh = []
    if full:
        affected = svs.live_ids()
    _refresh_clusters(svs, affected)
    return affected


_voxel_contrib_keys = ("c_lab", "c_normal", "c_has_normal", "c_obj", "c_label", "c_conf",
                       "c_inst", "c_iconf")


def _refresh_clusters(svs, cids):
    c = svs._c
    cids = cids[c["alive"][cids]]
    if cids.size == 0:
        return
    cnt = c["count"][cids]
    empty = cids[cnt <= 0]
    if empty.size:
        c["alive"][empty] = False
        for name in ("count", "sum_pos", "sum_lab", "sum_normal", "normal_count", "sum_obj",
                     "label_hist", "inst_hist"):
            c[name][empty] = 0
        svs._grid_remove(empty)
    live = cids[cnt > 0]
    if live.size == 0:
        return
    k = c["count"][live][:, None].astype(np.float64)
    c["pos"][live] = c["sum_pos"][live] / k
    c["lab"][live] = c["sum_lab"][live] / k
    c["objectness"][live] = c["sum_obj"][live] / k[:, 0]
    sn = c["sum_normal"][live]
    norm = np.linalg.norm(sn, axis=1)
    ok = (c["normal_count"][live] > 0) & (norm > 1e-12)
    c["has_normal"][live] = ok
    c["normal"][live] = np.where(ok[:, None], sn / np.where(norm > 0, norm, 1)[:, None], 0.0)
    svs._grid_set(live, pack_keys(svs._cells(c["pos"][live])).astype(np.int64))


def adjacency(svs, vmap, voxels=None):
    """Cluster pairs (a < b) with face-adjacent member voxels, sorted."""
    svs.sync(vmap)
    n = len(vmap)
    assign = svs._v["assignment"][:n]
    idx = np.flatnonzero(assign >= 0) if voxels is None else np.asarray(voxels, dtype=np.int64)
    idx = idx[assign[idx] >= 0]
    if idx.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ijk = vmap.ijk[idx].astype(np.int64)
    a = assign[idx]
    edges = []
    offsets = _NEIGHBOR_OFFSETS if voxels is not None else _NEIGHBOR_OFFSETS[::2]
    for off in offsets:
        nb = vmap.lookup(ijk + off)
        ok = nb >= 0
        b = np.where(ok, assign[np.where(ok, nb, 0)], -1)
        ok &= (b >= 0) & (b != a)
        if ok.any():
            e = np.stack([np.minimum(a[ok], b[ok]), np.maximum(a[ok], b[ok])], axis=1)
            edges.append(e)
    if not edges:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(edges), axis=0)


def window_nodes(svs, active):
    """Live clusters owning at least one of the given voxels."""
    a = svs._v["assignment"][np.asarray(active, dtype=np.int64)]
    ids = np.unique(a[a >= 0])
    return ids[svs._c["alive"][ids]]


def dump_assignments(svs, vmap, path):
    n = len(vmap)
    svs.sync(vmap)
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC + struct.pack("<IQ", _DUMP_VERSION, n))
        f.write(svs._v["assignment"][:n].astype("<i8").tobytes())


def load_assignments(path):
    with open(path, "rb") as f:
        if f.read(len(_DUMP_MAGIC)) != _DUMP_MAGIC:
            raise ValueError(f"{path}: not a cluster assignment dump")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != _DUMP_VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        return np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)


def restore(vmap, assignment, params=None, num_labels=1):
    """Rebuild a cluster set from a voxel map and per-voxel cluster ids."""
    svs = SuperVoxelSet(params, num_labels)
    svs.sync(vmap)
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.size != len(vmap):
        raise ValueError("assignment length does not match voxel count")
    ids = np.unique(assignment[assignment >= 0])
    if ids.size:
        svs._grow_clusters(int(ids.max()) + 1)
        svs.next_id = int(ids.max()) + 1
        svs._c["alive"][ids] = True
        svs._c["cell"][: svs.next_id] = -1
    svs._v["assignment"][: assignment.size] = assignment
    update_centroids(svs, vmap)
    return svs
