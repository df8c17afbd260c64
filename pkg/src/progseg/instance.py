"""Online instance labels: a growing id registry, a CRF over visible ids and spawning.

Id 0 is the unknown instance. Only super-voxels seen in the current frame
take part, and their label space is the ids present on active voxels plus
unknown. Unknown components of one object category can become new ids.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import crf
from .voxel_map import best_label_update

UNKNOWN = 0


@dataclass
class InstanceInfo:
    category: int
    size: int = 0
    alive: bool = True


@dataclass
class InstanceRegistry:
    next_id: int = 1
    entries: dict = field(default_factory=lambda: {UNKNOWN: InstanceInfo(-1)})

    def __contains__(self, iid):
        return int(iid) in self.entries

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return np.array(sorted(self.entries), dtype=np.int64)

    def spawn(self, category, size):
        iid = self.next_id
        self.next_id += 1
        self.entries[iid] = InstanceInfo(int(category), int(size))
        return iid

    def category(self, iid):
        return self.entries[int(iid)].category

    def set_sizes(self, ids, sizes):
        for iid, s in zip(np.asarray(ids).tolist(), np.asarray(sizes).tolist()):
            if iid in self.entries and iid != UNKNOWN:
                self.entries[iid].size = int(s)

    def dump(self, path):
        with open(path, "w") as f:
            for iid in sorted(self.entries):
                e = self.entries[iid]
                f.write(f"{iid} {e.category} {e.size}\n")

    @classmethod
    def load(cls, path):
        reg = cls()
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                iid, cat, size = (int(x) for x in parts[:3])
                reg.entries[iid] = InstanceInfo(cat, size)
        reg.next_id = max(reg.entries) + 1
        return reg


def reduce_labels(registry, active, vmap):
    """Registry ids present on any active voxel, plus unknown, sorted."""
    present = np.unique(vmap.instance[np.asarray(active, dtype=np.int64)])
    keep = [int(i) for i in present.tolist() if i in registry]
    return np.unique(np.array([UNKNOWN] + keep, dtype=np.int64))


def instance_state(inst_hist, ids, node_category, registry, kernel=None, clique_of=None,
                   flags=None, clique_edges=None):
    """CRF over the reduced id space.

    A node may take unknown or an id of its own semantic category. Every id
    counts as object-compatible, so the objectness term adds the same cost
    to all of them and drops out; it would otherwise pull each unexplained
    object node onto whichever real id happens to be in view.
    """
    h = np.zeros((inst_hist.shape[0], ids.size))
    inside = ids < inst_hist.shape[1]
    h[:, inside] = inst_hist[:, ids[inside]]
    unary, _ = crf.build_unary(h, tau=1.0)
    cat = np.array([registry.category(i) for i in ids.tolist()])
    allowed = (ids[None, :] == UNKNOWN) | (cat[None, :] == np.asarray(node_category)[:, None])
    return crf.MeanFieldState(unary, kernel, clique_of, flags, clique_edges,
                              object_mask=np.ones(ids.size, dtype=bool), allowed=allowed)


def instance_infer(state, ids, weights, iterations=1):
    """Mean-field over instance ids with co-occurrence switched off.

    Returns (instance id per node, confidence per node).
    """
    if ids.size == 1:
        n = state.num_nodes
        return np.full(n, ids[0], dtype=np.int64), np.ones(n)
    lab, q = crf.infer(state, weights, iterations)
    return ids[lab], q[np.arange(lab.size), lab]


def spawn_unknown(labeling, categories, edges, registry, object_labels, min_spawn=5):
    """Turn the largest unknown same-category object component into a new instance.

    `labeling` and `categories` are per node; `edges` index nodes locally.
    Returns (new labeling, new id or None).
    """
    labeling = np.asarray(labeling, dtype=np.int64).copy()
    categories = np.asarray(categories, dtype=np.int64)
    n = labeling.size
    obj = np.isin(categories, np.array(sorted(object_labels), dtype=np.int64))
    eligible = (labeling == UNKNOWN) & obj
    if eligible.sum() < min_spawn:
        return labeling, None
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    ok = eligible[e[:, 0]] & eligible[e[:, 1]] & (categories[e[:, 0]] == categories[e[:, 1]])
    e = e[ok]
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    comp = np.where(eligible, comp, -1)
    sizes = np.bincount(comp[comp >= 0], minlength=n)
    best = int(np.argmax(sizes))  # ties: lowest component id, i.e. lowest node
    if sizes[best] < min_spawn:
        return labeling, None
    members = comp == best
    iid = registry.spawn(categories[members][0], int(members.sum()))
    labeling[members] = iid
    return labeling, iid


def fuse_instances(vmap, voxels, node_of_voxel, labeling, conf, stale=None):
    """Best-label update of voxel instance ids from per-node results.

    Unknown results are not fused: a region waiting for an id should not
    build up evidence against the instance it will later join. Voxels flagged
    `stale` hold an id their node can no longer take, and take unknown too.
    """
    voxels = np.asarray(voxels, dtype=np.int64)
    obs = labeling[node_of_voxel]
    p = conf[node_of_voxel]
    keep = obs != UNKNOWN
    if stale is not None:
        keep |= np.asarray(stale, dtype=bool)
    voxels, obs, p = voxels[keep], obs[keep], p[keep]
    inst = vmap.field("instance")
    iconf = vmap.field("instance_conf")
    inst[voxels], iconf[voxels] = best_label_update(inst[voxels], iconf[voxels], obs, p)
    return voxels


def stamp_instance(vmap, assignment, clusters, iid, conf):
    """Give every member voxel of `clusters` the instance `iid` outright.

    A spawned component's voxels carry accumulated unknown confidence that
    ordinary fusion would need many frames to overturn.
    """
    n = len(vmap)
    members = np.flatnonzero(np.isin(assignment[:n], clusters))
    vmap.field("instance")[members] = iid
    vmap.field("instance_conf")[members] = conf
    return members
