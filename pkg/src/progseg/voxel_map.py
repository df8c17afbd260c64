"""Sparse hashed TSDF voxel map with per-voxel semantic, objectness and instance state."""

import struct

import numpy as np

from .frame_io import SURFACE_DTYPE
from .geometry import world_to_camera
from .hashing import KeyTable, pack_keys, unpack_keys

NO_LABEL = -1
SURFACE_BAND = 0.5
EXTRACT_BAND = 0.25

_FIELDS = {
    "ijk": (np.int32, 3),
    "tsdf": (np.float64, None),
    "weight": (np.int32, None),
    "color": (np.float64, 3),
    "label": (np.int32, None),
    "label_conf": (np.float64, None),
    "objectness": (np.float64, None),
    "instance": (np.int32, None),
    "instance_conf": (np.float64, None),
    "gt_label": (np.int32, None),
    "gt_instance": (np.int32, None),
}

_SNAPSHOT_MAGIC = b"PSVXMAP\0"
_SNAPSHOT_VERSION = 1
_SNAPSHOT_DTYPE = np.dtype(
    [
        ("i", "<i4"), ("j", "<i4"), ("k", "<i4"),
        ("tsdf", "<f8"), ("weight", "<i4"),
        ("r", "<f8"), ("g", "<f8"), ("b", "<f8"),
        ("label", "<i4"), ("label_conf", "<f8"),
        ("objectness", "<f8"),
        ("instance", "<i4"), ("instance_conf", "<f8"),
        ("gt_label", "<i4"), ("gt_instance", "<i4"),
    ]
)


class VoxelMap:
    """Voxel storage in parallel arrays indexed by a dense voxel index.

    Voxel indices are stable for the lifetime of the map (voxels are never
    freed), so other modules key their per-voxel state on them.
    """

    def __init__(self, voxel_size=0.008, truncation=0.04, weight_cap=255,
                 init_objectness=0.5, objectness_step=0.1):
        if voxel_size <= 0 or truncation <= 0 or weight_cap < 1:
            raise ValueError("voxel_size, truncation and weight_cap must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.weight_cap = int(weight_cap)
        self.init_objectness = float(init_objectness)
        self.objectness_step = float(objectness_step)
        self.table = KeyTable(1024)
        self._cap = 0
        self._data = {}
        self._reserve(1024)

    def __len__(self):
        return self.table.size

    def _reserve(self, n):
        if n <= self._cap:
            return
        cap = max(n, 2 * self._cap)
        for name, (dtype, width) in _FIELDS.items():
            shape = (cap, width) if width else (cap,)
            arr = np.zeros(shape, dtype=dtype)
            if name in self._data:
                arr[: self._cap] = self._data[name][: self._cap]
            self._data[name] = arr
        self._cap = cap

    def __getattr__(self, name):
        data = self.__dict__.get("_data")
        if data is not None and name in data:
            return data[name][: self.table.size]
        raise AttributeError(name)

    @property
    def positions(self):
        return self.ijk.astype(np.float64) * self.voxel_size

    def lookup(self, ijk):
        return self.table.lookup(pack_keys(ijk))

    def allocate(self, ijk):
        """Index of each key, creating fresh voxels for unseen keys."""
        idx, created = self.table.insert(pack_keys(ijk))
        n = self.table.size
        self._reserve(n)
        new = idx[created]
        if new.size:
            d = self._data
            d["ijk"][new] = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)[created]
            d["tsdf"][new] = 1.0
            d["weight"][new] = 0
            d["color"][new] = 0.0
            d["label"][new] = NO_LABEL
            d["label_conf"][new] = 0.0
            d["objectness"][new] = self.init_objectness
            d["instance"][new] = 0
            d["instance_conf"][new] = 0.0
            d["gt_label"][new] = NO_LABEL
            d["gt_instance"][new] = NO_LABEL
        return idx

    def field(self, name):
        """Writable view of a per-voxel field."""
        return self._data[name][: self.table.size]

    def snapshot(self, path):
        n = len(self)
        rec = np.zeros(n, dtype=_SNAPSHOT_DTYPE)
        ijk = self.ijk
        rec["i"], rec["j"], rec["k"] = ijk[:, 0], ijk[:, 1], ijk[:, 2]
        for name in ("tsdf", "weight", "label", "label_conf", "objectness",
                     "instance", "instance_conf", "gt_label", "gt_instance"):
            rec[name] = getattr(self, name)
        col = self.color
        rec["r"], rec["g"], rec["b"] = col[:, 0], col[:, 1], col[:, 2]
        header = _SNAPSHOT_MAGIC + struct.pack(
            "<IdddidQ", _SNAPSHOT_VERSION, self.voxel_size, self.truncation,
            self.init_objectness, self.weight_cap, self.objectness_step, n)
        with open(path, "wb") as f:
            f.write(header)
            f.write(rec.tobytes())

    @classmethod
    def load_snapshot(cls, path):
        with open(path, "rb") as f:
            magic = f.read(len(_SNAPSHOT_MAGIC))
            if magic != _SNAPSHOT_MAGIC:
                raise ValueError(f"{path}: not a voxel map snapshot")
            hdr = struct.calcsize("<IdddidQ")
            version, vs, trunc, init_obj, cap, step, n = struct.unpack("<IdddidQ", f.read(hdr))
            if version != _SNAPSHOT_VERSION:
                raise ValueError(f"{path}: unsupported snapshot version {version}")
            rec = np.frombuffer(f.read(), dtype=_SNAPSHOT_DTYPE, count=n)
        vmap = cls(vs, trunc, cap, init_obj, step)
        ijk = np.stack([rec["i"], rec["j"], rec["k"]], axis=1)
        vmap.allocate(ijk)
        for name in ("tsdf", "weight", "label", "label_conf", "objectness",
                     "instance", "instance_conf", "gt_label", "gt_instance"):
            vmap.field(name)[:] = rec[name]
        vmap.field("color")[:] = np.stack([rec["r"], rec["g"], rec["b"]], axis=1)
        return vmap


def integrate_depth(vmap, frame):
    """Projective TSDF integration of one depth frame; returns touched voxel indices."""
    intr = frame.intrinsics
    depth = frame.depth
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
    valid = (depth > 0) & (depth >= intr.near) & (depth <= intr.far)
    if not valid.any():
        return np.zeros(0, dtype=np.int64)
    t = vmap.truncation
    vs = vmap.voxel_size
    rays = intr.pixel_rays()[valid]
    d = depth[valid]
    steps = np.arange(-t, t + 1e-12, vs / 2)
    z = d[:, None] + steps[None, :]
    pts = rays[:, None, :] * z[:, :, None]
    pts = pts[z > 0]
    pose = frame.pose
    world = pts @ pose[:3, :3].T + pose[:3, 3]
    ijk = unpack_keys(np.unique(pack_keys(np.rint(world / vs))))

    # projective sdf at voxel centres
    cam = world_to_camera(pose, ijk * vs)
    u, v, zc = intr.project(cam)
    ok = intr.in_image(u, v) & (zc >= intr.near) & (zc <= intr.far)
    u, v, zc, ijk = u[ok], v[ok], zc[ok], ijk[ok]
    meas = depth[v, u]
    sdf = meas - zc
    ok = (meas > 0) & (sdf >= -t)
    ijk, sdf = ijk[ok], sdf[ok]
    u, v = u[ok], v[ok]
    if ijk.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)

    idx = vmap.allocate(ijk)
    tsdf = vmap.field("tsdf")
    weight = vmap.field("weight")
    color = vmap.field("color")
    w = weight[idx].astype(np.float64)
    obs = np.clip(sdf / t, -1.0, 1.0)
    tsdf[idx] = (w * tsdf[idx] + obs) / (w + 1)
    color[idx] = (w[:, None] * color[idx] + frame.color[v, u].astype(np.float64)) / (w[:, None] + 1)
    weight[idx] = np.minimum(weight[idx] + 1, vmap.weight_cap)
    return idx


def visible_pixels(vmap, idx, frame):
    """Pixels that observe the given voxels: returns (mask, u, v) over idx.

    A voxel is visible when its centre projects into the image onto a valid
    depth pixel whose measurement lies within the truncation band of the
    voxel, which rejects occluded voxels.
    """
    intr = frame.intrinsics
    cam = world_to_camera(frame.pose, vmap.ijk[idx] * vmap.voxel_size)
    u, v, z = intr.project(cam)
    ok = intr.in_image(u, v) & (z > 0)
    uu, vv = np.where(ok, u, 0), np.where(ok, v, 0)
    meas = frame.depth[vv, uu]
    ok &= (meas > 0) & (np.abs(meas - z) <= vmap.truncation)
    return ok, uu, vv


def best_label_update(cur_label, cur_conf, obs_label, obs_prob):
    """Best-label fusion: reinforce on agreement, decrement and swap otherwise."""
    agree = cur_label == obs_label
    conf = np.where(agree, cur_conf + obs_prob, cur_conf - obs_prob)
    swap = conf < 0
    label = np.where(swap, obs_label, cur_label)
    conf = np.where(swap, -conf, conf)
    return label, conf


def fuse_semantic(vmap, active, frame):
    if frame.prediction_label is None:
        raise ValueError(f"frame {frame.index} carries no prediction")
    active = np.asarray(active, dtype=np.int64)
    ok, u, v = visible_pixels(vmap, active, frame)
    prob = frame.prediction_prob[v, u]
    ok &= prob > 0
    idx = active[ok]
    lab = frame.prediction_label[v[ok], u[ok]].astype(np.int32)
    p = prob[ok].astype(np.float64)
    label = vmap.field("label")
    conf = vmap.field("label_conf")
    label[idx], conf[idx] = best_label_update(label[idx], conf[idx], lab, p)
    return idx


def update_objectness(vmap, active, frame, object_labels):
    if frame.prediction_label is None:
        raise ValueError(f"frame {frame.index} carries no prediction")
    active = np.asarray(active, dtype=np.int64)
    ok, u, v = visible_pixels(vmap, active, frame)
    ok &= frame.prediction_prob[v, u] > 0
    idx = active[ok]
    lab = frame.prediction_label[v[ok], u[ok]]
    is_obj = np.isin(lab, np.asarray(sorted(object_labels), dtype=np.int64))
    step = np.where(is_obj, vmap.objectness_step, -vmap.objectness_step)
    obj = vmap.field("objectness")
    obj[idx] = np.clip(obj[idx] + step, 0.0, 1.0)
    return idx


def record_ground_truth(vmap, active, frame):
    """Copy ground-truth labels (and instances, if present) onto visible voxels."""
    if frame.gt_labels is None:
        return np.zeros(0, dtype=np.int64)
    active = np.asarray(active, dtype=np.int64)
    ok, u, v = visible_pixels(vmap, active, frame)
    gl = frame.gt_labels[v, u].astype(np.int64)
    ok &= gl != 0xFFFF
    idx = active[ok]
    vmap.field("gt_label")[idx] = gl[ok]
    if frame.gt_instances is not None:
        vmap.field("gt_instance")[idx] = frame.gt_instances[v[ok], u[ok]]
    return idx


_AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def voxel_normals(vmap, idx):
    """Central-difference TSDF gradients, normalised; returns (normals, valid)."""
    idx = np.asarray(idx, dtype=np.int64)
    ijk = vmap.ijk[idx].astype(np.int64)
    n = idx.shape[0]
    vals = np.zeros((6, n))
    valid = np.ones(n, dtype=bool)
    tsdf, weight = vmap.tsdf, vmap.weight
    for a, off in enumerate(_AXES):
        nb = vmap.lookup(ijk + off)
        found = nb >= 0
        nb_c = np.where(found, nb, 0)
        valid &= found & (weight[nb_c] > 0)
        vals[a] = np.where(found, tsdf[nb_c], 0.0)
    grad = np.stack([vals[0] - vals[1], vals[2] - vals[3], vals[4] - vals[5]], axis=1)
    norm = np.linalg.norm(grad, axis=1)
    valid &= norm > 0
    out = np.zeros((n, 3))
    out[valid] = grad[valid] / norm[valid, None]
    return out, valid


def voxel_normal(vmap, ijk):
    """Unit normal at one voxel, or None if any axis neighbour is missing."""
    idx = vmap.lookup(np.asarray(ijk).reshape(1, 3))
    if idx[0] < 0:
        return None
    normals, valid = voxel_normals(vmap, idx)
    return normals[0] if valid[0] else None


def frustum_active(vmap, pose, intrinsics, candidates=None, band=SURFACE_BAND):
    """Voxels near the surface whose centres fall inside the camera frustum."""
    idx = np.arange(len(vmap)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    cam = world_to_camera(pose, vmap.ijk[idx] * vmap.voxel_size)
    u, v, z = intrinsics.project(cam)
    ok = intrinsics.in_image(u, v) & (z >= intrinsics.near) & (z <= intrinsics.far)
    ok &= np.abs(vmap.tsdf[idx]) < band
    return idx[ok]


def extract_surface_points(vmap, band=EXTRACT_BAND):
    """One labeled point per observed near-surface voxel.

    Returns (points, voxel_indices); points is a structured array in the
    PLY record layout. Voxels without a label carry 65535.
    """
    idx = np.flatnonzero((vmap.weight > 0) & (np.abs(vmap.tsdf) < band))
    pts = np.zeros(idx.size, dtype=SURFACE_DTYPE)
    pos = vmap.ijk[idx] * vmap.voxel_size
    pts["x"], pts["y"], pts["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    col = np.clip(np.rint(vmap.color[idx]), 0, 255).astype(np.uint8)
    pts["red"], pts["green"], pts["blue"] = col[:, 0], col[:, 1], col[:, 2]
    lab = vmap.label[idx]
    pts["label"] = np.where(lab < 0, 0xFFFF, lab)
    pts["instance"] = vmap.instance[idx]
    pts["confidence"] = vmap.label_conf[idx]
    return pts, idx
