"""Synthetic RGB-D sequences of box-furnished rooms with ground truth and noisy predictions."""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frame_io
from .geometry import CameraIntrinsics, look_at


@dataclass(frozen=True)
class Box:
    label: str
    instance: int
    lo: tuple
    hi: tuple


@dataclass
class SceneSpec:
    room: tuple
    boxes: list
    labels: tuple
    object_labels: tuple
    noise: float = 0.0
    wall_label: str = "wall"
    floor_label: str = "floor"
    ceiling_label: str = "ceiling"
    intrinsics: CameraIntrinsics = None
    prediction_stride: int = 10
    seed: int = 0
    trajectory: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")
        names = set(self.labels)
        for lab in (self.wall_label, self.floor_label, self.ceiling_label, *self.object_labels):
            if lab not in names:
                raise ValueError(f"label {lab!r} is not in the label space")
        room = np.asarray(self.room, dtype=float)
        for b in self.boxes:
            if b.label not in names:
                raise ValueError(f"box label {b.label!r} is not in the label space")
            lo, hi = np.asarray(b.lo, float), np.asarray(b.hi, float)
            if np.any(lo >= hi) or np.any(lo < 0) or np.any(hi > room):
                raise ValueError(f"box {b} does not lie inside the room")

    def label_id(self, name):
        return self.labels.index(name)


def _palette(n):
    hues = (np.arange(n) * 0.618034) % 1.0
    rgb = np.stack([np.abs(hues * 6 - 3) - 1, 2 - np.abs(hues * 6 - 2), 2 - np.abs(hues * 6 - 4)], axis=1)
    return 60 + 180 * np.clip(rgb, 0, 1)


_LIGHT = np.array([0.4, 0.25, 0.88]) / np.linalg.norm([0.4, 0.25, 0.88])


def raycast(spec, pose, intr):
    """Render depth (metres, 0 = miss), colour, label and instance maps for one view."""
    room = np.asarray(spec.room, dtype=float)
    o = pose[:3, 3]
    if np.any(o <= 0) or np.any(o >= room):
        raise ValueError("camera must be inside the room")
    dirs = intr.pixel_rays().reshape(-1, 3) @ pose[:3, :3].T
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        bound = np.where(dirs > 0, room, 0.0)
        t_axis = (bound - o) * inv
    t_axis = np.where(dirs == 0, np.inf, t_axis)
    axis = np.argmin(t_axis, axis=1)
    t_best = t_axis[np.arange(n), axis]
    sign = np.sign(dirs[np.arange(n), axis])
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = -sign
    wall, floor, ceil = (spec.label_id(x) for x in (spec.wall_label, spec.floor_label, spec.ceiling_label))
    label = np.full(n, wall)
    label[(axis == 2) & (sign < 0)] = floor
    label[(axis == 2) & (sign > 0)] = ceil
    inst = np.zeros(n, dtype=np.int64)

    for b in spec.boxes:
        lo, hi = np.asarray(b.lo, float), np.asarray(b.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        parallel = dirs == 0
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
        enter_axis = np.argmax(tmin, axis=1)
        t_in = tmin[np.arange(n), enter_axis]
        t_out = np.min(tmax, axis=1)
        hit = (t_in <= t_out) & (t_in > 1e-9) & (t_in < t_best)
        if not hit.any():
            continue
        t_best = np.where(hit, t_in, t_best)
        s = np.sign(dirs[np.arange(n), enter_axis])
        nb = np.zeros((n, 3))
        nb[np.arange(n), enter_axis] = -s
        normal = np.where(hit[:, None], nb, normal)
        label = np.where(hit, spec.label_id(b.label), label)
        inst = np.where(hit, b.instance, inst)

    depth = t_best
    valid = (depth >= intr.near) & (depth <= intr.far) & np.isfinite(depth)
    pal = _palette(len(spec.labels))
    shade = 0.35 + 0.65 * np.clip(normal @ _LIGHT, 0, 1)
    tint = 1.0 - 0.12 * ((inst * 0.618034) % 1.0)
    color = np.clip(pal[label] * (shade * tint)[:, None], 0, 255)
    shape = (intr.height, intr.width)
    depth = np.where(valid, depth, 0.0).reshape(shape)
    color = np.where(valid[:, None], color, 0).reshape(*shape, 3)
    label = np.where(valid, label, frame_io.NO_GT).reshape(shape)
    inst = np.where(valid, inst, 0).reshape(shape)
    return depth, np.rint(color).astype(np.uint8), label, inst


def noisy_prediction(gt, num_labels, noise, rng):
    """Replace each labeled pixel by a uniformly drawn wrong label with probability noise."""
    labeled = gt != frame_io.NO_GT
    corrupt = (rng.random(gt.shape) < noise) & labeled
    wrong = (gt + rng.integers(1, num_labels, size=gt.shape)) % num_labels
    pred = np.where(corrupt, wrong, gt)
    prob = rng.uniform(0.5, 1.0, size=gt.shape)
    prob = np.where(labeled, prob, 0.0)
    return pred.astype(np.int64), prob, corrupt


def generate_synthetic_sequence(spec, trajectory, out_path, intrinsics=None,
                                prediction_stride=None, seed=None):
    """Render a trajectory through the scene and write it as a sequence directory."""
    trajectory = list(trajectory)
    if not trajectory:
        raise ValueError("trajectory is empty")
    intr = intrinsics or spec.intrinsics
    if intr is None:
        raise ValueError("no camera intrinsics given")
    stride = prediction_stride or spec.prediction_stride
    seed = spec.seed if seed is None else seed
    out = Path(out_path)
    for sub in ("depth", "color", "pred", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    num_labels = len(spec.labels)
    for i, pose in enumerate(trajectory):
        depth, color, label, inst = raycast(spec, pose, intr)
        if not (depth > 0).any():
            warnings.warn(f"frame {i}: camera sees no surface", stacklevel=2)
        depth_mm = np.rint(depth * 1000).astype("<u2")
        frame_io.write_raw_map(out / "depth" / f"{i:06d}.depth", frame_io.DEPTH_MAGIC, depth_mm)
        frame_io.write_ppm(out / "color" / f"{i:06d}.ppm", color)
        frame_io.write_raw_map(out / "gt" / f"{i:06d}.label", frame_io.LABEL_MAGIC, label.astype("<u2"))
        frame_io.write_raw_map(out / "gt" / f"{i:06d}.inst", frame_io.INST_MAGIC, inst.astype("<u2"))
        if i % stride == 0:
            rng = np.random.default_rng([seed, i])
            pred, prob, _ = noisy_prediction(label, num_labels, spec.noise, rng)
            rec = np.zeros(label.shape, dtype=frame_io.PRED_DTYPE)
            rec["label"] = np.where(label == frame_io.NO_GT, frame_io.NO_GT, pred)
            rec["prob"] = prob
            frame_io.write_raw_map(out / "pred" / f"{i:06d}.pred", frame_io.PRED_MAGIC, rec)
    frame_io.write_poses(trajectory, out / "poses.txt")
    fields = {
        "width": intr.width, "height": intr.height,
        **{k: repr(float(getattr(intr, k))) for k in ("fx", "fy", "cx", "cy", "near", "far")},
        "frames": len(trajectory), "prediction_stride": stride,
        "labels": ",".join(spec.labels), "object_labels": ",".join(spec.object_labels),
    }
    frame_io.write_manifest(fields, out / "manifest.txt")
    return frame_io.read_manifest(out / "manifest.txt")


def orbit_trajectory(center, radius, height, frames, turns=1.0, look_height=None,
                     start_angle=0.0, wobble=0.0):
    """Camera circling a point, looking at it; wobble sways the look target."""
    center = np.asarray(center, dtype=float)
    look_z = center[2] if look_height is None else look_height
    poses = []
    for i in range(frames):
        a = start_angle + 2 * np.pi * turns * i / max(frames, 1)
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        eye[2] = height
        sway = wobble * np.array([np.sin(3.1 * a), np.cos(2.3 * a), 0.5 * np.sin(1.7 * a)])
        target = np.array([center[0], center[1], look_z]) + sway
        poses.append(look_at(eye, target))
    return poses


def pan_trajectory(start, end, frames, look_offset):
    """Camera translating along a line while looking in a fixed direction."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    off = np.asarray(look_offset, float)
    poses = []
    for i in range(frames):
        s = i / max(frames - 1, 1)
        eye = start + s * (end - start)
        poses.append(look_at(eye, eye + off))
    return poses


def read_scene_spec(path):
    """Parse a scene file.

    Keys: ``room = X Y Z``; ``labels`` and ``object_labels`` comma lists;
    repeated ``box = label instance x0 y0 z0 x1 y1 z1``; ``noise``, ``seed``,
    ``prediction_stride``; camera ``width height hfov near far``; and
    ``trajectory = orbit cx cy cz radius height frames [turns]`` or
    ``trajectory = pan x0 y0 z0 x1 y1 z1 dx dy dz frames``.
    """
    path = Path(path)
    boxes, kv = [], {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "box":
            parts = value.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: box needs label, instance and 6 coordinates")
            nums = [float(x) for x in parts[2:]]
            boxes.append(Box(parts[0], int(parts[1]), tuple(nums[:3]), tuple(nums[3:])))
        else:
            kv[key] = value
    labels = tuple(s.strip() for s in kv["labels"].split(",") if s.strip())
    objects = tuple(s.strip() for s in kv.get("object_labels", "").split(",") if s.strip())
    intr = CameraIntrinsics.from_fov(
        int(kv.get("width", 80)), int(kv.get("height", 60)), float(kv.get("hfov", 70.0)),
        float(kv.get("near", 0.2)), float(kv.get("far", 8.0)))
    spec = SceneSpec(
        room=tuple(float(x) for x in kv["room"].split()),
        boxes=boxes, labels=labels, object_labels=objects,
        noise=float(kv.get("noise", 0.0)), intrinsics=intr,
        prediction_stride=int(kv.get("prediction_stride", 10)), seed=int(kv.get("seed", 0)),
    )
    traj = kv.get("trajectory", "").split()
    if not traj:
        raise ValueError(f"{path}: no trajectory given")
    if traj[0] == "orbit":
        cx, cy, cz, r, h = (float(x) for x in traj[1:6])
        turns = float(traj[7]) if len(traj) > 7 else 1.0
        spec.trajectory = orbit_trajectory((cx, cy, cz), r, h, int(traj[6]), turns)
    elif traj[0] == "pan":
        vals = [float(x) for x in traj[1:10]]
        spec.trajectory = pan_trajectory(vals[:3], vals[3:6], int(traj[10]), vals[6:9])
    else:
        raise ValueError(f"{path}: unknown trajectory kind {traj[0]!r}")
    return spec
