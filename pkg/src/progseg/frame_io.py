"""Frame sequences on disk, prediction maps, and labeled PLY point clouds.

Sequence layout under a root directory::

    manifest.txt          key = value lines
    poses.txt             one camera-to-world pose per line, 16 floats row-major
    depth/000000.depth    8-byte header + uint16 millimetres
    color/000000.ppm      binary PPM (P6)
    pred/000000.pred      8-byte header + (uint16 label, float32 prob) per pixel
    gt/000000.label       8-byte header + uint16 label (65535 = none)
    gt/000000.inst        8-byte header + uint16 instance id

Raw map headers are a 4-byte magic followed by uint16 width and height.
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, validate_pose

DEPTH_MAGIC = b"DPTH"
PRED_MAGIC = b"PRED"
LABEL_MAGIC = b"GTLB"
INST_MAGIC = b"GTIN"
NO_GT = 0xFFFF

PRED_DTYPE = np.dtype([("label", "<u2"), ("prob", "<f4")])
SURFACE_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
        ("label", "<u2"), ("instance", "<u2"), ("confidence", "<f4"),
    ]
)

_LAYOUT_DEFAULTS = {
    "poses": "poses.txt",
    "depth_dir": "depth",
    "color_dir": "color",
    "pred_dir": "pred",
    "gt_dir": "gt",
}


@dataclass
class SequenceMeta:
    root: Path
    intrinsics: CameraIntrinsics
    frames: int
    prediction_stride: int
    labels: tuple
    object_labels: frozenset
    poses: np.ndarray
    layout: dict = field(default_factory=lambda: dict(_LAYOUT_DEFAULTS))

    def path(self, kind, index):
        ext = {"depth_dir": "depth", "color_dir": "ppm", "pred_dir": "pred"}
        if kind in ext:
            return self.root / self.layout[kind] / f"{index:06d}.{ext[kind]}"
        if kind == "gt_label":
            return self.root / self.layout["gt_dir"] / f"{index:06d}.label"
        if kind == "gt_inst":
            return self.root / self.layout["gt_dir"] / f"{index:06d}.inst"
        raise KeyError(kind)

    def is_prediction_frame(self, index):
        return index % self.prediction_stride == 0

    @property
    def object_ids(self):
        return self.object_labels


@dataclass
class FrameBundle:
    index: int
    depth: np.ndarray
    color: np.ndarray
    pose: np.ndarray
    intrinsics: CameraIntrinsics
    prediction_label: np.ndarray = None
    prediction_prob: np.ndarray = None
    gt_labels: np.ndarray = None
    gt_instances: np.ndarray = None

    @property
    def has_prediction(self):
        return self.prediction_label is not None


def parse_key_values(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    kv = parse_key_values(path.read_text(), str(path))

    def get(key, conv):
        if key not in kv:
            raise ValueError(f"{path}: missing field '{key}'")
        try:
            return conv(kv[key])
        except ValueError as exc:
            raise ValueError(f"{path}: malformed field '{key}': {kv[key]!r}") from exc

    intr = CameraIntrinsics(
        fx=get("fx", float), fy=get("fy", float), cx=get("cx", float), cy=get("cy", float),
        width=get("width", int), height=get("height", int),
        near=get("near", float), far=get("far", float),
    )
    frames = get("frames", int)
    stride = get("prediction_stride", int)
    if frames < 1 or stride < 1:
        raise ValueError(f"{path}: frames and prediction_stride must be >= 1")
    labels = tuple(s.strip() for s in kv.get("labels", "").split(",") if s.strip())
    if not labels:
        raise ValueError(f"{path}: label space is empty")
    obj_names = [s.strip() for s in kv.get("object_labels", "").split(",") if s.strip()]
    unknown = [n for n in obj_names if n not in labels]
    if unknown:
        raise ValueError(f"{path}: object labels not in label space: {unknown}")
    layout = dict(_LAYOUT_DEFAULTS)
    layout.update({k: kv[k] for k in _LAYOUT_DEFAULTS if k in kv})
    poses = _read_poses(path.parent / layout["poses"], frames)
    return SequenceMeta(path.parent, intr, frames, stride, labels,
                        frozenset(labels.index(n) for n in obj_names), poses, layout)


def write_manifest(meta_fields, path):
    lines = [f"{k} = {v}" for k, v in meta_fields.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_poses(path, frames):
    if not path.exists():
        raise FileNotFoundError(f"pose file not found: {path}")
    vals = np.loadtxt(path, ndmin=2)
    if vals.shape != (frames, 16):
        raise ValueError(f"{path}: expected {frames} poses of 16 values, got {vals.shape}")
    return vals.reshape(frames, 4, 4)


def write_poses(poses, path):
    with open(path, "w") as f:
        for p in poses:
            f.write(" ".join(repr(float(x)) for x in np.asarray(p).ravel()) + "\n")


def write_raw_map(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<HH", w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raw_map(path, magic, dtype, shape=None):
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8 or head[:4] != magic:
            raise ValueError(f"{path}: bad header, expected magic {magic!r}")
        w, h = struct.unpack("<HH", head[4:])
        if shape is not None and (h, w) != tuple(shape):
            raise ValueError(f"{path}: dimension mismatch {w}x{h}, expected {shape[1]}x{shape[0]}")
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(h, w)


def write_ppm(path, rgb):
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated payload")
    return pix.reshape(h, w, 3)


def load_frame(meta, index):
    if not 0 <= index < meta.frames:
        raise IndexError(f"frame {index} out of range [0, {meta.frames})")
    intr = meta.intrinsics
    shape = (intr.height, intr.width)
    depth_mm = read_raw_map(meta.path("depth_dir", index), DEPTH_MAGIC, "<u2", shape)
    depth = depth_mm.astype(np.float64) / 1000.0
    color = read_ppm(meta.path("color_dir", index))
    if color.shape[:2] != shape:
        raise ValueError(f"frame {index}: color dimension mismatch")
    frame = FrameBundle(index, depth, color, validate_pose(meta.poses[index]), intr)
    if meta.is_prediction_frame(index):
        pred = read_raw_map(meta.path("pred_dir", index), PRED_MAGIC, PRED_DTYPE, shape)
        frame.prediction_label = pred["label"].astype(np.int64)
        frame.prediction_prob = pred["prob"].astype(np.float64)
    gt = meta.path("gt_label", index)
    if gt.exists():
        frame.gt_labels = read_raw_map(gt, LABEL_MAGIC, "<u2", shape).astype(np.int64)
    gi = meta.path("gt_inst", index)
    if gi.exists():
        frame.gt_instances = read_raw_map(gi, INST_MAGIC, "<u2", shape).astype(np.int64)
    return frame


def write_labeled_cloud(points, path):
    """Write a structured point array as binary little-endian PLY."""
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("refusing to write an empty point cloud")
    rec = np.zeros(points.shape[0], dtype=SURFACE_DTYPE)
    for name in SURFACE_DTYPE.names:
        rec[name] = points[name]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {rec.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property ushort label\nproperty ushort instance\nproperty float confidence\n"
        "end_header\n"
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())
    os.replace(tmp, path)


_PLY_TYPES = {"float": "<f4", "uchar": "u1", "ushort": "<u2", "int": "<i4",
              "uint": "<u4", "double": "<f8", "short": "<i2", "char": "i1"}


def read_labeled_cloud(path):
    """Read a binary little-endian PLY vertex element into a structured array."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        count, props = None, []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "binary_little_endian":
                raise ValueError(f"{path}: unsupported PLY format {parts[1]}")
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValueError(f"{path}: unexpected element {parts[1]}")
                count = int(parts[2])
            elif parts[0] == "property":
                props.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        dtype = np.dtype(props)
        return np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype, count=count).copy()
