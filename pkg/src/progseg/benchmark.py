"""Synthetic benchmark scenes shared by the acceptance suite and the CLI."""

import numpy as np

from . import crf
from . import supervoxel as sv
from .geometry import CameraIntrinsics
from .synthetic import Box, SceneSpec, generate_synthetic_sequence, orbit_trajectory, pan_trajectory

LABELS = ("wall", "floor", "ceiling", "chair", "table", "sofa", "cabinet", "monitor", "box", "lamp")
OBJECTS = LABELS[3:]

# coarse benchmark resolution; keys follow the pipeline config names
BENCH_CONFIG = {
    "voxel_size": 0.04,
    "voxel_truncation": 0.1,
    "cluster_spacing": 0.16,
}


def bench_intrinsics(width=80, height=60):
    return CameraIntrinsics.from_fov(width, height, 70.0, 0.2, 8.0)


def desk_scene(noise=0.3, seed=0):
    """A 5 x 4 m office with furniture along the walls and a desk island."""
    boxes = [
        Box("table", 1, (1.8, 1.5, 0.0), (3.2, 2.4, 0.74)),
        Box("monitor", 2, (2.3, 2.0, 0.74), (2.8, 2.12, 1.1)),
        Box("box", 3, (1.95, 1.6, 0.74), (2.2, 1.85, 0.92)),
        Box("chair", 4, (2.3, 0.9, 0.0), (2.75, 1.35, 0.9)),
        Box("cabinet", 5, (4.2, 0.3, 0.0), (4.8, 1.1, 1.3)),
        Box("sofa", 6, (0.2, 2.8, 0.0), (2.0, 3.7, 0.75)),
        Box("lamp", 7, (4.4, 3.3, 0.0), (4.7, 3.6, 1.6)),
        Box("chair", 8, (3.4, 2.6, 0.0), (3.85, 3.05, 0.9)),
    ]
    return SceneSpec(room=(5.0, 4.0, 2.6), boxes=boxes, labels=LABELS, object_labels=OBJECTS,
                     noise=noise, intrinsics=bench_intrinsics(), seed=seed)


def desk_trajectory(frames=200):
    """One slow loop around the desk island with the camera looking inwards."""
    return orbit_trajectory((2.5, 2.0, 0.6), 1.55, 1.55, frames, turns=1.0, wobble=0.35)


def corridor_scene(length=60.0, noise=0.3, seed=0):
    """A long hall with boxes along both sides, for growth and timing runs."""
    boxes = []
    labels = OBJECTS
    for i, x in enumerate(np.arange(1.0, length - 1.0, 1.5)):
        side = i % 2
        y0 = 0.1 if side == 0 else 2.4
        boxes.append(Box(labels[i % len(labels)], i + 1,
                         (float(x), y0, 0.0), (float(x) + 0.6, y0 + 0.5, 0.5 + 0.1 * (i % 4))))
    return SceneSpec(room=(length, 3.0, 2.5), boxes=boxes, labels=LABELS, object_labels=OBJECTS,
                     noise=noise, intrinsics=bench_intrinsics(64, 48), seed=seed)


def corridor_trajectory(length=60.0, frames=1000):
    """Walk down the hall looking ahead and slightly down, so new space keeps appearing."""
    return pan_trajectory((0.3, 1.5, 1.4), (length - 0.3, 1.5, 1.4), frames, (1.0, 0.0, -0.35))


def training_scene(seed=1):
    """A different furnished room used only to learn label co-occurrence."""
    boxes = [
        Box("table", 1, (1.0, 1.0, 0.0), (2.0, 1.8, 0.72)),
        Box("chair", 2, (0.4, 1.1, 0.0), (0.85, 1.55, 0.9)),
        Box("monitor", 3, (1.3, 1.5, 0.72), (1.8, 1.62, 1.05)),
        Box("cabinet", 4, (3.2, 0.2, 0.0), (3.8, 0.8, 1.4)),
        Box("sofa", 5, (2.2, 2.4, 0.0), (3.8, 3.2, 0.7)),
        Box("box", 6, (3.3, 2.6, 0.7), (3.6, 2.9, 0.9)),
        Box("lamp", 7, (0.2, 3.0, 0.0), (0.5, 3.3, 1.5)),
    ]
    return SceneSpec(room=(4.0, 3.5, 2.5), boxes=boxes, labels=LABELS, object_labels=OBJECTS,
                     noise=0.0, intrinsics=bench_intrinsics(), seed=seed)


def training_trajectory(frames=60):
    return orbit_trajectory((2.0, 1.75, 0.6), 1.2, 1.5, frames, turns=1.0, wobble=0.2)


def make_sequence(kind, out, frames=None, noise=0.3, seed=0):
    """Write a benchmark sequence and return its metadata."""
    if kind == "desk":
        spec, traj = desk_scene(noise, seed), desk_trajectory(frames or 200)
    elif kind == "corridor":
        spec, traj = corridor_scene(noise=noise, seed=seed), corridor_trajectory(frames=frames or 1000)
    elif kind == "training":
        spec, traj = training_scene(seed), training_trajectory(frames or 60)
    else:
        raise ValueError(f"unknown benchmark scene {kind!r}")
    return generate_synthetic_sequence(spec, traj, out)


def learn_scene_cooccurrence(pipe):
    """Co-occurrence from ground-truth labels of adjacent super-voxels in a finished run."""
    svs, vmap = pipe.svs, pipe.vmap
    n = len(vmap)
    gt = vmap.gt_label[:n]
    assign = svs.assignment[:n]
    ok = (gt >= 0) & (assign >= 0)
    nl = pipe.num_labels
    votes = np.zeros((svs.next_id, nl))
    np.add.at(votes, (assign[ok], gt[ok]), 1.0)
    has = votes.sum(axis=1) > 0
    major = np.argmax(votes, axis=1)
    edges = sv.adjacency(svs, vmap)
    keep = has[edges[:, 0]] & has[edges[:, 1]]
    pairs = major[edges[keep]]
    return crf.learn_cooccurrence(nl, pairs=pairs)


def describe(meta):
    return f"{meta.frames} frames, {meta.intrinsics.width}x{meta.intrinsics.height}, " \
           f"{len(meta.labels)} labels"

