import numpy as np
import pytest

from progseg import voxel_map as vm
from progseg.frame_io import FrameBundle
from progseg.geometry import CameraIntrinsics

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def small_intrinsics(w=5, h=5, f=4.0, near=0.1, far=5.0):
    return CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h, near, far)


def make_frame(depth, intr, pose=None, index=0, color=None, label=None, prob=None):
    depth = np.asarray(depth, dtype=np.float64)
    if color is None:
        color = np.full(depth.shape + (3,), 128, dtype=np.uint8)
    fr = FrameBundle(index, depth, color, np.eye(4) if pose is None else pose, intr)
    if label is not None:
        fr.prediction_label = np.broadcast_to(np.asarray(label, dtype=np.int64), depth.shape).copy()
        fr.prediction_prob = np.broadcast_to(
            np.asarray(1.0 if prob is None else prob, dtype=np.float64), depth.shape).copy()
    return fr


def block_map(ijk, voxel_size=1.0, color=(128, 128, 128), tsdf=0.0):
    """A voxel map holding the given integer keys, observed once."""
    vmap = vm.VoxelMap(voxel_size=voxel_size, truncation=4 * voxel_size)
    idx = vmap.allocate(np.asarray(ijk, dtype=np.int64).reshape(-1, 3))
    vmap.field("weight")[idx] = 1
    vmap.field("tsdf")[idx] = tsdf
    vmap.field("color")[idx] = np.asarray(color, dtype=np.float64)
    return vmap, idx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
