import numpy as np
import pytest

from progseg import frame_io
from progseg.frame_io import SURFACE_DTYPE
from progseg.synthetic import Box, SceneSpec, generate_synthetic_sequence, noisy_prediction, orbit_trajectory
from progseg.geometry import CameraIntrinsics

trivial = pytest.mark.trivial


def _manifest(tmp_path, frames=100, width=640, height=480, labels=40, near=0.1, far=8.0):
    names = [f"c{i}" for i in range(labels)]
    frame_io.write_manifest({
        "width": width, "height": height, "fx": 500.0, "fy": 500.0,
        "cx": (width - 1) / 2, "cy": (height - 1) / 2, "near": near, "far": far,
        "frames": frames, "prediction_stride": 10,
        "labels": ",".join(names), "object_labels": ",".join(names[3:]),
    }, tmp_path / "manifest.txt")
    frame_io.write_poses([np.eye(4)] * frames, tmp_path / "poses.txt")
    return tmp_path


@trivial
def test_manifest_read_back(tmp_path):
    meta = frame_io.read_manifest(_manifest(tmp_path))
    assert meta.frames == 100
    assert (meta.intrinsics.width, meta.intrinsics.height) == (640, 480)
    assert len(meta.labels) == 40
    assert meta.object_labels == frozenset(range(3, 40))


@trivial
def test_manifest_far_not_beyond_near(tmp_path):
    with pytest.raises(ValueError):
        frame_io.read_manifest(_manifest(tmp_path, near=2.0, far=2.0))


@trivial
def test_missing_depth_surfaces_at_load(tmp_path):
    meta = frame_io.read_manifest(_manifest(tmp_path, frames=2, width=4, height=3))
    with pytest.raises(FileNotFoundError):
        frame_io.load_frame(meta, 0)


def _tiny_scene(noise=0.0):
    intr = CameraIntrinsics.from_fov(32, 24, 70.0, 0.2, 8.0)
    return SceneSpec(room=(3.0, 3.0, 2.5), boxes=[Box("chair", 1, (1.2, 1.2, 0.0), (1.7, 1.7, 0.8))],
                     labels=("wall", "floor", "ceiling", "chair"), object_labels=("chair",),
                     noise=noise, intrinsics=intr, prediction_stride=2)


@trivial
def test_synthetic_first_frame_has_ground_truth(tmp_path):
    spec = _tiny_scene()
    meta = generate_synthetic_sequence(spec, orbit_trajectory((1.5, 1.5, 0.5), 1.0, 1.4, 3), tmp_path)
    fr = frame_io.load_frame(meta, 0)
    assert fr.gt_labels is not None and fr.has_prediction
    assert np.any(fr.gt_labels != frame_io.NO_GT)


def test_synthetic_round_trip_exact(tmp_path):
    spec = _tiny_scene(noise=0.3)
    traj = orbit_trajectory((1.5, 1.5, 0.5), 1.0, 1.4, 3)
    meta = generate_synthetic_sequence(spec, traj, tmp_path)
    from progseg.synthetic import raycast
    for i in range(3):
        fr = frame_io.load_frame(meta, i)
        depth, color, label, inst = raycast(spec, traj[i], spec.intrinsics)
        assert np.array_equal(fr.depth, np.rint(depth * 1000) / 1000.0)
        assert np.array_equal(fr.color, color)
        assert np.array_equal(fr.gt_labels, label)
        assert np.array_equal(fr.gt_instances, inst)
        assert np.allclose(fr.pose, traj[i], atol=0)


@trivial
def test_ply_single_point_round_trip(tmp_path):
    pts = np.zeros(1, dtype=SURFACE_DTYPE)
    pts["label"], pts["instance"], pts["confidence"] = 3, 1, 0.25
    frame_io.write_labeled_cloud(pts, tmp_path / "a.ply")
    back = frame_io.read_labeled_cloud(tmp_path / "a.ply")
    assert back.shape == (1,)
    assert (back["x"][0], back["y"][0], back["z"][0]) == (0.0, 0.0, 0.0)
    assert back["label"][0] == 3 and back["instance"][0] == 1
    assert back.tobytes() == pts.tobytes()


@trivial
def test_ply_empty_refused(tmp_path):
    with pytest.raises(ValueError):
        frame_io.write_labeled_cloud(np.zeros(0, dtype=SURFACE_DTYPE), tmp_path / "e.ply")


@trivial
def test_ply_million_points_size(tmp_path):
    n = 10 ** 6
    path = tmp_path / "m.ply"
    frame_io.write_labeled_cloud(np.zeros(n, dtype=SURFACE_DTYPE), path)
    raw = path.read_bytes()
    header = raw[: raw.index(b"end_header\n") + len(b"end_header\n")]
    assert len(raw) == len(header) + n * SURFACE_DTYPE.itemsize
    assert SURFACE_DTYPE.itemsize == 3 * 4 + 3 + 2 + 2 + 4


@trivial
def test_zero_noise_prediction_is_ground_truth():
    gt = np.random.default_rng(0).integers(0, 5, (40, 50))
    pred, prob, _ = noisy_prediction(gt, 5, 0.0, np.random.default_rng(1))
    assert np.array_equal(pred, gt)
    assert np.all((prob >= 0.5) & (prob < 1.0))


@trivial
def test_total_noise_changes_every_pixel():
    gt = np.random.default_rng(0).integers(0, 5, (40, 50))
    pred, _, _ = noisy_prediction(gt, 5, 1.0, np.random.default_rng(1))
    assert np.all(pred != gt)
    assert np.all((pred >= 0) & (pred < 5))


def test_noise_rate_concentration():
    gt = np.random.default_rng(0).integers(0, 10, (250, 400))
    pred, _, _ = noisy_prediction(gt, 10, 0.3, np.random.default_rng(7))
    # binomial sd at 1e5 pixels is 0.00145, so 0.01 is about seven sigma
    assert abs(np.mean(pred != gt) - 0.3) <= 0.01


def test_raw_map_rejects_wrong_magic(tmp_path):
    frame_io.write_raw_map(tmp_path / "d", frame_io.DEPTH_MAGIC, np.zeros((2, 3), "<u2"))
    with pytest.raises(ValueError):
        frame_io.read_raw_map(tmp_path / "d", frame_io.PRED_MAGIC, "<u2")
    assert frame_io.read_raw_map(tmp_path / "d", frame_io.DEPTH_MAGIC, "<u2").shape == (2, 3)
