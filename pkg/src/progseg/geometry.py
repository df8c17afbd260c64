"""Pinhole camera model and rigid poses (camera-to-world, OpenCV axes)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")

    @classmethod
    def from_fov(cls, width, height, hfov_deg, near=0.1, far=10.0):
        fx = float(0.5 * width / np.tan(np.radians(hfov_deg) / 2))
        return cls(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height, near, far)

    def project(self, pts_cam):
        """Camera-space points (n, 3) to rounded pixel (u, v) and depth z."""
        z = pts_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(self.fx * pts_cam[:, 0] / z + self.cx)
            v = np.rint(self.fy * pts_cam[:, 1] / z + self.cy)
        u = np.nan_to_num(u, nan=-1, posinf=-1, neginf=-1)
        v = np.nan_to_num(v, nan=-1, posinf=-1, neginf=-1)
        return u.astype(np.int64), v.astype(np.int64), z

    def in_image(self, u, v):
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def pixel_rays(self):
        """Unnormalised camera-space ray per pixel with z = 1, shape (h, w, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


def validate_pose(pose, tol=1e-6):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    r = pose[:3, :3]
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise ValueError("pose bottom row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(r) - 1) >= tol or not np.allclose(r @ r.T, np.eye(3), atol=tol):
        raise ValueError("pose rotation is not orthonormal")
    return pose


def invert_pose(pose):
    r = pose[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ pose[:3, 3]
    return out


def world_to_camera(pose, pts):
    r = pose[:3, :3]
    return (pts - pose[:3, 3]) @ r


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from eye to target; camera y points down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= n
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose
