"""Scan containers, KITTI I/O, normal estimation and voxel downsampling."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import MalformedFileError, ParseError, TooFewPointsError
from .geometry import ORTHO_TOL, Pose, project_to_rotation

logger = logging.getLogger(__name__)

DEFAULT_NORMAL_K = 10


@dataclass(eq=False)
class PointCloud:
    """``N x 3`` points in the sensor frame with intensity and optional unit normals."""

    points: np.ndarray
    intensity: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.intensity is None:
            self.intensity = np.zeros(n)
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(n)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(n, 3)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    def transformed(self, pose):
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.transform_points(self.points), self.intensity.copy(), normals)

    def select(self, index):
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], self.intensity[index], normals)

    def with_normals(self, normals):
        return PointCloud(self.points, self.intensity, normals)


@dataclass(eq=False)
class ScanSequence:
    scans: list
    ground_truth: list | None = None
    timestamps: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ground_truth is not None and len(self.ground_truth) != len(self.scans):
            raise ValueError(
                f"{len(self.ground_truth)} ground-truth poses for {len(self.scans)} scans"
            )

    def __len__(self):
        return len(self.scans)


# ------------------------------------------------------------------------ KITTI I/O


def load_kitti_bin(path):
    """Read a Velodyne ``.bin`` scan: little-endian float32 ``(x, y, z, intensity)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    finite = np.all(np.isfinite(data), axis=1)
    dropped = int(len(data) - finite.sum())
    if dropped:
        logger.info("%s: dropped %d non-finite points", path, dropped)
    data = data[finite]
    return PointCloud(data[:, :3], np.clip(data[:, 3], 0.0, 1.0))


def save_kitti_bin(cloud, path):
    data = np.column_stack([cloud.points, cloud.intensity]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())


def _parse_pose_line(line, lineno):
    parts = line.split()
    if len(parts) != 12:
        raise ParseError(f"expected 12 numbers, got {len(parts)}", lineno)
    try:
        values = np.array([float(x) for x in parts])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    m = values.reshape(3, 4)
    r = m[:, :3]
    if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL:
        r = project_to_rotation(r)
    return Pose(r, m[:, 3])


def load_kitti_poses(path):
    """Read a KITTI pose file (row-major 3x4 ``[R|t]`` per line)."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            poses.append(_parse_pose_line(line, lineno))
    return poses


def format_pose_line(pose):
    m = np.column_stack([pose.rotation, pose.translation]).reshape(-1)
    return " ".join(_fmt(v) for v in m)


def _fmt(v):
    v = float(v)
    if v == 0.0:
        return "0"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def save_kitti_poses(poses, path):
    with open(path, "w") as fh:
        for p in poses:
            fh.write(format_pose_line(p) + "\n")


def load_calibration(path):
    """Velodyne-to-camera transform ``Tr`` from a 12-number file or KITTI ``calib.txt``."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if ":" in text:
                key, text = text.split(":", 1)
                if key.strip() != "Tr":
                    continue
            return _parse_pose_line(text, lineno)
    raise ParseError("no calibration transform found")


def camera_to_lidar_poses(poses, calibration):
    """Express camera-frame ground truth in the LiDAR frame: ``Tr^-1 * P * Tr``."""
    inv = calibration.inverse()
    return [inv @ p @ calibration for p in poses]


def load_kitti_sequence(velodyne_dir, poses_path=None, calibration_path=None, limit=None):
    names = sorted(f for f in os.listdir(velodyne_dir) if f.endswith(".bin"))
    if limit is not None:
        names = names[:limit]
    scans = [load_kitti_bin(os.path.join(velodyne_dir, f)) for f in names]
    gt = None
    if poses_path is not None:
        gt = load_kitti_poses(poses_path)[: len(scans)]
        if calibration_path is not None:
            gt = camera_to_lidar_poses(gt, load_calibration(calibration_path))
    return ScanSequence(scans, gt, np.arange(len(scans)) * 0.1)


# ---------------------------------------------------------------- cloud processing


def estimate_normals(cloud, k=DEFAULT_NORMAL_K, sensor_origin=(0.0, 0.0, 0.0), workers=1):
    """Per-point normals from the covariance of the ``k`` nearest neighbours (self included).

    Each normal is the eigenvector of the smallest covariance eigenvalue, flipped
    to face ``sensor_origin``.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    n = len(cloud)
    if n < k:
        raise TooFewPointsError(f"{n} points, need at least {k}")
    _, idx = cKDTree(cloud.points).query(cloud.points, k=k, workers=workers)
    nbrs = cloud.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    facing = np.einsum("ij,ij->i", normals, np.asarray(sensor_origin) - cloud.points)
    normals[facing < 0] *= -1.0
    return cloud.with_normals(normals)


def voxel_downsample(cloud, voxel):
    """One centroid per occupied voxel, ordered by voxel index; normals are dropped."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    inten = np.bincount(inverse, weights=cloud.intensity, minlength=len(counts))
    return PointCloud(sums / counts[:, None], inten / counts)
