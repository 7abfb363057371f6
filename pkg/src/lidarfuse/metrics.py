"""Relative pose error, KITTI-style drift percentages and result export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import BadDeltaError, EmptyError, LengthMismatchError, TooShortError
from .geometry import Pose, pose_compose, pose_inverse
from .pointcloud import load_kitti_poses, save_kitti_poses

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class RpeResult:
    per_interval_rmse: list = field(default_factory=list)
    overall_rmse: float = 0.0
    kitti_trans_pct: float = 0.0
    kitti_rot_deg_per_100m: float = 0.0


def _check_pair(gt, est):
    if len(gt) != len(est):
        raise LengthMismatchError(f"{len(gt)} ground-truth poses vs {len(est)} estimates")


def relative_pose_error(gt, est, delta=1):
    """``E_i = (Q_i^-1 Q_{i+delta})^-1 (P_i^-1 P_{i+delta})`` for ``i = 0..n-delta-1``."""
    _check_pair(gt, est)
    n = len(gt)
    if not 1 <= delta < n:
        raise BadDeltaError(f"delta must lie in [1, {n - 1}], got {delta}")
    out = []
    for i in range(n - delta):
        q = pose_compose(pose_inverse(gt[i]), gt[i + delta])
        p = pose_compose(pose_inverse(est[i]), est[i + delta])
        # identical relative motions give an exact identity error
        same = np.array_equal(q.as_matrix(), p.as_matrix())
        out.append(Pose() if same else pose_compose(pose_inverse(q), p))
    return out


def rpe_rmse(errors):
    """Root mean square of the translational parts of the error poses."""
    if len(errors) == 0:
        raise EmptyError("no error poses")
    t = np.array([e.translation for e in errors])
    return float(np.sqrt(np.mean(np.sum(t * t, axis=1))))


def _inverse_stack(m):
    out = np.zeros_like(m)
    rt = np.transpose(m[:, :3, :3], (0, 2, 1))
    out[:, :3, :3] = rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", rt, m[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def rpe_rmse_per_interval(gt, est):
    """RMSE for every interval ``1..n-1`` (vectorised over the start index)."""
    _check_pair(gt, est)
    g = np.array([p.as_matrix() for p in gt])
    e = np.array([p.as_matrix() for p in est])
    gi, ei = _inverse_stack(g), _inverse_stack(e)
    out = []
    for d in range(1, len(gt)):
        q = gi[:-d] @ g[d:]
        p = ei[:-d] @ e[d:]
        err = _inverse_stack(q) @ p
        t = np.where(np.all(q == p, axis=(1, 2))[:, None], 0.0, err[:, :3, 3])
        out.append(float(np.sqrt(np.mean(np.sum(t * t, axis=1)))))
    return out


def rpe_rmse_overall(gt, est):
    """Mean of the per-interval RMSE over every interval ``1..n-1``."""
    if len(gt) < 2:
        raise EmptyError("need at least two poses")
    return float(np.mean(rpe_rmse_per_interval(gt, est)))


def trajectory_distances(poses):
    t = np.array([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _angle(r):
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def kitti_segment_errors(gt, est, lengths=SEGMENT_LENGTHS):
    """Rows ``(start, length, trans_pct, rot_deg_per_100m)`` for every evaluable segment."""
    _check_pair(gt, est)
    dist = trajectory_distances(gt)
    rows = []
    for start in range(len(gt)):
        for length in lengths:
            end = int(np.searchsorted(dist, dist[start] + length, side="left"))
            if end >= len(gt):
                continue
            e = relative_pose_error([gt[start], gt[end]], [est[start], est[end]], 1)[0]
            rows.append(
                (start, length, np.linalg.norm(e.translation) / length * 100.0, np.degrees(_angle(e.rotation)) / length * 100.0)
            )
    return rows


def kitti_metrics(gt, est, lengths=SEGMENT_LENGTHS):
    """Mean translation error (%) and rotation error (deg / 100 m) over all segments."""
    rows = kitti_segment_errors(gt, est, lengths)
    if not rows:
        raise TooShortError(f"trajectory shorter than {min(lengths)} m")
    arr = np.array(rows)
    return float(arr[:, 2].mean()), float(arr[:, 3].mean())


def evaluate(gt, est):
    per = rpe_rmse_per_interval(gt, est)
    try:
        trans, rot = kitti_metrics(gt, est)
    except TooShortError:
        trans, rot = float("nan"), float("nan")
    return RpeResult(per, float(np.mean(per)), trans, rot)


def end_point_error(gt, est):
    """Distance between the final poses after aligning the first ones."""
    g = pose_compose(pose_inverse(gt[0]), gt[-1])
    e = pose_compose(pose_inverse(est[0]), est[-1])
    return float(np.linalg.norm(g.translation - e.translation))


# ---------------------------------------------------------------------------- export


def export_trajectory(poses, path):
    return save_kitti_poses(poses, path)


def load_trajectory(path):
    return load_kitti_poses(path)


def export_metrics(results, path):
    """Write ``<path>.json`` and ``<path>.csv`` from an :class:`RpeResult` (or a dict of them)."""
    path = str(path)
    base = path[:-5] if path.endswith(".json") else path
    named = results if isinstance(results, dict) else {"result": results}
    payload = {k: asdict(v) for k, v in named.items()}
    with open(base + ".json", "w") as fh:
        json.dump(payload if isinstance(results, dict) else payload["result"], fh, indent=2, sort_keys=True)
    with open(base + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "overall_rmse", "kitti_trans_pct", "kitti_rot_deg_per_100m", "n_intervals"])
        for k, v in named.items():
            writer.writerow([k, repr(v.overall_rmse), repr(v.kitti_trans_pct), repr(v.kitti_rot_deg_per_100m), len(v.per_interval_rmse)])
    return base + ".json", base + ".csv"


def load_metrics(path):
    with open(path) as fh:
        data = json.load(fh)
    if "per_interval_rmse" in data:
        return RpeResult(**data)
    return {k: RpeResult(**v) for k, v in data.items()}


def export_plot_data(gt, est, path):
    """Per-frame CSV: frame, arc length, step translation / rotation error, absolute position error."""
    _check_pair(gt, est)
    dist = trajectory_distances(gt)
    errs = relative_pose_error(gt, est, 1) if len(gt) > 1 else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "distance", "step_trans_err", "step_rot_err_deg", "position_err"])
        for i in range(len(gt)):
            if i == 0:
                st, sr = 0.0, 0.0
            else:
                st = float(np.linalg.norm(errs[i - 1].translation))
                sr = float(np.degrees(_angle(errs[i - 1].rotation)))
            pe = float(np.linalg.norm(gt[i].translation - est[i].translation))
            writer.writerow([i, repr(float(dist[i])), repr(st), repr(sr), repr(pe)])
    return path
