import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarfuse.exceptions import BadDeltaError, EmptyError, LengthMismatchError, TooShortError
from lidarfuse.geometry import Pose, rot_z, se3_exp
from lidarfuse.metrics import (
    RpeResult,
    evaluate,
    export_metrics,
    export_trajectory,
    kitti_metrics,
    load_metrics,
    load_trajectory,
    relative_pose_error,
    rpe_rmse,
    rpe_rmse_overall,
    rpe_rmse_per_interval,
)


def _line(xs):
    return [Pose(np.eye(3), [x, 0.0, 0.0]) for x in xs]


def _random_traj(seed, n=12):
    rng = np.random.default_rng(seed)
    poses = [se3_exp(rng.normal(0, 1, 6))]
    for _ in range(n - 1):
        poses.append(poses[-1] @ se3_exp(rng.normal(0, 0.3, 6)))
    return poses


def test_rpe_identity_and_errors():
    gt = _random_traj(0)
    for e in relative_pose_error(gt, gt, 3):
        assert e.allclose(Pose(), atol=1e-12)
    with pytest.raises(LengthMismatchError):
        relative_pose_error(gt, gt[:-1])
    with pytest.raises(BadDeltaError):
        relative_pose_error(gt, gt, len(gt))
    with pytest.raises(EmptyError):
        rpe_rmse([])


@given(st.integers(0, 10_000))
def test_rpe_left_invariant(seed):
    gt, est = _random_traj(seed), _random_traj(seed + 1)
    offset = se3_exp(np.random.default_rng(seed).normal(0, 2, 6))
    moved = [offset @ p for p in est]
    for a, b in zip(relative_pose_error(gt, est, 2), relative_pose_error(gt, moved, 2)):
        assert np.max(np.abs(a.as_matrix() - b.as_matrix())) < 1e-9


def test_rpe_hand_cases():
    gt, est = _line([0, 1, 2]), _line([0, 1.1, 2.2])
    errs = relative_pose_error(gt, est, 1)
    assert len(errs) == 2
    for e in errs:
        assert abs(np.linalg.norm(e.translation) - 0.1) < 1e-12
    assert abs(rpe_rmse([Pose(np.eye(3), [0.3, 0, 0]), Pose(np.eye(3), [0, 0.4, 0])]) - np.sqrt(0.125)) < 1e-15
    assert rpe_rmse([Pose(), Pose()]) == 0.0
    # delta 1: rmse 0.1, delta 2: single error 0.2
    assert abs(rpe_rmse_overall(gt, est) - 0.15) < 1e-12
    res = evaluate(gt, est)
    assert abs(res.overall_rmse - np.mean(res.per_interval_rmse)) < 1e-12


@given(st.integers(0, 10_000), st.floats(1.01, 10.0))
def test_rpe_rmse_monotone_in_scale(seed, c):
    t = np.random.default_rng(seed).normal(0, 1, (5, 3))
    base = rpe_rmse([Pose(np.eye(3), v) for v in t])
    assert rpe_rmse([Pose(np.eye(3), c * v) for v in t]) > base


def _straight(n=1001):
    return _line(np.arange(n, dtype=float))


def test_kitti_scale_error():
    gt = _straight()
    est = _line(1.01 * np.arange(len(gt), dtype=float))
    trans, rot = kitti_metrics(gt, est)
    assert abs(trans - 1.0) < 0.05 and rot < 1e-9


def test_kitti_yaw_drift():
    gt = _straight()
    step = Pose(rot_z(np.radians(0.005)), [1.0, 0.0, 0.0])  # 0.005 deg per metre
    est = [Pose()]
    for _ in range(len(gt) - 1):
        est.append(est[-1] @ step)
    trans, rot = kitti_metrics(gt, est)
    assert abs(rot - 0.5) < 0.025


def test_kitti_self_and_short():
    gt = _random_traj(0, 400)
    assert kitti_metrics(_straight(), _straight()) == (0.0, 0.0)
    with pytest.raises(TooShortError):
        kitti_metrics(_line([0, 1, 2]), _line([0, 1, 2]))
    res = evaluate(_line([0, 1, 2]), _line([0, 1, 2]))
    assert np.isnan(res.kitti_trans_pct) and res.overall_rmse == 0.0
    assert len(rpe_rmse_per_interval(gt[:20], gt[:20])) == 19


def test_trajectory_files(tmp_path):
    export_trajectory([Pose()] * 3, tmp_path / "id.txt")
    assert open(tmp_path / "id.txt").read().splitlines() == ["1 0 0 0 0 1 0 0 0 0 1 0"] * 3
    traj = _random_traj(5)
    export_trajectory(traj, tmp_path / "a.txt")
    back = load_trajectory(tmp_path / "a.txt")
    for p, q in zip(back, traj):
        assert p.allclose(q, atol=1e-9)
    export_trajectory(back, tmp_path / "b.txt")
    export_trajectory(load_trajectory(tmp_path / "b.txt"), tmp_path / "c.txt")
    assert open(tmp_path / "b.txt").read() == open(tmp_path / "c.txt").read()


def test_metrics_files(tmp_path):
    res = evaluate(_straight(201), _line(1.01 * np.arange(201.0)))
    js, cs = export_metrics(res, tmp_path / "m")
    data = json.load(open(js))
    assert set(data) == {"per_interval_rmse", "overall_rmse", "kitti_trans_pct", "kitti_rot_deg_per_100m"}
    back = load_metrics(js)
    assert isinstance(back, RpeResult)
    assert abs(back.overall_rmse - res.overall_rmse) < 1e-9
    assert open(cs).readline().startswith("name,overall_rmse")
