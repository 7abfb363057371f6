import filecmp
import json
import os

import numpy as np
import pytest

from helpers import tiny_config
from lidarfuse import pipeline
from lidarfuse.exceptions import CheckpointMissingError
from lidarfuse.fusion import fuse_direct, load_weight_mask
from lidarfuse.geometry import Pose, rot_z
from lidarfuse.icp import prepare_cloud
from lidarfuse.metrics import end_point_error
from lidarfuse.pointcloud import load_kitti_poses
from lidarfuse.synthetic import SensorSpec, generate_world, simulate_scan, square_loop_trajectory


def test_icp_qe_trajectory(tmp_path):
    cfg = tiny_config(tmp_path, "pipeline.pipeline=icp-qe", "synthetic.trajectory=straight")
    (out,) = pipeline.run_odometry(cfg, train_first=True)
    poses = load_kitti_poses(tmp_path / out.name / "trajectory.txt")
    assert len(poses) == cfg["synthetic"]["frames"]
    assert os.path.exists(tmp_path / "model.ckpt")
    manifest = json.load(open(tmp_path / "manifest.json"))
    assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64 and "numpy" in manifest["versions"]
    # a second run reloads the checkpoint and reproduces the trajectory
    (again,) = pipeline.run_odometry(cfg)
    for p, q in zip(again.poses, out.poses):
        assert p.allclose(q, atol=0)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointMissingError):
        pipeline.run_odometry(tiny_config(tmp_path))


@pytest.fixture(scope="module")
def inaf_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("inaf")
    cfg = tiny_config(out, "fusion.mode=inaf")
    return cfg, pipeline.run_train(cfg)


def test_inaf_weight_masks(inaf_model, tmp_path):
    cfg, model = inaf_model
    cfg = tiny_config(tmp_path, "fusion.mode=inaf")
    masks = {}
    for kind in ("straight", "square"):
        cfg.set("synthetic", "trajectory", kind)
        cfg.set("synthetic", "side", "6.0")
        (out,) = pipeline.run_odometry(cfg, model=model)
        rows = load_weight_mask(tmp_path / out.name / "weights.csv")
        # one row per predicted frame (every scan after the first)
        assert len(rows) == cfg["synthetic"]["frames"] - 1 == len(out.twists)
        assert np.all((rows > 0) & (rows < 1))
        masks[kind] = rows.mean(axis=0)
    gap = float(np.linalg.norm(masks["straight"] - masks["square"]))
    print(f"mean weight-mask L2 distance, straight vs turning: {gap:.3e}")
    assert gap > 0


def test_inaf_deterministic(inaf_model, tmp_path):
    cfg, model = inaf_model
    for run in ("a", "b"):
        c = tiny_config(tmp_path / run, "fusion.mode=inaf")
        pipeline.run_odometry(c, model=model)
    for name in ("trajectory.txt", "weights.csv"):
        assert filecmp.cmp(tmp_path / "a" / "eval00" / name, tmp_path / "b" / "eval00" / name, shallow=False)


def test_direct_fusion_path(tmp_path):
    cfg = tiny_config(tmp_path)
    model = pipeline.run_train(cfg)
    feats = pipeline.extract_features(pipeline.load_input(cfg)[0], cfg)
    twists, weights = pipeline.predict_sequence(model, feats)
    assert weights == []
    net = model.network
    x = pipeline.network_inputs(feats, model.mu_e, model.sigma_e)
    import torch

    with torch.no_grad():
        a, b = net.encode(x["dq"], x["images"])
        y = net.predictor(torch.as_tensor(fuse_direct(a.numpy(), b.numpy()))[None])[0] * net.y_scale + net.y_shift
    np.testing.assert_array_equal(twists, y.numpy())


def test_slam_without_loops(tmp_path):
    cfg = tiny_config(tmp_path, "pipeline.pipeline=icp-qe", "synthetic.trajectory=straight")
    (out,) = pipeline.run_slam(cfg, train_first=True)
    assert not out.loops and len(out.optimized) == len(out.raw) == cfg["synthetic"]["frames"]
    for p, q in zip(out.optimized, out.raw):
        assert p.allclose(q, atol=1e-9)
    assert os.path.exists(tmp_path / out.name / "trajectory_optimized.txt")


def test_close_loops_square(tmp_path):
    cfg = tiny_config(tmp_path)
    gt = square_loop_trajectory(300, side=40.0)
    world = generate_world(4, gt)
    rng = np.random.default_rng(1)
    prepared = [prepare_cloud(simulate_scan(world, p, SensorSpec(noise_sigma=0.01), rng)) for p in gt]
    drift = Pose(rot_z(0.001), [0.005, 0.0, 0.0])
    raw = [gt[0]]
    for a, b in zip(gt[:-1], gt[1:]):
        raw.append(raw[-1] @ (a.inverse() @ b) @ drift)
    graph, loops, optimized = pipeline.close_loops(raw, prepared, cfg)
    assert loops and len(optimized) == len(raw)
    assert end_point_error(gt, optimized) < end_point_error(gt, raw)


def test_eval_simulate_tune(tmp_path):
    cfg = tiny_config(tmp_path / "eval")
    gt = square_loop_trajectory(150, side=40.0)
    res = pipeline.run_eval(cfg, gt, gt, plot_data=True)
    assert res.overall_rmse == 0.0 and res.kitti_trans_pct == 0.0 and res.kitti_rot_deg_per_100m == 0.0
    assert os.path.exists(tmp_path / "eval" / "plot_data.csv")

    for run in ("a", "b"):
        pipeline.run_simulate(tiny_config(tmp_path / run, "synthetic.frames=4", "synthetic.train_sequences=1"))
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b", ignore=["manifest.json", "config.ini"])  # both record the output path or time
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files
        assert not sub.subdirs["velodyne"].diff_files

    tcfg = tiny_config(tmp_path / "tune", "tune.objective=quadratic")
    result = pipeline.run_tune(tcfg)
    best = min(result.evaluations, key=lambda r: r[3])
    assert result.best_loss == best[3] and result.best_config == best[1]
    assert os.path.exists(tmp_path / "tune" / "best.json")
