import subprocess
import sys

from helpers import TINY
from lidarfuse.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lidarfuse.geometry import Pose
from lidarfuse.metrics import export_trajectory
from lidarfuse.synthetic import square_loop_trajectory


def _sets(*items):
    return [a for item in items for a in ("--set", item)]


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["odometry", "--set", "icp.nokey=1"]) == EXIT_USAGE
    assert main(["odometry", "--set", "pipeline.pipeline=icp-qe", "--set", "fusion.mode=inaf"]) == EXIT_USAGE
    assert main(["eval", "--gt", str(tmp_path / "no.txt"), "--est", str(tmp_path / "no.txt")]) == EXIT_USAGE
    assert main(["train", "-c", str(tmp_path / "missing.ini")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_runtime_errors(tmp_path):
    assert main(["odometry", "-o", str(tmp_path)]) == EXIT_RUNTIME  # no checkpoint
    export_trajectory([Pose()] * 3, tmp_path / "a.txt")
    export_trajectory([Pose()] * 4, tmp_path / "b.txt")
    args = ["eval", "-o", str(tmp_path), "--gt", str(tmp_path / "a.txt"), "--est", str(tmp_path / "b.txt")]
    assert main(args) == EXIT_RUNTIME


def test_eval_and_simulate(tmp_path, capsys):
    export_trajectory(square_loop_trajectory(150, side=40.0), tmp_path / "gt.txt")
    gt = str(tmp_path / "gt.txt")
    assert main(["eval", "-o", str(tmp_path / "ev"), "--gt", gt, "--est", gt, "--plot-data"]) == EXIT_OK
    assert "RPE 0 m" in capsys.readouterr().out
    assert (tmp_path / "ev" / "metrics.json").exists() and (tmp_path / "ev" / "plot_data.csv").exists()
    cfg = tmp_path / "run.ini"
    cfg.write_text("[synthetic]\nframes = 3\ntrain_sequences = 0\n")
    assert main(["simulate", "-c", str(cfg), "-o", str(tmp_path / "sim"), "--seed", "2"]) == EXIT_OK
    assert len(list((tmp_path / "sim" / "eval00" / "velodyne").iterdir())) == 3


def test_train_then_odometry(tmp_path):
    base = ["-o", str(tmp_path), *_sets(*TINY, "pipeline.pipeline=icp-qe")]
    assert main(["train", *base]) == EXIT_OK
    assert main(["odometry", *base]) == EXIT_OK
    assert (tmp_path / "eval00" / "trajectory.txt").exists()


def test_console_module():
    proc = subprocess.run([sys.executable, "-m", "lidarfuse.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "slam" in proc.stdout
