import numpy as np
import pytest

from lidarfuse.config import DEFAULTS, Config, load_config, substream
from lidarfuse.exceptions import ConfigError


def test_defaults_are_valid():
    cfg = load_config()
    assert cfg["pipeline"]["pipeline"] == "fused" and cfg["train"]["patience"] == 15
    assert cfg.values == DEFAULTS and cfg.values is not DEFAULTS


def test_overrides_are_typed():
    cfg = load_config(overrides=["icp.max_iterations=7", "train.lr0=2e-3", "fusion.mode=inaf"])
    assert cfg["icp"]["max_iterations"] == 7 and isinstance(cfg["icp"]["max_iterations"], int)
    assert cfg["train"]["lr0"] == 2e-3 and cfg["fusion"]["mode"] == "inaf"


@pytest.mark.parametrize(
    "override",
    ["nosection.key=1", "icp.nokey=1", "icp.max_iterations=abc", "icp.max_iterations", "max_iterations=3"],
)
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


@pytest.mark.parametrize(
    "override",
    [
        ["pipeline.pipeline=bogus"],
        ["fusion.mode=bogus"],
        ["pipeline.pipeline=icp-qe", "fusion.mode=inaf"],
        ["pipeline.adapt_every=-1"],
        ["input.kind=kitti", "input.path=/does/not/exist"],
        ["dlpe.feature_dim=30"],
        ["train.alpha=1.5"],
    ],
)
def test_validation(override):
    with pytest.raises(ConfigError):
        load_config(overrides=override)


def test_file_round_trip(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[pipeline]\npipeline = dl-pe\nseed = 3\n\n[icp]\ngate = 0.5\n")
    cfg = load_config(path, ["pipeline.seed=4"])
    assert cfg["pipeline"]["pipeline"] == "dl-pe" and cfg.seed == 4 and cfg["icp"]["gate"] == 0.5
    (tmp_path / "dump.ini").write_text(cfg.to_text())
    again = load_config(tmp_path / "dump.ini")
    assert again.values == cfg.values and again.digest() == cfg.digest()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    (tmp_path / "bad.ini").write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")


def test_substreams():
    assert substream(0, "data") == substream(0, "data")
    seeds = {substream(s, n) for s in (0, 1) for n in ("data", "init", "shuffle", "tune")}
    assert len(seeds) == 8
    a = np.random.default_rng(substream(5, "init")).normal(size=3)
    b = np.random.default_rng(substream(5, "init")).normal(size=3)
    np.testing.assert_array_equal(a, b)
    assert isinstance(Config().seed, int)
