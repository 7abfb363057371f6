"""Sectioned ``key = value`` run configuration with typed defaults and overrides.

Example::

    [pipeline]
    pipeline = fused
    seed = 7

    [fusion]
    mode = inaf

Overrides use ``section.key=value`` (``--set`` on the command line).
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import os
import zlib

import numpy as np

from .exceptions import ConfigError

PIPELINES = ("icp-qe", "dl-pe", "fused")
INPUT_KINDS = ("synthetic", "kitti", "directory")
TRAJECTORIES = ("straight", "square", "random")

DEFAULTS = {
    "pipeline": {
        "pipeline": "fused",
        "seed": 0,
        "output": "out",
        "checkpoint": "",
        "adapt_every": 1,
    },
    "input": {
        "kind": "synthetic",
        "path": "",
        "poses": "",
        "calib": "",
        "sequences": "",
        "limit": 0,
    },
    "synthetic": {
        "trajectory": "square",
        "frames": 500,
        "sequences": 1,
        "train_trajectory": "random",
        "train_frames": 150,
        "train_sequences": 5,
        "step": 0.6,
        "side": 75.0,
        "laps": 1.0,
        "noise_sigma": 0.01,
        "n_azimuth": 360,
        "n_rings": 16,
        "max_range": 80.0,
    },
    "icp": {
        "max_iterations": 50,
        "tol": 1e-4,
        "gate": 1.0,
        "voxel": 0.2,
        "method": "point_to_plane",
    },
    "dlpe": {
        "image_h": 16,
        "image_w": 360,
        "vfov_deg_min": -16.0,
        "vfov_deg_max": 16.0,
        "feature_dim": 128,
    },
    "fusion": {
        "mode": "direct",
        "heads": 4,
        "ema_decay": 0.99,
        "adapt_lr": 1e-3,
        "hidden_dim": 16,
    },
    "train": {
        "lr0": 0.001,
        "decay_factor": 0.9,
        "decay_steps": 10000,
        "alpha": 0.8,
        "patience": 15,
        "split": 0.8,
        "seed": -1,
        "epochs": 200,
        "batch": 1,
        "window": 10,
        "rotation_weight": 10.0,
        "hidden_dim": 128,
    },
    "tune": {
        "R": 27,
        "eta": 3,
        "objective": "train",
    },
    "backend": {
        "rings": 20,
        "sectors": 60,
        "max_radius": 80.0,
        "sc_threshold": 0.2,
        "exclusion": 50,
        "lm_max_iters": 50,
        "lm_tol": 1e-10,
    },
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw).strip()


class Config:
    """Typed view of the run configuration; ``cfg["icp"]["max_iterations"]`` etc."""

    def __init__(self, values=None, explicit=None):
        self.values = copy.deepcopy(DEFAULTS) if values is None else values
        self.explicit = set(explicit or ())

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section, key, raw):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _coerce(section, key, raw)
        self.explicit.add((section, key))

    def override(self, assignment):
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key.strip(), value.strip())

    @property
    def seed(self):
        return self["pipeline"]["seed"]

    @property
    def output(self):
        return self["pipeline"]["output"]

    def to_text(self):
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def validate(self):
        p = self["pipeline"]
        if p["pipeline"] not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        mode = self["fusion"]["mode"]
        if mode not in ("direct", "attention", "inaf"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        if p["pipeline"] != "fused" and ("fusion", "mode") in self.explicit and mode != "direct":
            raise ConfigError("a fusion mode only applies to the fused pipeline")
        if p["adapt_every"] < 0:
            raise ConfigError("adapt_every must be non-negative (0 disables adaptation)")
        src = self["input"]
        if src["kind"] not in INPUT_KINDS:
            raise ConfigError(f"input.kind must be one of {INPUT_KINDS}")
        if src["kind"] != "synthetic":
            if not src["path"] or not os.path.exists(src["path"]):
                raise ConfigError(f"input path {src['path']!r} does not exist")
            for key in ("poses", "calib"):
                if src[key] and not os.path.exists(src[key]):
                    raise ConfigError(f"input.{key} {src[key]!r} does not exist")
        if self["synthetic"]["trajectory"] not in TRAJECTORIES:
            raise ConfigError(f"synthetic.trajectory must be one of {TRAJECTORIES}")
        if self["synthetic"]["train_trajectory"] not in TRAJECTORIES:
            raise ConfigError(f"synthetic.train_trajectory must be one of {TRAJECTORIES}")
        if self["dlpe"]["feature_dim"] % self["fusion"]["heads"]:
            raise ConfigError("dlpe.feature_dim must be divisible by fusion.heads")
        if not 0.0 < self["train"]["alpha"] < 1.0 or not 0.0 < self["train"]["split"] < 1.0:
            raise ConfigError("train.alpha and train.split must lie in (0, 1)")
        return self


def load_config(path=None, overrides=(), validate=True):
    cfg = Config()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for item in overrides:
        cfg.override(item)
    return cfg.validate() if validate else cfg


def substream(seed, name):
    """Integer seed of the named random sub-stream (``data``, ``init``, ``shuffle``, ``tune``...)."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]).generate_state(1)[0])
