"""End-to-end runs: feature extraction, training, prediction, SLAM back end and evaluation.

Three odometry pipelines share one recurrent predictor:

``icp-qe``
    frame-to-frame ICP, dual-quaternion encoding of the ICP estimate;
``dl-pe``
    a CNN over pairs of cylindrical range images;
``fused``
    both branches combined by ``direct``, ``attention`` or ``inaf`` fusion.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
import types
from dataclasses import dataclass, field

import numpy as np
import scipy
import sklearn
import torch
from torch import nn

from . import __version__
from .backend import PoseGraph, detect_loop, export_graph, loop_edge_from_match, optimize_graph, scan_context
from .config import substream
from .encoders import dual_quaternion_inputs
from .exceptions import CheckpointMissingError, ConfigError, LidarFuseError
from .fusion import (
    SIGMA_FLOOR,
    FusionModule,
    InafState,
    emit_weight_mask,
    error_vector,
    frozen_pose_error,
    fuse_inaf,
    inaf_adapt,
    inaf_error_gradient,
    inaf_weights,
    open_sigmoid,
)
from .geometry import Pose, pose_compose, pose_inverse, relative_pose, se3_exp, se3_log
from .icp import IcpConfig, icp_align, prepare_cloud, registration_losses, voxel_representatives
from .metrics import evaluate, export_metrics, export_plot_data, load_trajectory
from .networks import DTYPE, CylindricalCNN, DualQuaternionMLP, RecurrentPredictor, init_parameters, set_flat_parameters
from .odometry import TrainConfig, accumulate_trajectory, hyperband_plan, hyperband_run, load_checkpoint, save_checkpoint, train
from .pointcloud import load_kitti_sequence, save_kitti_bin, save_kitti_poses
from .projection import cylindrical_project
from .synthetic import (
    SyntheticWorldConfig,
    random_trajectory,
    square_loop_trajectory,
    straight_trajectory,
    synthesize_world,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
SCALE_FLOOR = 1e-3


# -------------------------------------------------------------------------- inputs


def _trajectory(kind, frames, cfg, rng):
    s = cfg["synthetic"]
    if kind == "straight":
        return straight_trajectory(frames, s["step"])
    if kind == "square":
        return square_loop_trajectory(frames, s["side"], laps=s["laps"])
    return random_trajectory(rng, frames)


def synthetic_sequences(cfg, purpose="eval"):
    """Synthetic sequences for evaluation (``[synthetic] trajectory``) or training (``train_trajectory``)."""
    s = cfg["synthetic"]
    if purpose == "train":
        kind, count, frames = s["train_trajectory"], s["train_sequences"], s["train_frames"]
    else:
        kind, count, frames = s["trajectory"], s["sequences"], s["frames"]
    out = []
    for k in range(count):
        world_seed = substream(cfg.seed, f"data/{purpose}/{k}")
        traj = _trajectory(kind, frames, cfg, np.random.default_rng(world_seed))
        world_cfg = SyntheticWorldConfig(
            seed=world_seed,
            noise_sigma=s["noise_sigma"],
            n_azimuth=s["n_azimuth"],
            n_rings=s["n_rings"],
            max_range=s["max_range"],
        )
        seq = synthesize_world(world_seed, traj, config=world_cfg)
        seq.meta["name"] = f"{purpose}{k:02d}"
        seq.meta["world_config"] = world_cfg
        out.append(seq)
    return out


def _sequence_dirs(root, selection):
    if os.path.isdir(os.path.join(root, "velodyne")):
        return [root]
    names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d, "velodyne")))
    if selection:
        wanted = [x.strip() for x in selection.split(",") if x.strip()]
        missing = sorted(set(wanted) - set(names))
        if missing:
            raise ConfigError(f"sequences not found under {root}: {missing}")
        names = wanted
    if not names:
        raise ConfigError(f"no sequence directories under {root}")
    return [os.path.join(root, d) for d in names]


def load_directory_sequence(path, limit=None):
    poses = os.path.join(path, "poses.txt")
    seq = load_kitti_sequence(os.path.join(path, "velodyne"), poses if os.path.exists(poses) else None, None, limit)
    times = os.path.join(path, "times.txt")
    if os.path.exists(times):
        seq.timestamps = np.loadtxt(times, ndmin=1)[: len(seq)]
    seq.meta["name"] = os.path.basename(os.path.normpath(path))
    return seq


def load_input(cfg, purpose="eval"):
    """Scan sequences named by the ``[input]`` section."""
    src = cfg["input"]
    limit = src["limit"] or None
    if src["kind"] == "synthetic":
        return synthetic_sequences(cfg, purpose)
    if src["kind"] == "kitti":
        seq = load_kitti_sequence(src["path"], src["poses"] or None, src["calib"] or None, limit)
        seq.meta["name"] = os.path.basename(os.path.normpath(src["path"]))
        return [seq]
    return [load_directory_sequence(d, limit) for d in _sequence_dirs(src["path"], src["sequences"])]


# ------------------------------------------------------------------------ features


@dataclass(eq=False)
class SequenceFeatures:
    """Per-frame branch inputs for frames ``1..n-1`` of one sequence."""

    name: str
    dq: np.ndarray
    images: np.ndarray | None
    errors: np.ndarray
    icp_relative: list
    prepared: list
    targets: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    ground_truth: list | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.dq)


def icp_config(cfg):
    c = cfg["icp"]
    return IcpConfig(
        max_iterations=c["max_iterations"],
        convergence_tol=c["tol"],
        max_correspondence_dist=c["gate"],
        downsample_voxel=c["voxel"],
        method=c["method"],
    )


def icp_branch(prepared, icp_cfg, timestamps=None):
    """Frame-to-frame ICP with a constant-velocity initial guess.

    Returns the relative poses (frame ``t`` in frame ``t-1``) and the
    ``(pt2pt, pt2pl, pl2pl, rate)`` error vectors.
    """
    rel, errors = [], []
    tracker = types.SimpleNamespace(last_error=None)
    guess = Pose()
    for t in range(1, len(prepared)):
        dt = 1.0 if timestamps is None else float(timestamps[t] - timestamps[t - 1]) or 1.0
        try:
            res = icp_align(prepared[t], prepared[t - 1], guess, icp_cfg)
            pose, losses = res.transform, res.final_losses
        except LidarFuseError as exc:
            logger.warning("ICP failed at frame %d (%s); keeping the motion prior", t, exc)
            pose = guess
            losses = registration_losses(pose, prepared[t].cloud, prepared[t - 1], icp_cfg.max_correspondence_dist * 5)
        rel.append(pose)
        errors.append(error_vector(losses, tracker, dt))
        guess = pose
    return rel, np.array(errors).reshape(-1, 4)


def branch_images(prepared, cfg):
    d = cfg["dlpe"]
    imgs = [
        cylindrical_project(p.cloud, d["image_h"], d["image_w"], (d["vfov_deg_min"], d["vfov_deg_max"])).values
        for p in prepared
    ]
    return np.stack([np.concatenate([imgs[t - 1], imgs[t]], axis=0) for t in range(1, len(imgs))])


def extract_features(seq, cfg):
    """Run both branches' preprocessing over one :class:`ScanSequence`."""
    if len(seq) < 2:
        raise ConfigError(f"sequence {seq.meta.get('name')} has fewer than two scans")
    prepared = [prepare_cloud(s) for s in seq.scans]
    rel, errors = icp_branch(prepared, icp_config(cfg), seq.timestamps)
    images = branch_images(prepared, cfg) if cfg["pipeline"]["pipeline"] != "icp-qe" else None
    targets = None
    gt = None
    if seq.ground_truth is not None:
        gt = [pose_compose(pose_inverse(seq.ground_truth[0]), p) for p in seq.ground_truth]
        targets = np.array([se3_log(relative_pose(gt[t - 1], gt[t])).as_vector() for t in range(1, len(gt))])
    return SequenceFeatures(
        seq.meta.get("name", "seq"),
        dual_quaternion_inputs(rel),
        images,
        errors,
        rel,
        prepared,
        targets,
        seq.timestamps,
        gt,
        dict(seq.meta),
    )


# ------------------------------------------------------------------------- network


class OdometryNetwork(nn.Module):
    """Branch encoders, fusion and recurrent predictor as one differentiable model."""

    # per-channel input scaling for (u, v, z, range, intensity, nx, ny, nz) of both frames
    CHANNEL_SCALE = (1.0, 1.0, 0.1, 1.0 / 80.0, 1.0, 1.0, 1.0, 1.0)

    def __init__(self, pipeline="fused", fusion="direct", feature_dim=128, heads=4, hidden_dim=128, fusion_hidden=16):
        super().__init__()
        self.pipeline = pipeline
        self.fusion_mode = fusion if pipeline == "fused" else "direct"
        self.feature_dim = feature_dim
        self.heads = heads
        self.hidden_dim = hidden_dim
        self.fusion_hidden = fusion_hidden
        self.dq_encoder = DualQuaternionMLP(feature_dim) if pipeline != "dl-pe" else None
        self.cnn = CylindricalCNN(16, (16, 32, 64), feature_dim) if pipeline != "icp-qe" else None
        self.fusion = (
            FusionModule(self.fusion_mode, feature_dim, heads, 4, fusion_hidden) if pipeline == "fused" else None
        )
        in_dim = 2 * feature_dim if pipeline == "fused" else feature_dim
        self.predictor = RecurrentPredictor(in_dim, hidden_dim)
        scale = torch.tensor(self.CHANNEL_SCALE * 2, dtype=DTYPE).reshape(1, 16, 1, 1)
        self.register_buffer("channel_scale", scale, persistent=False)
        # standardisation of the dual-quaternion inputs and of the twist outputs
        self.register_buffer("dq_shift", torch.zeros(8, dtype=DTYPE), persistent=False)
        self.register_buffer("dq_scale", torch.ones(8, dtype=DTYPE), persistent=False)
        self.register_buffer("y_shift", torch.zeros(6, dtype=DTYPE), persistent=False)
        self.register_buffer("y_scale", torch.ones(6, dtype=DTYPE), persistent=False)

    def architecture(self):
        return {
            "pipeline": self.pipeline,
            "fusion": self.fusion_mode,
            "feature_dim": self.feature_dim,
            "heads": self.heads,
            "hidden_dim": self.hidden_dim,
            "fusion_hidden": self.fusion_hidden,
        }

    @classmethod
    def from_architecture(cls, arch):
        return cls(
            arch["pipeline"], arch["fusion"], arch["feature_dim"], arch["heads"], arch["hidden_dim"], arch["fusion_hidden"]
        )

    def initialize(self, seed):
        init_parameters(self, seed)
        if self.fusion is not None and self.fusion.weight_net is not None:
            with torch.no_grad():
                self.fusion.weight_net.fc2.weight.zero_()
        return self

    def set_scaling(self, dq_shift, dq_scale, y_shift, y_scale):
        for name, value in (("dq_shift", dq_shift), ("dq_scale", dq_scale), ("y_shift", y_shift), ("y_scale", y_scale)):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(value, dtype=float), dtype=DTYPE))
        return self

    def scaling(self):
        return {k: getattr(self, k).numpy().tolist() for k in ("dq_shift", "dq_scale", "y_shift", "y_scale")}

    def encode(self, dq, images):
        a = self.dq_encoder((dq - self.dq_shift) / self.dq_scale) if self.dq_encoder is not None else None
        b = self.cnn(images * self.channel_scale) if self.cnn is not None else None
        return a, b

    def fuse(self, a, b, e_norm=None):
        if self.pipeline == "icp-qe":
            return a
        if self.pipeline == "dl-pe":
            return b
        return self.fusion(a, b, e_norm)

    def forward(self, inputs):
        """``inputs`` maps ``dq`` (T, 8), ``images`` (T, 16, h, w) and ``e_norm`` (T, 4) to tensors."""
        a, b = self.encode(inputs.get("dq"), inputs.get("images"))
        z = self.fuse(a, b, inputs.get("e_norm"))
        return self.predictor(z[None])[0] * self.y_scale + self.y_shift

    def step(self, z, h):
        """One recurrent update on fused features ``z`` (batch, D); returns the twist and new state."""
        y, h = self.predictor.step(z, h)
        return y * self.y_scale + self.y_shift, h


def network_inputs(feats, mu=None, sigma=None):
    x = {"dq": torch.as_tensor(feats.dq, dtype=DTYPE)}
    if feats.images is not None:
        x["images"] = torch.as_tensor(feats.images, dtype=DTYPE)
    if mu is not None:
        x["e_norm"] = torch.as_tensor((feats.errors - mu) / sigma, dtype=DTYPE)
    return x


def error_statistics(features):
    e = np.concatenate([f.errors for f in features])
    return e.mean(axis=0), np.maximum(e.std(axis=0), SIGMA_FLOOR)


def build_network(cfg):
    return OdometryNetwork(
        cfg["pipeline"]["pipeline"],
        cfg["fusion"]["mode"],
        cfg["dlpe"]["feature_dim"],
        cfg["fusion"]["heads"],
        cfg["train"]["hidden_dim"],
        cfg["fusion"]["hidden_dim"],
    )


def train_config(cfg, **changes):
    t = cfg["train"]
    seed = t["seed"] if t["seed"] >= 0 else substream(cfg.seed, "shuffle")
    values = dict(
        lr0=t["lr0"],
        decay_factor=t["decay_factor"],
        decay_steps=t["decay_steps"],
        alpha=t["alpha"],
        patience=t["patience"],
        split=t["split"],
        seed=seed,
        batch_size=t["batch"],
        max_epochs=t["epochs"],
        rotation_weight=t["rotation_weight"],
        window=t["window"],
    )
    values.update(changes)
    return TrainConfig(**values)


@dataclass
class TrainedModel:
    network: OdometryNetwork
    mu_e: np.ndarray
    sigma_e: np.ndarray
    history: object = None
    metadata: dict = field(default_factory=dict)

    def save(self, path):
        meta = dict(self.metadata)
        meta.update(mu_e=self.mu_e.tolist(), sigma_e=self.sigma_e.tolist(), scaling=self.network.scaling())
        return save_checkpoint(path, self.network, self.network.architecture(), meta)

    @classmethod
    def load(cls, path):
        arch, params, meta = load_checkpoint(path)
        net = OdometryNetwork.from_architecture(arch)
        set_flat_parameters(net, params)
        if "scaling" in meta:
            s = meta["scaling"]
            net.set_scaling(s["dq_shift"], s["dq_scale"], s["y_shift"], s["y_scale"])
        net.eval()
        return cls(net, np.array(meta["mu_e"]), np.array(meta["sigma_e"]), None, meta)


def fit_network(cfg, features, train_cfg=None, network=None):
    """Train an :class:`OdometryNetwork` on extracted features (at least two sequences)."""
    train_cfg = train_cfg or train_config(cfg)
    usable = [f for f in features if f.targets is not None]
    if len(usable) < 2:
        raise ConfigError("training needs at least two sequences with ground truth")
    mu, sigma = error_statistics(usable)
    net = network or build_network(cfg).initialize(substream(cfg.seed, "init"))
    dq = np.concatenate([f.dq for f in usable])
    y = np.concatenate([f.targets for f in usable])
    net.set_scaling(dq.mean(axis=0), np.maximum(dq.std(axis=0), SCALE_FLOOR), y.mean(axis=0), np.maximum(y.std(axis=0), SCALE_FLOOR))
    data = [(network_inputs(f, mu, sigma), f.targets) for f in usable]
    net, hist = train(net, data, train_cfg)
    net.eval()
    meta = {
        "best_val": hist.best_val,
        "best_epoch": hist.best_epoch,
        "seed": cfg.seed,
        "train_sequences": [usable[i].name for i in hist.train_indices],
        "val_sequences": [usable[i].name for i in hist.val_indices],
    }
    return TrainedModel(net, mu, sigma, hist, meta)


# ---------------------------------------------------------------------- prediction


@dataclass
class OdometryOutput:
    name: str
    poses: list
    twists: np.ndarray
    weights: list
    features: SequenceFeatures


def _feedback_source(prepared, voxel):
    sel = voxel_representatives(prepared.points, voxel)
    return prepared.cloud.select(sel)


def predict_sequence(model, feats, adapt_every=1, adapt_lr=1e-3, ema_decay=0.99, icp_cfg=None):
    """Twists for every frame pair; INAF models adapt their weight network online.

    Returns ``(twists, weight_history)``; the history is empty unless the
    network uses INAF fusion.
    """
    net = model.network
    icp_cfg = icp_cfg or IcpConfig()
    x = network_inputs(feats, model.mu_e, model.sigma_e)
    if net.pipeline != "fused" or net.fusion_mode != "inaf":
        with torch.no_grad():
            return net(x).numpy(), []
    with torch.no_grad():
        a_all, b_all = net.encode(x["dq"], x.get("images"))
    a_all, b_all = a_all.numpy(), b_all.numpy()
    state = InafState(
        net.fusion.weight_net.__class__(4, net.feature_dim, net.fusion_hidden),
        model.mu_e.copy(),
        model.sigma_e.copy(),
        ema_decay,
    )
    state.weight_net.load_state_dict(net.fusion.weight_net.state_dict())
    h = torch.zeros(1, net.predictor.hidden_dim, dtype=DTYPE)
    twists, history = [], []
    for t in range(len(feats)):
        a, b = a_all[t], b_all[t]
        w = inaf_weights(feats.errors[t], state)
        z = fuse_inaf(a, b, w)

        def head(zz, h=h):
            y, _ = net.step(zz[None], h)
            return y[0]

        if adapt_every and t % adapt_every == 0:
            with torch.no_grad():
                y0 = head(torch.as_tensor(z, dtype=DTYPE)).numpy()
            source = _feedback_source(feats.prepared[t + 1], icp_cfg.downsample_voxel)
            error_fn = frozen_pose_error(source, feats.prepared[t].cloud, se3_exp(y0), icp_cfg.max_correspondence_dist)
            try:
                grad = inaf_error_gradient(error_fn, z, head)
                state = inaf_adapt(state, grad, adapt_lr, a, b)
                with torch.no_grad():
                    w = open_sigmoid(state.weight_net(torch.as_tensor(state.last_input, dtype=DTYPE))).numpy()
                z = fuse_inaf(a, b, w)
            except LidarFuseError as exc:
                logger.warning("INAF adaptation skipped at frame %d: %s", t, exc)
        with torch.no_grad():
            y, h = net.step(torch.as_tensor(z, dtype=DTYPE)[None], h)
        twists.append(y[0].numpy())
        history.append(w)
    return np.array(twists).reshape(-1, 6), history


def odometry_for_sequence(model, feats, cfg):
    twists, weights = predict_sequence(
        model,
        feats,
        cfg["pipeline"]["adapt_every"],
        cfg["fusion"]["adapt_lr"],
        cfg["fusion"]["ema_decay"],
        icp_config(cfg),
    )
    return OdometryOutput(feats.name, accumulate_trajectory(twists), twists, weights, feats)


# ------------------------------------------------------------------------- backend


@dataclass
class SlamOutput:
    name: str
    raw: list
    optimized: list
    loops: list
    graph: PoseGraph


def close_loops(poses, prepared, cfg):
    """Scan-context loop detection, ICP loop edges and pose-graph optimisation."""
    b = cfg["backend"]
    descs = [scan_context(p.cloud, b["rings"], b["sectors"], b["max_radius"]) for p in prepared]
    graph = PoseGraph.from_odometry(poses)
    loops = []
    for i in range(len(descs)):
        match = detect_loop(descs[i], descs[:i], b["exclusion"], b["sc_threshold"])
        if match is None:
            continue
        z = loop_edge_from_match(prepared[i], prepared[match.index], match.shift, b["sectors"])
        if z is None:
            continue
        graph.add_loop(match.index, i, z)
        loops.append((match.index, i, match.shift, match.distance))
    if not loops:
        graph.report = None
        return graph, loops, list(poses)
    opt = optimize_graph(graph, b["lm_max_iters"], b["lm_tol"])
    return opt, loops, opt.nodes


def slam_for_sequence(odo, cfg):
    graph, loops, optimized = close_loops(odo.poses, odo.features.prepared, cfg)
    return SlamOutput(odo.name, odo.poses, optimized, loops, graph)


# ------------------------------------------------------------------------ artifacts


def write_manifest(out_dir, command, cfg, extra=None):
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "lidarfuse": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "torch": torch.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg.to_text())
    return manifest


def _write_history(path, hist):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(zip(hist.train_loss, hist.val_loss)):
            writer.writerow([i, repr(tr), repr(va)])


def run_simulate(cfg):
    """Write synthetic sequences in the KITTI directory layout under the output directory."""
    out = cfg.output
    names = []
    for purpose, count_key in (("eval", "sequences"), ("train", "train_sequences")):
        if cfg["synthetic"][count_key] <= 0:
            continue
        for seq in synthetic_sequences(cfg, purpose):
            d = os.path.join(out, seq.meta["name"])
            os.makedirs(os.path.join(d, "velodyne"), exist_ok=True)
            for i, scan in enumerate(seq.scans):
                save_kitti_bin(scan, os.path.join(d, "velodyne", f"{i:06d}.bin"))
            save_kitti_poses(seq.ground_truth, os.path.join(d, "poses.txt"))
            np.savetxt(os.path.join(d, "times.txt"), seq.timestamps, fmt="%.6f")
            with open(os.path.join(d, "world.txt"), "w") as fh:
                fh.write(seq.meta["world_config"].to_text())
            names.append(seq.meta["name"])
    write_manifest(out, "simulate", cfg, {"sequences": names})
    return out


def run_train(cfg, features=None):
    """Train on the ``train`` purpose input and write ``model.ckpt`` plus the loss history."""
    if features is None:
        features = [extract_features(s, cfg) for s in load_input(cfg, "train")]
    model = fit_network(cfg, features)
    os.makedirs(cfg.output, exist_ok=True)
    model.save(os.path.join(cfg.output, CHECKPOINT_NAME))
    _write_history(os.path.join(cfg.output, "train_history.csv"), model.history)
    write_manifest(cfg.output, "train", cfg, {"best_val": model.history.best_val, "best_epoch": model.history.best_epoch})
    return model


def _resolve_model(cfg, train_first):
    if train_first:
        return run_train(cfg)
    path = cfg["pipeline"]["checkpoint"] or os.path.join(cfg.output, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise CheckpointMissingError(f"no checkpoint at {path}; pass --train or set pipeline.checkpoint")
    model = TrainedModel.load(path)
    arch = model.network.architecture()
    if arch["pipeline"] != cfg["pipeline"]["pipeline"]:
        raise ConfigError(f"checkpoint was trained for the {arch['pipeline']} pipeline")
    return model


def _write_sequence_outputs(d, odo):
    os.makedirs(d, exist_ok=True)
    save_kitti_poses(odo.poses, os.path.join(d, "trajectory.txt"))
    if odo.features.ground_truth is not None:
        save_kitti_poses(odo.features.ground_truth, os.path.join(d, "groundtruth.txt"))
    if odo.weights:
        emit_weight_mask(odo.weights, os.path.join(d, "weights.csv"))


def run_odometry(cfg, train_first=False, model=None, sequences=None):
    """Predict a trajectory for every input sequence; INAF runs also write weight masks."""
    model = model or _resolve_model(cfg, train_first)
    sequences = sequences if sequences is not None else load_input(cfg, "eval")
    outputs = []
    for seq in sequences:
        feats = seq if isinstance(seq, SequenceFeatures) else extract_features(seq, cfg)
        odo = odometry_for_sequence(model, feats, cfg)
        _write_sequence_outputs(os.path.join(cfg.output, odo.name), odo)
        outputs.append(odo)
    write_manifest(cfg.output, "odometry", cfg, {"sequences": [o.name for o in outputs]})
    return outputs


def run_slam(cfg, train_first=False, model=None, sequences=None):
    """Odometry followed by loop closure; writes raw and optimised trajectories."""
    odos = run_odometry(cfg, train_first, model, sequences)
    outputs = []
    for odo in odos:
        slam = slam_for_sequence(odo, cfg)
        d = os.path.join(cfg.output, odo.name)
        save_kitti_poses(slam.raw, os.path.join(d, "trajectory_raw.txt"))
        save_kitti_poses(slam.optimized, os.path.join(d, "trajectory_optimized.txt"))
        export_graph(slam.graph, os.path.join(d, "graph.txt"))
        with open(os.path.join(d, "loops.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["match", "frame", "shift", "distance"])
            writer.writerows([[j, i, k, repr(float(dist))] for j, i, k, dist in slam.loops])
        outputs.append(slam)
    write_manifest(cfg.output, "slam", cfg, {"sequences": [o.name for o in outputs]})
    return outputs


def run_eval(cfg, gt, est, plot_data=False):
    """Metrics of ``est`` against ``gt`` (pose lists or KITTI pose files)."""
    gt = load_trajectory(gt) if isinstance(gt, (str, os.PathLike)) else list(gt)
    est = load_trajectory(est) if isinstance(est, (str, os.PathLike)) else list(est)
    result = evaluate(gt, est)
    os.makedirs(cfg.output, exist_ok=True)
    export_metrics(result, os.path.join(cfg.output, "metrics"))
    if plot_data:
        export_plot_data(gt, est, os.path.join(cfg.output, "plot_data.csv"))
    write_manifest(cfg.output, "eval", cfg)
    return result


# ---------------------------------------------------------------------------- tune


TUNE_SPACE = {"lr0": (1e-4, 1e-2), "hidden_dim": (32, 64, 128)}


def sample_tune_config(rng):
    lo, hi = np.log10(TUNE_SPACE["lr0"])
    return {
        "lr0": float(10 ** rng.uniform(lo, hi)),
        "hidden_dim": int(rng.choice(TUNE_SPACE["hidden_dim"])),
    }


def quadratic_objective(config, budget, seed):
    """Budget-independent oracle with its minimum at ``lr0 = 1e-3``, ``hidden_dim = 64``."""
    return (np.log10(config["lr0"]) + 3.0) ** 2 + (np.log2(config["hidden_dim"]) - 6.0) ** 2


def run_tune(cfg, features=None):
    """Hyperband over learning rate and recurrent width; objective is validation MAE."""
    tcfg = cfg["tune"]
    plan = hyperband_plan(tcfg["R"], tcfg["eta"])
    if tcfg["objective"] == "quadratic":
        objective = quadratic_objective
    elif tcfg["objective"] == "train":
        if features is None:
            features = [extract_features(s, cfg) for s in load_input(cfg, "train")]

        def objective(config, budget, seed):
            net = build_network(cfg)
            net.predictor = RecurrentPredictor(net.predictor.cell.input_size, config["hidden_dim"])
            net.initialize(seed)
            model = fit_network(
                cfg,
                features,
                train_config(cfg, lr0=config["lr0"], max_epochs=max(int(round(budget)), 1)),
                network=net,
            )
            val = [features[i] for i in model.history.val_indices]
            errs = [np.mean(np.abs(predict_sequence(model, f, adapt_every=0)[0] - f.targets)) for f in val]
            return float(np.mean(errs))

    else:
        raise ConfigError(f"unknown tune objective {tcfg['objective']!r}")
    result = hyperband_run(plan, sample_tune_config, objective, substream(cfg.seed, "tune"))
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "tune.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "lr0", "hidden_dim", "budget", "val_mae"])
        for cid, c, budget, loss in result.evaluations:
            writer.writerow([cid, repr(c["lr0"]), c["hidden_dim"], repr(float(budget)), repr(loss)])
    with open(os.path.join(cfg.output, "best.json"), "w") as fh:
        json.dump({"config": result.best_config, "val_mae": result.best_loss}, fh, indent=2, sort_keys=True)
    write_manifest(cfg.output, "tune", cfg, {"brackets": [list(r) for r in plan.brackets]})
    return result


__all__ = [
    "OdometryNetwork",
    "SequenceFeatures",
    "TrainedModel",
    "close_loops",
    "extract_features",
    "fit_network",
    "load_input",
    "predict_sequence",
    "run_eval",
    "run_odometry",
    "run_simulate",
    "run_slam",
    "run_train",
    "run_tune",
]
