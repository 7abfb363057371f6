"""Recurrent odometry prediction, its losses and the training procedure.

Twists are 6-vectors ``(translation[3], rotation[3])``; the rotation part is an
axis-angle vector in radians.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import CheckpointMissingError, DimMismatchError, EmptyDatasetError, MalformedFileError
from .geometry import Pose, pose_compose, se3_exp
from .networks import DTYPE, RecurrentPredictor, flat_parameters, init_parameters, set_flat_parameters

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    decay_factor: float = 0.9
    decay_steps: int = 10000
    alpha: float = 0.8
    patience: int = 15
    split: float = 0.8
    seed: int = 0
    batch_size: int = 1
    max_epochs: int = 200
    rotation_weight: float = 10.0
    window: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")


# --------------------------------------------------------------------------- losses


def pose_loss(pred, truth, lam=10.0):
    """``||p_hat - p||^2 + lam^2 ||r_hat - r||^2`` on twist vectors."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sum(d[..., :3] ** 2) + lam**2 * np.sum(d[..., 3:6] ** 2))


def combined_loss(y_true, y_pred, alpha=0.8):
    """``(1 - alpha) * MAE + alpha * MSE`` averaged over all elements."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise DimMismatchError(f"shapes differ: {y_true.shape} vs {y_pred.shape}")
    d = y_pred - y_true
    return float((1.0 - alpha) * np.mean(np.abs(d)) + alpha * np.mean(d * d))


def _rotation_scale(lam, dtype=DTYPE):
    return torch.tensor([1.0, 1.0, 1.0, lam, lam, lam], dtype=dtype)


def combined_loss_torch(y_true, y_pred, alpha=0.8, rotation_weight=1.0):
    """Torch twin of :func:`combined_loss` with rotation components scaled by ``rotation_weight``."""
    d = (y_pred - y_true) * _rotation_scale(rotation_weight, y_pred.dtype)
    return (1.0 - alpha) * d.abs().mean() + alpha * (d * d).mean()


def weighted_twists(y, rotation_weight):
    y = np.asarray(y, dtype=float).copy()
    y[..., 3:6] *= rotation_weight
    return y


def lr_schedule(step, cfg=None):
    """Staircase exponential decay ``lr0 * decay_factor ** (step // decay_steps)``."""
    cfg = cfg or TrainConfig()
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_steps)


# ------------------------------------------------------------------------ prediction


def predict_step(z, h_prev, model):
    """One recurrent update: returns ``(twist, h_next)`` as numpy arrays."""
    z = np.asarray(z, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    if z.shape != (model.cell.input_size,) or h_prev.shape != (model.hidden_dim,):
        raise DimMismatchError(
            f"expected z of size {model.cell.input_size} and h of size {model.hidden_dim}"
        )
    with torch.no_grad():
        y, h = model.step(torch.as_tensor(z[None], dtype=DTYPE), torch.as_tensor(h_prev[None], dtype=DTYPE))
    return y[0].numpy(), h[0].numpy()


def accumulate_trajectory(twists):
    """``pose_0 = I``; ``pose_t = pose_{t-1} * exp(twist_t)``."""
    poses = [Pose()]
    for tw in twists:
        poses.append(pose_compose(poses[-1], se3_exp(tw)))
    return poses


# -------------------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_epoch: int = -1
    steps: int = 0
    train_indices: list = field(default_factory=list)
    val_indices: list = field(default_factory=list)


def split_sequences(n, split, rng):
    """Shuffle sequence indices and split them ``split : 1 - split`` (each side non-empty)."""
    if n < 2:
        raise EmptyDatasetError("need at least two sequences to split")
    order = rng.permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def _take(inputs, sl):
    if isinstance(inputs, dict):
        return {k: v[sl] for k, v in inputs.items()}
    return inputs[sl]


def _windows(dataset, indices, window):
    """Training units: whole sequences, or consecutive windows of ``window`` frames."""
    units = []
    for i in indices:
        x, y = dataset[i]
        n = len(y)
        if window <= 0 or window >= n:
            units.append((x, y))
            continue
        for s in range(0, n - window + 1, window):
            units.append((_take(x, slice(s, s + window)), y[s : s + window]))
    return units


def train(model, dataset, cfg=None, forward=None, validation_fn=None):
    """Fit ``model`` on a list of ``(inputs, targets)`` sequences.

    ``inputs`` is a tensor (or a dict of tensors) indexed by frame along the
    first axis; ``forward(model, inputs)`` returns a ``(T, 6)`` tensor
    (default: ``model(inputs)``).  Sequences are split 80/20 at sequence
    level; with ``cfg.window > 0`` training sequences are then cut into
    windows of that many frames (validation always uses whole sequences).
    Adam runs with the staircase schedule and training stops once
    ``cfg.patience`` epochs pass without a lower validation loss.  The best
    parameters are restored into ``model`` before returning ``(model, history)``.

    ``validation_fn(model, epoch)``, when given, replaces the validation loss
    computation (used to exercise the stopping rule).
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise EmptyDatasetError("empty dataset")
    forward = forward or (lambda m, x: m(x))
    rng = np.random.default_rng([cfg.seed, 2])
    train_idx, val_idx = split_sequences(len(dataset), cfg.split, rng)
    hist = TrainHistory(train_indices=train_idx, val_indices=val_idx)

    def to_tensor(y):
        return y if torch.is_tensor(y) else torch.as_tensor(np.asarray(y), dtype=DTYPE)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: lr_schedule(step, cfg) / cfg.lr0)
    best_state = copy.deepcopy(model.state_dict())

    def loss_on(indices):
        with torch.no_grad():
            losses = [
                float(combined_loss_torch(to_tensor(dataset[i][1]), forward(model, dataset[i][0]), cfg.alpha, cfg.rotation_weight))
                for i in indices
            ]
        return float(np.mean(losses))

    units = _windows(dataset, train_idx, cfg.window)
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(units))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [units[i] for i in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            loss = sum(
                combined_loss_torch(to_tensor(y), forward(model, x), cfg.alpha, cfg.rotation_weight) for x, y in batch
            ) / len(batch)
            loss.backward()
            opt.step()
            sched.step()
            hist.steps += 1
            epoch_losses.append(loss.item())
        model.eval()
        val = validation_fn(model, epoch) if validation_fn else loss_on(val_idx)
        hist.train_loss.append(float(np.mean(epoch_losses)))
        hist.val_loss.append(float(val))
        if val < hist.best_val:
            hist.best_val = float(val)
            hist.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        logger.debug("epoch %d train %.6g val %.6g", epoch, hist.train_loss[-1], val)
        hist.stopped_epoch = epoch
        if epoch - hist.best_epoch >= cfg.patience:
            break
    model.load_state_dict(best_state)
    return model, hist


# ------------------------------------------------------------------------ checkpoints


CHECKPOINT_MAGIC = b"LFCKPT"


def save_checkpoint(path, model, architecture, metadata=None):
    """Write a checkpoint: magic, version, JSON header, then float64 parameters.

    The header holds the architecture descriptor and training metadata.  The
    layout is byte-stable, so identical models give identical files.
    """
    params = flat_parameters(model).astype("<f8")
    header = json.dumps(
        {"architecture": architecture, "metadata": metadata or {}, "n_params": int(params.size)},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.tobytes())
    return path


def load_checkpoint(path):
    """Return ``(architecture, params, metadata)`` from :func:`save_checkpoint` output."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointMissingError(f"no checkpoint at {path}") from None
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise MalformedFileError(f"{path} is not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, n_header = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(blob[off : off + n_header].decode())
    params = np.frombuffer(blob, dtype="<f8", offset=off + n_header).astype(float)
    if params.size != header["n_params"]:
        raise MalformedFileError("truncated checkpoint")
    return header["architecture"], params, header["metadata"]


# ------------------------------------------------------------------------- hyperband


@dataclass(frozen=True)
class HyperbandPlan:
    R: int
    eta: int
    brackets: tuple  # rows of (s, n, r)

    @property
    def s_max(self):
        return self.brackets[0][0]


def _floor_log(R, eta):
    s = 0
    while eta ** (s + 1) <= R:
        s += 1
    return s


def hyperband_plan(R, eta=3):
    """Brackets ``s = s_max..0`` with ``n = ceil((s_max+1)/(s+1) * eta^s)`` and ``r = R / eta^s``."""
    if not (R >= eta >= 2):
        raise ValueError("need R >= eta >= 2")
    s_max = _floor_log(R, eta)
    rows = []
    for s in range(s_max, -1, -1):
        # exact integer ceiling of (s_max+1) * eta^s / (s+1)
        n = -(-(s_max + 1) * eta**s // (s + 1))
        r = R / eta**s
        rows.append((s, n, r))
    return HyperbandPlan(R, eta, tuple(rows))


@dataclass
class HyperbandResult:
    best_config: object
    best_loss: float
    evaluations: list
    rounds: list  # (bracket s, round i, n_configs, budget)


def hyperband_run(plan, sample_config, objective, seed=0):
    """Successive halving inside every bracket of ``plan``.

    ``sample_config(rng)`` draws a configuration; ``objective(config, budget,
    seed)`` returns a validation loss (lower is better).  Per-configuration
    seeds are derived from ``seed`` so evaluation order does not matter.
    """
    rng = np.random.default_rng([seed, 3])
    evaluations, rounds = [], []
    best = (math.inf, None)
    counter = 0
    for s, n, r in plan.brackets:
        configs = []
        for _ in range(n):
            configs.append((counter, sample_config(rng)))
            counter += 1
        for i in range(s + 1):
            budget = r * plan.eta**i
            rounds.append((s, i, len(configs), budget))
            scored = []
            for cid, cfg in configs:
                loss = float(objective(cfg, budget, seed * 1_000_003 + cid))
                evaluations.append((cid, cfg, budget, loss))
                scored.append((loss, cid, cfg))
                if loss < best[0]:
                    best = (loss, cfg)
            scored.sort(key=lambda x: (x[0], x[1]))
            keep = len(configs) // plan.eta
            if i < s:
                configs = [(cid, cfg) for _, cid, cfg in scored[: max(keep, 1)]]
    return HyperbandResult(best[1], best[0], evaluations, rounds)


# ---------------------------------------------------------------------- estimator


class OdometryRegressor(RegressorMixin, BaseEstimator):
    """Recurrent twist regressor over sequences of fused feature vectors.

    ``X`` is a list of ``(T_i, D)`` arrays and ``y`` a list of ``(T_i, 6)`` twist
    arrays; at least two sequences are required for the validation split.
    """

    def __init__(
        self,
        hidden_dim=128,
        rotation_weight=10.0,
        lr0=0.001,
        decay_factor=0.9,
        decay_steps=10000,
        alpha=0.8,
        patience=15,
        split=0.8,
        max_epochs=200,
        batch_size=1,
        window=0,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.rotation_weight = rotation_weight
        self.lr0 = lr0
        self.decay_factor = decay_factor
        self.decay_steps = decay_steps
        self.alpha = alpha
        self.patience = patience
        self.split = split
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.window = window
        self.random_state = random_state

    def train_config(self):
        return TrainConfig(
            lr0=self.lr0,
            decay_factor=self.decay_factor,
            decay_steps=self.decay_steps,
            alpha=self.alpha,
            patience=self.patience,
            split=self.split,
            seed=self.random_state,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            rotation_weight=self.rotation_weight,
            window=self.window,
        )

    @staticmethod
    def _check_sequences(X, y=None):
        X = [np.asarray(x, dtype=float) for x in X]
        if not X or any(x.ndim != 2 for x in X):
            raise EmptyDatasetError("expected a non-empty list of (T, D) arrays")
        if y is not None:
            y = [np.asarray(t, dtype=float) for t in y]
            if len(y) != len(X) or any(t.shape != (len(x), 6) for x, t in zip(X, y)):
                raise DimMismatchError("targets must be (T, 6) arrays matching X")
        return X, y

    def fit(self, X, y):
        X, y = self._check_sequences(X, y)
        self.n_features_in_ = X[0].shape[1]
        self.model_ = init_parameters(RecurrentPredictor(self.n_features_in_, self.hidden_dim), self.random_state)
        data = [(torch.as_tensor(x, dtype=DTYPE), t) for x, t in zip(X, y)]
        _, self.history_ = train(self.model_, data, self.train_config(), forward=lambda m, x: m(x[None])[0])
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X, _ = self._check_sequences(X)
        with torch.no_grad():
            return [self.model_(torch.as_tensor(x[None], dtype=DTYPE))[0].numpy() for x in X]

    def score(self, X, y, sample_weight=None):
        """Negative mean combined loss (higher is better)."""
        preds = self.predict(X)
        return -float(np.mean([combined_loss(t, p, self.alpha) for t, p in zip(y, preds)]))

    def save(self, path, metadata=None):
        check_is_fitted(self, "model_")
        arch = {"kind": "OdometryRegressor", "params": self.get_params(), "n_features_in": self.n_features_in_}
        meta = dict(metadata or {})
        meta.setdefault("best_val", self.history_.best_val)
        return save_checkpoint(path, self.model_, arch, meta)

    @classmethod
    def load(cls, path):
        arch, params, meta = load_checkpoint(path)
        est = cls(**arch["params"])
        est.n_features_in_ = arch["n_features_in"]
        est.model_ = RecurrentPredictor(est.n_features_in_, est.hidden_dim)
        set_flat_parameters(est.model_, params)
        est.metadata_ = meta
        return est


__all__ = [
    "HyperbandPlan",
    "OdometryRegressor",
    "TrainConfig",
    "accumulate_trajectory",
    "combined_loss",
    "hyperband_plan",
    "hyperband_run",
    "lr_schedule",
    "pose_loss",
    "predict_step",
    "train",
]
