"""Feature fusion: concatenation, token self-attention and inferred-attention fusion (INAF).

INAF keeps a small weight network that maps a normalised registration-error
vector to per-feature weights in ``(0, 1)``.  The same weights rescale both
branch features before concatenation.  At prediction time the network keeps
adapting: the alignment error of the predicted pose is differentiated back to
the fused features and one gradient step is taken on the weight network only.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from .exceptions import DimMismatchError, NonFiniteError
from .geometry import Pose, se3_exp
from .icp import CorrespondenceSearch, alignment_losses, registration_losses
from .networks import DTYPE, MultiHeadTokenAttention, WeightNet, init_parameters

SIGMA_FLOOR = 1e-6
FUSION_MODES = ("direct", "attention", "inaf")


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimMismatchError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return a, b


def fuse_direct(a, b):
    a, b = _pair(a, b)
    return np.concatenate([a, b], axis=-1)


# ------------------------------------------------------------------------ attention


@dataclass
class AttentionParams:
    module: MultiHeadTokenAttention

    @classmethod
    def create(cls, feature_dim=128, heads=4, seed=0, init="glorot"):
        return cls(init_parameters(MultiHeadTokenAttention(feature_dim, heads), seed, init))

    @classmethod
    def identity(cls, feature_dim, heads=1):
        m = MultiHeadTokenAttention(feature_dim, heads)
        with torch.no_grad():
            for lin in (m.q, m.k, m.v, m.out):
                lin.weight.copy_(torch.eye(feature_dim, dtype=DTYPE))
        return cls(m)

    @property
    def heads(self):
        return self.module.heads

    @property
    def d_k(self):
        return self.module.d_k


def attention_matrix(a, b, params):
    """Per-head ``2 x 2`` attention matrices for the token pair."""
    a, b = _pair(a, b)
    tokens = torch.as_tensor(np.stack([a, b], axis=-2), dtype=DTYPE)
    with torch.no_grad():
        attn, _ = params.module.attention(tokens)
    return attn.numpy()


def fuse_attention(a, b, params):
    a, b = _pair(a, b)
    if a.shape[-1] != params.module.q.in_features:
        raise DimMismatchError("feature dimension does not match the attention parameters")
    with torch.no_grad():
        out = params.module(torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE))
    return out.numpy()


# ----------------------------------------------------------------------------- INAF


@dataclass
class InafState:
    """Weight network plus online statistics of the error vector."""

    weight_net: WeightNet
    mu_e: np.ndarray
    sigma_e: np.ndarray
    ema_decay: float = 0.99
    last_error: float | None = None
    var_e: np.ndarray | None = None
    last_input: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu_e = np.asarray(self.mu_e, dtype=float)
        self.sigma_e = np.maximum(np.asarray(self.sigma_e, dtype=float), SIGMA_FLOOR)
        if self.var_e is None:
            self.var_e = self.sigma_e**2
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    @classmethod
    def create(cls, feature_dim=128, error_dim=4, hidden_dim=16, seed=0, init="glorot", ema_decay=0.99):
        """Fresh state; with ``init="glorot"`` the output layer still starts at zero (``w = 0.5``)."""
        net = init_parameters(WeightNet(error_dim, feature_dim, hidden_dim), seed, init)
        with torch.no_grad():
            net.fc2.weight.zero_()
        return cls(net, np.zeros(error_dim), np.ones(error_dim), ema_decay)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def feature_dim(self):
        return self.weight_net.fc2.out_features

    def normalize(self, e):
        return (np.asarray(e, dtype=float) - self.mu_e) / self.sigma_e


def error_vector(losses, state, dt=1.0):
    """``(point_to_point, point_to_plane, plane_to_plane, dE/dt)`` for the weight network."""
    total = losses.total
    rate = 0.0 if state.last_error is None else (total - state.last_error) / dt
    state.last_error = total
    return np.array([*losses.as_vector(), rate])


# keeps weights strictly inside (0, 1) where float64 sigmoid would round to 0 or 1
WEIGHT_EPS = 2.0**-53


def open_sigmoid(logits):
    return torch.sigmoid(logits).clamp(WEIGHT_EPS, 1.0 - WEIGHT_EPS)


def _weights_from(state, e_norm):
    with torch.no_grad():
        logits = state.weight_net(torch.as_tensor(e_norm, dtype=DTYPE))
        return open_sigmoid(logits).numpy()


def inaf_weights(error_vec, state):
    """Per-feature weights ``sigmoid(f((e - mu) / sigma))``; updates the running statistics afterwards."""
    e = np.asarray(error_vec, dtype=float)
    e_norm = state.normalize(e)
    w = _weights_from(state, e_norm)
    state.last_input = e_norm
    d = state.ema_decay
    diff = e - state.mu_e
    state.mu_e = state.mu_e + (1.0 - d) * diff
    state.var_e = d * (state.var_e + (1.0 - d) * diff**2)
    state.sigma_e = np.maximum(np.sqrt(state.var_e), SIGMA_FLOOR)
    return w


def fuse_inaf(a, b, w):
    a, b = _pair(a, b)
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != a.shape[-1]:
        raise DimMismatchError(f"{w.shape[-1]} weights for {a.shape[-1]} features")
    return np.concatenate([w * a, w * b], axis=-1)


def inaf_feedback_error(predicted, source, target, max_dist=1.0):
    """Alignment losses of ``source`` moved by the predicted pose against ``target``."""
    return registration_losses(predicted, source, target, max_dist)


def frozen_pose_error(source, target, nominal, max_dist=1.0):
    """Total alignment error as a smooth function of a twist vector.

    Correspondences are found once at ``nominal`` and held fixed, so the
    function can be differentiated by finite differences.
    """
    moved = source.transformed(nominal)
    idx, _ = CorrespondenceSearch(target.points).query(moved.points, max_dist)
    ok = np.flatnonzero(idx >= 0)
    pairs = np.column_stack([ok, idx[ok]])
    if len(pairs) == 0:
        pairs = np.zeros((0, 2), dtype=np.intp)

    def error(q):
        if len(pairs) == 0:
            return 0.0
        pose = se3_exp(q) if not isinstance(q, Pose) else q
        return alignment_losses(source.transformed(pose), target, pairs).total

    return error


def central_difference(fn, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return g


def inaf_error_gradient(error_fn, features, predictor, step=1e-5):
    """Gradient of the alignment error with respect to the fused features.

    ``dE/dq`` comes from central differences of ``error_fn`` (a function of the
    6-vector twist) and ``dq/dz`` from the analytic Jacobian of ``predictor``, a
    torch-differentiable map from the fused features to the twist.
    """
    z = torch.as_tensor(np.asarray(features, dtype=float), dtype=DTYPE)
    with torch.no_grad():
        q = predictor(z).numpy()
    de_dq = central_difference(error_fn, q, step)
    jac = torch.autograd.functional.jacobian(predictor, z).numpy()
    grad = de_dq @ jac
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite entries in the INAF gradient")
    return grad


def inaf_adapt(state, grad, lr, a, b):
    """One gradient step on the weight network given ``dE/dz`` for ``z = [w*a; w*b]``.

    ``a`` and ``b`` are the branch features that were fused with the weights
    most recently produced by :func:`inaf_weights`.  Returns a new state.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    a, b = _pair(a, b)
    f = len(a)
    if grad.shape != (2 * f,):
        raise DimMismatchError(f"gradient has shape {grad.shape}, expected {(2 * f,)}")
    if state.last_input is None:
        raise ValueError("no weights have been produced yet")
    new = state.copy()
    de_dw = grad[:f] * a + grad[f:] * b
    params = list(new.weight_net.parameters())
    w = open_sigmoid(new.weight_net(torch.as_tensor(new.last_input, dtype=DTYPE)))
    grads = torch.autograd.grad(w, params, grad_outputs=torch.as_tensor(de_dw, dtype=DTYPE))
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.sub_(lr * g)
    for p in params:
        if not torch.all(torch.isfinite(p)):
            raise NonFiniteError("weight network diverged")
    return new


def emit_weight_mask(history, path):
    """Write per-frame weights as CSV rows ``frame, w_1..w_F``."""
    history = [np.asarray(w, dtype=float) for w in history]
    if not history:
        raise ValueError("no weights recorded")
    f = len(history[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *[f"w_{i + 1}" for i in range(f)]])
        for i, w in enumerate(history):
            writer.writerow([i, *[repr(float(x)) for x in w]])
    return path


def load_weight_mask(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])


# ------------------------------------------------------------------- trainable module


class FusionModule(nn.Module):
    """Differentiable fusion used inside the odometry network."""

    def __init__(self, mode="direct", feature_dim=128, heads=4, error_dim=4, hidden_dim=16):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.attention = MultiHeadTokenAttention(feature_dim, heads) if mode == "attention" else None
        self.weight_net = WeightNet(error_dim, feature_dim, hidden_dim) if mode == "inaf" else None

    def weights(self, e_norm):
        return open_sigmoid(self.weight_net(e_norm))

    def forward(self, a, b, e_norm=None):
        if self.mode == "direct":
            return torch.cat([a, b], dim=-1)
        if self.mode == "attention":
            return self.attention(a, b)
        w = self.weights(e_norm)
        return torch.cat([w * a, w * b], dim=-1)


# ------------------------------------------------------------------ estimator facade


class FeatureFusion(TransformerMixin, BaseEstimator):
    """Fuse ``[a | b]`` rows (shape ``(n, 2F)``) with one of the three strategies.

    For ``mode="inaf"`` pass the per-row raw error vectors to :meth:`transform`;
    the running statistics are updated row by row.
    """

    def __init__(self, mode="direct", heads=4, ema_decay=0.99, hidden_dim=16, random_state=0):
        self.mode = mode
        self.heads = heads
        self.ema_decay = ema_decay
        self.hidden_dim = hidden_dim
        self.random_state = random_state

    def fit(self, X, y=None, errors=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] % 2:
            raise DimMismatchError("expected an (n, 2F) array")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        self.feature_dim_ = X.shape[1] // 2
        if self.mode == "attention":
            self.attention_ = AttentionParams.create(self.feature_dim_, self.heads, self.random_state)
        if self.mode == "inaf":
            self.state_ = InafState.create(
                self.feature_dim_, hidden_dim=self.hidden_dim, seed=self.random_state, ema_decay=self.ema_decay
            )
            if errors is not None:
                errors = np.asarray(errors, dtype=float)
                self.state_.mu_e = errors.mean(axis=0)
                self.state_.sigma_e = np.maximum(errors.std(axis=0), SIGMA_FLOOR)
                self.state_.var_e = self.state_.sigma_e**2
        return self

    def transform(self, X, errors=None):
        X = np.asarray(X, dtype=float)
        f = X.shape[1] // 2
        a, b = X[:, :f], X[:, f:]
        if self.mode == "direct":
            return fuse_direct(a, b)
        if self.mode == "attention":
            return fuse_attention(a, b, self.attention_)
        if errors is None:
            raise ValueError("INAF fusion needs error vectors")
        errors = np.asarray(errors, dtype=float).reshape(len(X), -1)
        w = np.array([inaf_weights(e, self.state_) for e in errors])
        return fuse_inaf(a, b, w)

