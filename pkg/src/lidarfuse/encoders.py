"""Branch encoders: dual-quaternion MLP (geometric branch) and cylindrical CNN (learned branch)."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ShapeMismatchError
from .geometry import Pose, pose_to_dual_quaternion
from .networks import DTYPE, CylindricalCNN, DualQuaternionMLP, init_parameters
from .projection import stack_pair


def dual_quaternion_inputs(poses):
    """Canonical 8-vectors ``(q0..q3, qe0..qe3)`` for a pose or a sequence of poses."""
    if isinstance(poses, Pose):
        poses = [poses]
    return np.array([pose_to_dual_quaternion(p).as_vector() for p in poses]).reshape(-1, 8)


class DualQuaternionEncoder(TransformerMixin, BaseEstimator):
    """Encode relative poses as ``feature_dim`` vectors via their dual quaternions.

    ``transform`` accepts either a list of :class:`Pose` or an ``(n, 8)`` array of
    dual-quaternion vectors.
    """

    def __init__(self, feature_dim=128, hidden_dim=64, init="glorot", random_state=0):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.init = init
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.module_ = init_parameters(
            DualQuaternionMLP(self.feature_dim, self.hidden_dim), self.random_state, self.init
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "module_")
        if isinstance(X, Pose) or (isinstance(X, (list, tuple)) and X and isinstance(X[0], Pose)):
            X = dual_quaternion_inputs(X)
        X = np.asarray(X, dtype=float).reshape(-1, 8)
        # q and -q encode the same motion: keep the real scalar part non-negative
        X = np.where(X[:, :1] < 0, -X, X)
        with torch.no_grad():
            return self.module_(torch.as_tensor(X, dtype=DTYPE)).numpy()


def encode_icp_features(relative, params):
    """Feature vector of one relative pose; ``params`` is a fitted :class:`DualQuaternionEncoder`."""
    return params.transform([relative])[0]


class CylindricalEncoder(TransformerMixin, BaseEstimator):
    """Encode consecutive cylindrical images (stacked to 16 channels) as feature vectors."""

    def __init__(self, feature_dim=128, widths=(16, 32, 64), init="glorot", random_state=0):
        self.feature_dim = feature_dim
        self.widths = widths
        self.init = init
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.module_ = init_parameters(
            CylindricalCNN(16, tuple(self.widths), self.feature_dim), self.random_state, self.init
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "module_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1] != 16:
            raise ShapeMismatchError(f"expected (n, 16, h, w) input, got {X.shape}")
        with torch.no_grad():
            return self.module_(torch.as_tensor(X, dtype=DTYPE)).numpy()


def encode_pointcloud_features(prev, curr, params):
    """Feature vector for a pair of :class:`CylindricalImage`; ``params`` is a fitted encoder."""
    return params.transform(stack_pair(prev, curr))[0]
