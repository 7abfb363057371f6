"""Shared test utilities: golden vectors and finite-difference gradient checks."""
import os

import numpy as np
import torch


GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def golden(name, value):
    """Compare ``value`` with a stored vector; ``LIDARFUSE_REGEN_GOLDEN=1`` rewrites it."""
    path = os.path.join(GOLDEN_DIR, name + ".txt")
    value = np.asarray(value, dtype=float).ravel()
    if os.environ.get("LIDARFUSE_REGEN_GOLDEN") or not os.path.exists(path):
        os.makedirs(GOLDEN_DIR, exist_ok=True)
        np.savetxt(path, value, fmt="%.17g")
    np.testing.assert_allclose(value, np.loadtxt(path, ndmin=1), rtol=1e-10, atol=1e-12)


def fd_gradient_check(loss_fn, params, n_check=40, eps=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled coordinates.

    ``loss_fn()`` returns a scalar tensor built from the tensors in ``params``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_check, len(flat)), replace=False)
    with torch.no_grad():
        for j in picks:
            p, i = flat[j]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = loss_fn().item()
            view[i] = orig - eps
            down = loss_fn().item()
            view[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad.view(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


TINY = [
    "synthetic.frames=12",
    "synthetic.step=1.0",
    "synthetic.train_frames=12",
    "synthetic.train_sequences=2",
    "synthetic.n_azimuth=180",
    "synthetic.n_rings=8",
    "synthetic.max_range=40",
    "dlpe.image_h=8",
    "dlpe.image_w=45",
    "dlpe.feature_dim=16",
    "train.hidden_dim=8",
    "train.epochs=3",
    "train.window=5",
    "train.split=0.5",
    "icp.max_iterations=15",
]


def tiny_config(out, *extra):
    from lidarfuse.config import load_config

    return load_config(overrides=[*TINY, f"pipeline.output={out}", *extra])


ACCEPTANCE = {}


def record(key, passed, detail):
    """Store one acceptance outcome for the end-of-session summary."""
    ACCEPTANCE[key] = (bool(passed), detail)
    return passed
