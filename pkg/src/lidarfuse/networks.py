"""Small torch networks used by the encoders, fusion and the recurrent predictor.

Everything runs in float64 so analytic gradients can be checked against
central finite differences.  Parameters are initialised from numpy generators
so a given seed produces the same weights regardless of torch's RNG.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LEAK = 0.1


def init_parameters(module, seed, scheme="glorot"):
    """Deterministically (re)initialise every parameter of ``module`` in place.

    ``scheme="glorot"`` draws weights from a scaled normal and zeroes biases;
    ``scheme="zeros"`` zeroes everything.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if scheme == "zeros" or name.endswith("bias") or p.ndim == 1:
                p.zero_()
                continue
            fan_out = p.shape[0]
            fan_in = int(np.prod(p.shape[1:]))
            if p.ndim == 4:
                fan_out = p.shape[0] * p.shape[2] * p.shape[3]
            std = np.sqrt(2.0 / (fan_in + fan_out))
            p.copy_(torch.as_tensor(rng.normal(0.0, std, size=tuple(p.shape)), dtype=p.dtype))
    return module


def flat_parameters(module):
    return np.concatenate([p.detach().cpu().numpy().ravel() for p in module.parameters()])


def set_flat_parameters(module, flat):
    flat = np.asarray(flat, dtype=float)
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[offset : offset + n].reshape(p.shape), dtype=p.dtype))
            offset += n
    if offset != len(flat):
        raise ValueError(f"parameter vector has {len(flat)} entries, module needs {offset}")


class DualQuaternionMLP(nn.Module):
    def __init__(self, feature_dim=128, hidden_dim=64):
        super().__init__()
        self.fc1 = nn.Linear(8, hidden_dim, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden_dim, feature_dim, dtype=DTYPE)

    def forward(self, dq):
        return self.fc2(nn.functional.leaky_relu(self.fc1(dq), LEAK))


class CylindricalCNN(nn.Module):
    """Three stride-2 3x3 convolution stages, global average pool, affine head."""

    def __init__(self, in_channels=16, widths=(16, 32, 64), feature_dim=128):
        super().__init__()
        chans = [in_channels, *widths]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, dtype=DTYPE)
            for i in range(len(widths))
        )
        self.head = nn.Linear(chans[-1], feature_dim, dtype=DTYPE)

    def forward(self, x):
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), LEAK)
        return self.head(x.mean(dim=(-2, -1)))


class MultiHeadTokenAttention(nn.Module):
    """Self-attention over the two branch tokens ``[a, b]``; returns the flattened ``2F`` vector."""

    def __init__(self, feature_dim=128, heads=4):
        super().__init__()
        if feature_dim % heads:
            raise ValueError("feature_dim must be divisible by the head count")
        self.heads = heads
        self.d_k = feature_dim // heads
        self.q = nn.Linear(feature_dim, feature_dim, bias=False, dtype=DTYPE)
        self.k = nn.Linear(feature_dim, feature_dim, bias=False, dtype=DTYPE)
        self.v = nn.Linear(feature_dim, feature_dim, bias=False, dtype=DTYPE)
        self.out = nn.Linear(feature_dim, feature_dim, bias=False, dtype=DTYPE)

    def attention(self, tokens):
        """Per-head attention matrices ``(..., heads, 2, 2)`` and head outputs."""
        shape = tokens.shape[:-1]
        split = lambda x: x.reshape(*shape, self.heads, self.d_k).transpose(-3, -2)
        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        attn = torch.softmax(q @ k.transpose(-1, -2) / np.sqrt(self.d_k), dim=-1)
        heads = (attn @ v).transpose(-3, -2).reshape(*shape, -1)
        return attn, heads

    def forward(self, a, b):
        tokens = torch.stack([a, b], dim=-2)
        _, heads = self.attention(tokens)
        return self.out(heads).flatten(-2)


class WeightNet(nn.Module):
    """Maps the normalised error vector to per-feature logits."""

    def __init__(self, error_dim=4, feature_dim=128, hidden_dim=16):
        super().__init__()
        self.fc1 = nn.Linear(error_dim, hidden_dim, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden_dim, feature_dim, dtype=DTYPE)

    def forward(self, e):
        return self.fc2(torch.tanh(self.fc1(e)))


class RecurrentPredictor(nn.Module):
    """GRU cell over fused features followed by an affine twist regressor."""

    def __init__(self, input_dim=256, hidden_dim=128):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.cell = nn.GRUCell(input_dim, hidden_dim, dtype=DTYPE)
        self.head = nn.Linear(hidden_dim, 6, dtype=DTYPE)

    def step(self, z, h):
        h = self.cell(z, h)
        return self.head(h), h

    def forward(self, z_seq, h0=None):
        """``z_seq`` is ``(batch, time, input_dim)``; returns ``(batch, time, 6)``."""
        b, t, _ = z_seq.shape
        h = torch.zeros(b, self.hidden_dim, dtype=z_seq.dtype) if h0 is None else h0
        out = []
        for i in range(t):
            y, h = self.step(z_seq[:, i], h)
            out.append(y)
        return torch.stack(out, dim=1)
