"""Shared attention / feed-forward building blocks on top of the autodiff core.

These classes only register parameters and compose primitives; residual
wiring and normalization order belong to their callers (the decoder uses
pre-norm blocks throughout).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParameterStore


def sinusoid_features(positions: np.ndarray, n_freq: int) -> np.ndarray:
    """Fixed sinusoidal features of coordinates.

    For every input dimension emits sin/cos pairs at frequencies pi * 2^i,
    i < n_freq, ordered [sin_0, cos_0, sin_1, cos_1, ...] per dimension.
    A zero coordinate therefore maps to the zero-phase pattern [0, 1, 0, 1...].
    """
    pos = np.asarray(positions, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    angles = pos[..., None] * freqs  # (..., D, F)
    feats = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., D, F, 2)
    return feats.reshape(pos.shape[:-1] + (pos.shape[-1] * n_freq * 2,))


def sinusoid_features_t(positions: Tensor, n_freq: int) -> Tensor:
    """Differentiable version of `sinusoid_features` (gradients reach positions)."""
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    d = positions.data.shape[-1]
    pos = ad.reshape(positions, positions.data.shape + (1,))
    angles = ad.mul(pos, Tensor(freqs))  # broadcast to (..., D, F)
    # sin(x) via sigmoid-free primitives: use exp of imaginary is unavailable,
    # so sin/cos get dedicated closures here.
    sin = _sin(angles)
    cos = _cos(angles)
    stacked = ad.concat(
        [ad.reshape(sin, sin.data.shape + (1,)), ad.reshape(cos, cos.data.shape + (1,))],
        axis=-1,
    )
    return ad.reshape(stacked, positions.data.shape[:-1] + (d * n_freq * 2,))


def _sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)
    if not (ad._GRAD_ENABLED and a.requires_grad):
        return Tensor(out_data)
    cos_data = np.cos(a.data)

    def backward(g):
        a._accumulate(g * cos_data)

    return Tensor(out_data, True, (a,), backward)


def _cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)
    if not (ad._GRAD_ENABLED and a.requires_grad):
        return Tensor(out_data)
    sin_data = np.sin(a.data)

    def backward(g):
        a._accumulate(-g * sin_data)

    return Tensor(out_data, True, (a,), backward)


class LayerNormP:
    """Learnable layer normalization over the last axis."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", (dim,), init="ones")
        self.bias = store.add(f"{name}.bias", (dim,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, init: str = "fan_in"):
        self.weight = store.add(f"{name}.w", (d_in, d_out), init=init)
        self.bias = store.add(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class FeedForward:
    """Two-layer position-wise block with ReLU."""

    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class MultiHeadAttention:
    """Scaled dot-product attention of queries over a key/value sequence.

    No residual or normalization inside; shapes are (B, Q, C) queries and
    (B, T, kv_dim) context. Weights per query sum to 1 by construction.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", kv_dim, dim)
        self.wv = Linear(store, f"{name}.v", kv_dim, dim)
        self.wo = Linear(store, f"{name}.out", dim, dim)

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        x = ad.reshape(x, (b, n, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, query: Tensor, context: Tensor, return_weights: bool = False):
        b, nq = query.data.shape[0], query.data.shape[1]
        nt = context.data.shape[1]
        q = self._split(self.wq(query), b, nq)
        k = self._split(self.wk(context), b, nt)
        v = self._split(self.wv(context), b, nt)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(weights, v)
        mixed = ad.transpose(mixed, (0, 2, 1, 3))
        out = self.wo(ad.reshape(mixed, (b, nq, self.dim)))
        if return_weights:
            return out, weights
        return out
