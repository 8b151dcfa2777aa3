"""Parametrised building blocks: linear maps, GRUs, attention, layer norm.

Each layer registers its weights in a shared :class:`ParameterSet` under a
dotted prefix and reads them back at call time, so weight surgery on the
parameter set is immediately visible to the forward pass.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Value


def _uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, params: ParameterSet, prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else _uniform(rng, (d_in, d_out), d_in, d_out)
        self.w = params.add(f"{prefix}.w", w)
        self.b = params.add(f"{prefix}.b", np.zeros(d_out))
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x) -> Value:
        return x @ self.w + self.b


class Conv1d:
    """Same-length 1-D convolution over utterances (odd kernel, zero padded)."""

    def __init__(self, params: ParameterSet, prefix: str, d_in: int, d_out: int, kernel: int,
                 rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        self.w = params.add(f"{prefix}.w", _uniform(rng, (kernel, d_in, d_out), kernel * d_in, d_out))
        self.b = params.add(f"{prefix}.b", np.zeros(d_out))
        self.kernel = kernel

    def __call__(self, x) -> Value:
        return T.conv1d_same(x, self.w, self.b)


class LayerNorm:
    def __init__(self, params: ParameterSet, prefix: str, dim: int, eps: float = 1e-5):
        self.gain = params.add(f"{prefix}.gain", np.ones(dim))
        self.bias = params.add(f"{prefix}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Value:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def gru_cell(x_proj, h, w_h, hidden: int):
    """One GRU step given the precomputed input projection ``x W_x + b``.

    z = sigmoid(x W_xz + h W_hz + b_z), r = sigmoid(x W_xr + h W_hr + b_r),
    n = tanh(x W_xn + (r * h) W_hn + b_n), h' = (1 - z) * n + z * h.
    """
    H = hidden
    hz_hr = h @ w_h[:, :2 * H]
    z = T.sigmoid(x_proj[..., :H] + hz_hr[..., :H])
    r = T.sigmoid(x_proj[..., H:2 * H] + hz_hr[..., H:])
    n = T.tanh(x_proj[..., 2 * H:] + (r * h) @ w_h[:, 2 * H:])
    return (1.0 - z) * n + z * h


class GRUDirection:
    def __init__(self, params: ParameterSet, prefix: str, d_in: int, hidden: int, rng: np.random.Generator):
        H = hidden
        self.w_x = params.add(f"{prefix}.w_x", _uniform(rng, (d_in, 3 * H), d_in, H))
        self.w_h = params.add(f"{prefix}.w_h", _uniform(rng, (H, 3 * H), H, H))
        self.b = params.add(f"{prefix}.b", np.zeros(3 * H))
        self.hidden = H

    def run(self, x, mask: np.ndarray | None, reverse: bool = False, h0=None) -> list[Value]:
        """Scan over time axis -2; returns one hidden state per step in input order.

        Where ``mask`` is False the previous hidden state is carried through
        unchanged, so padded steps never leak into valid ones.
        """
        if x.ndim == 2:
            # unbatched (T, D): run as a batch of one
            m = None if mask is None else np.asarray(mask)[None]
            h1 = None if h0 is None else h0.reshape((1,) + h0.shape)
            outs = self.run(x.reshape((1,) + x.shape), m, reverse, h1)
            return [o.reshape(o.shape[1:]) for o in outs]
        t_len = x.shape[-2]
        batch_shape = x.shape[:-2]
        proj = x @ self.w_x + self.b
        h = h0 if h0 is not None else Value(np.zeros(batch_shape + (self.hidden,)))
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        outs: list[Value | None] = [None] * t_len
        for t in steps:
            h_new = gru_cell(proj[..., t, :], h, self.w_h, self.hidden)
            if mask is not None:
                m = mask[..., t, None].astype(float)
                if not m.all():
                    h_new = h_new * Value(m) + h * Value(1.0 - m)
            h = h_new
            outs[t] = h
        return outs


class BiGRU:
    """Stacked bidirectional GRU; output is [forward ; backward] per step."""

    def __init__(self, params: ParameterSet, prefix: str, d_in: int, hidden: int, layers: int,
                 rng: np.random.Generator):
        self.layers = []
        d = d_in
        for i in range(layers):
            fwd = GRUDirection(params, f"{prefix}.layer{i}.fwd", d, hidden, rng)
            bwd = GRUDirection(params, f"{prefix}.layer{i}.bwd", d, hidden, rng)
            self.layers.append((fwd, bwd))
            d = 2 * hidden
        self.hidden = hidden

    def __call__(self, x, mask: np.ndarray | None = None) -> Value:
        for fwd, bwd in self.layers:
            f = fwd.run(x, mask)
            b = bwd.run(x, mask, reverse=True)
            x = T.stack([T.concat([fs, bs], axis=-1) for fs, bs in zip(f, b)], axis=-2)
        return x


def key_mask_bias(mask: np.ndarray | None, ndim_scores: int) -> np.ndarray | None:
    """Additive score bias hiding invalid keys; mask is (..., T_k)."""
    if mask is None:
        return None
    bias = np.where(mask, 0.0, T.MASK_FILL)
    # (B, T_k) -> (B, 1, 1, T_k) for (B, heads, T_q, T_k) scores
    while bias.ndim < ndim_scores:
        bias = np.expand_dims(bias, -2)
    return bias


class MultiHeadAttention:
    def __init__(self, params: ParameterSet, prefix: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.q = Linear(params, f"{prefix}.q", dim, dim, rng)
        self.k = Linear(params, f"{prefix}.k", dim, dim, rng)
        self.v = Linear(params, f"{prefix}.v", dim, dim, rng)
        self.o = Linear(params, f"{prefix}.o", dim, dim, rng)
        self.dim, self.heads = dim, heads

    def _split(self, x) -> Value:
        # (..., T, D) -> (..., h, T, D/h)
        *lead, t, _ = x.shape
        x = x.reshape(tuple(lead) + (t, self.heads, self.dim // self.heads))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return T.transpose(x, axes)

    def attention_weights(self, q_in, k_in, key_mask: np.ndarray | None = None) -> Value:
        q, k = self._split(self.q(q_in)), self._split(self.k(k_in))
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.dim // self.heads))
        bias = key_mask_bias(key_mask, scores.ndim)
        if bias is not None:
            scores = scores + Value(bias)
        return T.softmax(scores, axis=-1)

    def __call__(self, q_in, kv_in, key_mask: np.ndarray | None = None) -> Value:
        attn = self.attention_weights(q_in, kv_in, key_mask)
        ctx = attn @ self._split(self.v(kv_in))
        nd = ctx.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        ctx = T.transpose(ctx, axes)
        ctx = ctx.reshape(ctx.shape[:-2] + (self.dim,))
        return self.o(ctx)
