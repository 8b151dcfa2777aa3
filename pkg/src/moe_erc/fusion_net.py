"""Multimodal expert: bidirectional speech/text cross-attention, then
per-stream self-attention and a linear classifier on the concatenation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, MultiHeadAttention
from .tensor import ParameterSet, Value


@dataclass(frozen=True)
class FusionConfig:
    model_dim: int = 120
    heads: int = 4
    layers: int = 4
    dropout: float = 0.5
    class_count: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class FusionState:
    m_ts: Value     # speech queries attending to text, after LN
    m_st: Value     # text queries attending to speech, after LN
    m_s: Value      # self-attended speech stream
    m_t: Value      # self-attended text stream
    logits: Value | None


class SelfAttentionBlock:
    """Pre-LN transformer block: x + MHA(LN x), then x + FFN(LN x)."""

    def __init__(self, params: ParameterSet, prefix: str, cfg: FusionConfig, rng):
        d = cfg.model_dim
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", d)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d, cfg.heads, rng)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d)
        self.ff1 = Linear(params, f"{prefix}.ff1", d, 4 * d, rng)
        self.ff2 = Linear(params, f"{prefix}.ff2", 4 * d, d, rng)
        self.dropout = cfg.dropout

    def __call__(self, x, mask=None, rng=None, training=False) -> Value:
        h = self.ln1(x)
        x = x + T.dropout(self.attn(h, h, mask), self.dropout, rng, training)
        h = self.ff2(T.relu(self.ff1(self.ln2(x))))
        return x + T.dropout(h, self.dropout, rng, training)


class FusionNet:
    def __init__(self, params: ParameterSet, prefix: str, d_s: int, d_t: int, cfg: FusionConfig, rng,
                 with_head: bool = True):
        d = cfg.model_dim
        self.cfg = cfg
        self.in_s = Linear(params, f"{prefix}.in_s", d_s, d, rng)
        self.in_t = Linear(params, f"{prefix}.in_t", d_t, d, rng)
        self.cross_ts = MultiHeadAttention(params, f"{prefix}.cross_ts", d, cfg.heads, rng)
        self.cross_st = MultiHeadAttention(params, f"{prefix}.cross_st", d, cfg.heads, rng)
        self.ln_ts = LayerNorm(params, f"{prefix}.ln_ts", d)
        self.ln_st = LayerNorm(params, f"{prefix}.ln_st", d)
        self.self_s = [SelfAttentionBlock(params, f"{prefix}.self_s.{i}", cfg, rng) for i in range(cfg.layers)]
        self.self_t = [SelfAttentionBlock(params, f"{prefix}.self_t.{i}", cfg, rng) for i in range(cfg.layers)]
        self.head = Linear(params, f"{prefix}.head", 2 * d, cfg.class_count, rng) if with_head else None

    def __call__(self, E_s, E_t, mask: np.ndarray | None = None, rng=None, training: bool = False) -> FusionState:
        E_s, E_t = T.as_value(E_s), T.as_value(E_t)
        if E_s.shape[:-1] != E_t.shape[:-1]:
            raise ValueError(f"speech/text sequence shapes differ: {E_s.shape} vs {E_t.shape}")
        drop = self.cfg.dropout
        p_s, p_t = self.in_s(E_s), self.in_t(E_t)
        a_ts = T.dropout(self.cross_ts(p_s, p_t, mask), drop, rng, training)
        a_st = T.dropout(self.cross_st(p_t, p_s, mask), drop, rng, training)
        m_ts = self.ln_ts(p_s + a_ts)
        m_st = self.ln_st(p_t + a_st)
        m_s, m_t = m_ts, m_st
        for blk in self.self_s:
            m_s = blk(m_s, mask, rng, training)
        for blk in self.self_t:
            m_t = blk(m_t, mask, rng, training)
        logits = self.head(T.concat([m_s, m_t], axis=-1)) if self.head is not None else None
        return FusionState(m_ts, m_st, m_s, m_t, logits)


def fusion_forward(net: FusionNet, E_s, E_t, mask=None, rng=None, training: bool = False) -> FusionState:
    return net(E_s, E_t, mask, rng, training)


def fusion_representations(state: FusionState) -> tuple[Value, Value]:
    """The (speech, text) streams fed to the contrastive loss, un-normalised."""
    return state.m_s, state.m_t
