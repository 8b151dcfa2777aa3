"""Modality-specific conversational context model (one per modality).

Embeddings pass through a temporal inception block (parallel same-length
convolutions with kernels 1, 3, 5 over neighbouring utterances, concatenated
and projected back), a stacked bidirectional GRU, a residual connection back
to the input embeddings, and a two-layer classifier.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import BiGRU, Conv1d, Linear
from .tensor import ParameterSet, Value

KERNELS = (1, 3, 5)


@dataclass(frozen=True)
class CanConfig:
    input_dim: int = 64
    tin_channels_per_kernel: int | None = None  # None -> input_dim
    gru_hidden: int = 512
    gru_layers: int = 3
    fc_hidden: int | None = None  # None -> gru_hidden
    fc_dropout: float = 0.2
    class_count: int = 4

    def __post_init__(self):
        for name in ("input_dim", "gru_hidden", "gru_layers", "class_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.fc_dropout < 1.0:
            raise ValueError("fc_dropout must lie in [0, 1)")

    @property
    def channels(self) -> int:
        return self.tin_channels_per_kernel or self.input_dim

    @property
    def hidden(self) -> int:
        return self.fc_hidden or self.gru_hidden


@dataclass
class CanOutput:
    logits: Value | None        # (..., N, |Y|)
    context_features: Value     # (..., N, input_dim), post-residual


class TemporalInception:
    def __init__(self, params: ParameterSet, prefix: str, dim: int, channels: int, rng):
        self.branches = [Conv1d(params, f"{prefix}.k{k}", dim, channels, k, rng) for k in KERNELS]
        self.proj = Conv1d(params, f"{prefix}.proj", channels * len(KERNELS), dim, 1, rng)

    def __call__(self, x, mask: np.ndarray | None = None) -> Value:
        if mask is not None:
            x = x * Value(mask[..., None].astype(float))
        y = T.concat([br(x) for br in self.branches], axis=-1)
        return self.proj(y)


class ContextNet:
    """Context addition network for one modality.

    ``with_head=False`` drops the classifier (the monolithic ablation feeds
    the context features straight into the fusion network).
    """

    def __init__(self, params: ParameterSet, prefix: str, cfg: CanConfig, rng, with_head: bool = True):
        self.cfg = cfg
        self.prefix = prefix
        self.tin = TemporalInception(params, f"{prefix}.tin", cfg.input_dim, cfg.channels, rng)
        self.gru = BiGRU(params, f"{prefix}.gru", cfg.input_dim, cfg.gru_hidden, cfg.gru_layers, rng)
        self.res_proj = Linear(params, f"{prefix}.res_proj", 2 * cfg.gru_hidden, cfg.input_dim, rng)
        self.with_head = with_head
        if with_head:
            self.fc1 = Linear(params, f"{prefix}.fc1", cfg.input_dim, cfg.hidden, rng)
            self.fc2 = Linear(params, f"{prefix}.fc2", cfg.hidden, cfg.class_count, rng)

    def tin_forward(self, x, mask=None) -> Value:
        return self.tin(x, mask)

    def features(self, E, mask: np.ndarray | None = None) -> Value:
        E = T.as_value(E)
        if E.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"{self.prefix}: embedding dim {E.shape[-1]} != input_dim {self.cfg.input_dim}")
        ctx = self.gru(self.tin(E, mask), mask)
        return E + self.res_proj(ctx)

    def classify(self, feats, rng=None, training: bool = False) -> Value:
        h = T.dropout(feats, self.cfg.fc_dropout, rng, training)
        h = T.relu(self.fc1(h))
        h = T.dropout(h, self.cfg.fc_dropout, rng, training)
        return self.fc2(h)

    def __call__(self, E, mask: np.ndarray | None = None, rng=None, training: bool = False) -> CanOutput:
        feats = self.features(E, mask)
        logits = self.classify(feats, rng, training) if self.with_head else None
        return CanOutput(logits, feats)


def can_forward(net: ContextNet, E, mask=None, rng=None, training: bool = False) -> CanOutput:
    return net(E, mask, rng, training)
