"""Training objectives.

All per-conversation quantities are sums over utterances (or contrastive
anchors); :func:`total_loss` then averages over the conversations in a batch.
Inputs carry a leading batch axis ``(B, N, ...)`` with a boolean ``mask``
``(B, N)``; padded positions contribute exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Value

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 3.0
    lam: float = 1.0
    alpha: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda and alpha must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "lambda": self.lam, "alpha": self.alpha, "tau": self.tau}


@dataclass
class LossBreakdown:
    """Batch-mean loss components; absent components are plain 0.0."""
    can: Value | float = 0.0
    multi: Value | float = 0.0
    con: Value | float = 0.0
    kl: Value | float = 0.0
    moe: Value | float = 0.0
    total: Value | float = 0.0
    conversations: int = 1
    extras: dict = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        def f(v):
            return v.item() if isinstance(v, Value) else float(v)
        return {k: f(getattr(self, k)) for k in ("can", "multi", "con", "kl", "moe", "total")}


def _mask_f(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape)
    return np.asarray(mask, dtype=float)


def focal_loss(logits, labels, gamma: float, mask=None) -> Value:
    """Sum over valid utterances of -(1 - p)^gamma log p, p = softmax prob of the true class."""
    logits = T.as_value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.gather_last(T.log_softmax(logits, axis=-1), labels)
    logp = T.clip_min(logp, LOG_FLOOR)
    per = -logp
    if gamma != 0.0:
        p = T.exp(logp)
        per = per * T.power(1.0 - p, gamma)
    m = _mask_f(mask, labels.shape)
    return T.sum_(per * Value(m))


def cross_entropy(logits, labels, mask=None) -> Value:
    return focal_loss(logits, labels, 0.0, mask)


def contrastive_loss(m_s, m_t, labels, tau: float, mask=None) -> Value:
    """Supervised contrastive loss over the 2N normalised speech+text rows.

    Anchors are every valid row of [m_s ; m_t] within one conversation;
    positives share the anchor's label (self excluded) and the denominator
    runs over every other valid row. Anchors with no positive contribute 0.
    Returns the sum over conversations.
    """
    m_s, m_t = T.as_value(m_s), T.as_value(m_t)
    labels = np.asarray(labels, dtype=np.int64)
    squeeze = m_s.ndim == 2
    if squeeze:
        m_s, m_t = m_s.reshape((1,) + m_s.shape), m_t.reshape((1,) + m_t.shape)
        labels = labels[None]
        mask = None if mask is None else np.asarray(mask)[None]
    valid = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    z_raw = T.concat([m_s, m_t], axis=-2)                     # (B, 2N, d)
    y = np.concatenate([labels, labels], axis=-1)             # (B, 2N)
    v = np.concatenate([valid, valid], axis=-1)
    norms = np.linalg.norm(z_raw.data, axis=-1)
    if np.any((norms == 0) & v):
        raise ValueError("contrastive_loss: zero-norm embedding row cannot be normalised")
    # padded rows may be anything; keep them away from a zero norm
    safe = Value(np.where(v, 0.0, 1.0)[..., None] * (norms == 0)[..., None])
    z = T.l2_normalize(z_raw + safe, axis=-1)
    sim = (z @ T.swapaxes(z, -1, -2)) * (1.0 / tau)            # (B, 2N, 2N)
    n2 = y.shape[-1]
    eye = np.eye(n2, dtype=bool)
    others = v[..., :, None] & v[..., None, :] & ~eye          # q != a, both valid
    pos = others & (y[..., :, None] == y[..., None, :])
    denom = T.logsumexp(sim + Value(np.where(others, 0.0, T.MASK_FILL)), axis=-1)   # (B, 2N)
    n_pos = pos.sum(-1)
    weight = np.where(n_pos > 0, 1.0 / np.maximum(n_pos, 1), 0.0)    # (B, 2N)
    pos_sum = T.sum_(sim * Value(pos.astype(float)), axis=-1)
    per_anchor = (denom * Value(n_pos.astype(float)) - pos_sum) * Value(weight)
    # rows with no positive have weight 0; rows with no "others" have n_pos 0 too
    return T.sum_(per_anchor)


def kl_consistency(p_m, p_s, p_t, mask=None) -> Value:
    """Sum over valid utterances of KL(p_m || p_s) + KL(p_m || p_t); logs floored at 1e-12."""
    p_m, p_s, p_t = T.as_value(p_m), T.as_value(p_s), T.as_value(p_t)
    log_m = T.log(T.clip_min(p_m, PROB_FLOOR))
    kl = None
    for q in (p_s, p_t):
        log_q = T.log(T.clip_min(q, PROB_FLOOR))
        term = T.sum_(p_m * (log_m - log_q), axis=-1)
        kl = term if kl is None else kl + term
    m = _mask_f(mask, kl.shape)
    return T.sum_(kl * Value(m))


def total_loss(speech, text, multimodal, fused, m_s, m_t, labels, cfg: LossConfig, mask=None) -> LossBreakdown:
    """CAN + multimodal + MoE objectives for a (B, N, |Y|) batch, averaged over B."""
    labels = np.asarray(labels, dtype=np.int64)
    n_conv = labels.shape[0] if labels.ndim == 2 else 1
    inv = 1.0 / n_conv
    can = (focal_loss(speech, labels, cfg.gamma, mask) + focal_loss(text, labels, cfg.gamma, mask)) * inv
    con = contrastive_loss(m_s, m_t, labels, cfg.tau, mask) * inv
    multi = focal_loss(multimodal, labels, cfg.gamma, mask) * inv + con * cfg.lam
    kl = kl_consistency(T.softmax(multimodal), T.softmax(speech), T.softmax(text), mask) * inv
    moe = focal_loss(fused, labels, cfg.gamma, mask) * inv + kl * cfg.alpha
    return LossBreakdown(can=can, multi=multi, con=con, kl=kl, moe=moe, total=can + multi + moe,
                         conversations=n_conv)
