"""Model assembly: the full three-expert mixture and its ablation variants.

=============  ==============================================================
variant        structure
=============  ==============================================================
full           speech CAN + text CAN + fusion expert, logit-level gate
feat_moe       same experts; gate mixes projected pre-classifier features,
               one shared head classifies the mixture
no_loss_moe    full architecture, trained only on the gated prediction
monolithic     CAN context features feed the fusion network; single head
text_only      text CAN alone (speech_only mirrors it)
=============  ==============================================================
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .context_net import CanConfig, ContextNet
from .fusion_net import FusionConfig, FusionNet
from .gate import ExpertLogits, Gate, fuse, fused_features
from .layers import Linear
from .losses import LossBreakdown, LossConfig, contrastive_loss, focal_loss, total_loss
from .tensor import ParameterSet, Value

VARIANTS = ("full", "feat_moe", "no_loss_moe", "monolithic", "text_only", "speech_only")


@dataclass(frozen=True)
class ModelConfig:
    d_s: int = 64
    d_t: int = 64
    class_count: int = 4
    can: CanConfig = field(default_factory=CanConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gate_hidden: int | None = None
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        can = d.pop("can", {}) or {}
        fus = d.pop("fusion", {}) or {}
        base = cls(**d)
        for name, sub, klass in (("can", can, CanConfig), ("fusion", fus, FusionConfig)):
            bad = set(sub) - set(klass.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown {name} keys: {sorted(bad)}")
        return replace(base, can=CanConfig(**{**can, "class_count": base.class_count}),
                       fusion=FusionConfig(**{**fus, "class_count": base.class_count}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    final: Value                       # logits used for prediction
    speech: Value | None = None
    text: Value | None = None
    multimodal: Value | None = None
    beta: Value | None = None          # (B, N, 3) gate weights
    m_s: Value | None = None
    m_t: Value | None = None

    def expert_logits(self) -> dict[str, Value]:
        return {k: v for k, v in (("speech", self.speech), ("text", self.text), ("multimodal", self.multimodal))
                if v is not None}


class ErcModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.variant = cfg.variant
        self.params = ParameterSet()
        rng = T.make_rng(seed, 100)
        k, v = cfg.class_count, cfg.variant
        can_s = replace(cfg.can, input_dim=cfg.d_s, class_count=k)
        can_t = replace(cfg.can, input_dim=cfg.d_t, class_count=k)
        fcfg = replace(cfg.fusion, class_count=k)
        heads = v != "monolithic"
        self.can_s = ContextNet(self.params, "can.speech", can_s, rng, with_head=heads) if v != "text_only" else None
        self.can_t = ContextNet(self.params, "can.text", can_t, rng, with_head=heads) if v != "speech_only" else None
        self.fusion = None
        self.gate = None
        if v in ("full", "feat_moe", "no_loss_moe", "monolithic"):
            self.fusion = FusionNet(self.params, "fusion", cfg.d_s, cfg.d_t, fcfg, rng)
        if v in ("full", "no_loss_moe"):
            self.gate = Gate(self.params, "gate", 3 * k, rng, cfg.gate_hidden)
        if v == "feat_moe":
            md = fcfg.model_dim
            self.gate = Gate(self.params, "gate", cfg.d_s + cfg.d_t + 2 * md, rng, cfg.gate_hidden)
            self.feat_proj = [Linear(self.params, "gate.proj_s", cfg.d_s, md, rng),
                              Linear(self.params, "gate.proj_t", cfg.d_t, md, rng),
                              Linear(self.params, "gate.proj_m", 2 * md, md, rng)]
            self.feat_head = Linear(self.params, "gate.head", md, k, rng)

    def parameter_count(self) -> int:
        return self.params.count()

    def forward(self, speech, text, mask=None, rng=None, training: bool = False) -> ModelOutput:
        speech = Value(speech) if not isinstance(speech, Value) else speech
        text = Value(text) if not isinstance(text, Value) else text
        v = self.variant
        if v == "text_only":
            out = self.can_t(text, mask, rng, training)
            return ModelOutput(final=out.logits, text=out.logits)
        if v == "speech_only":
            out = self.can_s(speech, mask, rng, training)
            return ModelOutput(final=out.logits, speech=out.logits)
        if v == "monolithic":
            fs = self.can_s.features(speech, mask)
            ft = self.can_t.features(text, mask)
            st = self.fusion(fs, ft, mask, rng, training)
            return ModelOutput(final=st.logits, multimodal=st.logits, m_s=st.m_s, m_t=st.m_t)

        os_ = self.can_s(speech, mask, rng, training)
        ot = self.can_t(text, mask, rng, training)
        st = self.fusion(speech, text, mask, rng, training)
        experts = ExpertLogits(os_.logits, ot.logits, st.logits)
        if v == "feat_moe":
            f_m = T.concat([st.m_s, st.m_t], axis=-1)
            feats = [os_.context_features, ot.context_features, f_m]
            beta = self.gate(T.concat(feats, axis=-1))
            mixed = fused_features([p(f) for p, f in zip(self.feat_proj, feats)], beta)
            final = self.feat_head(mixed)
        else:
            beta = self.gate(T.concat(experts.as_list(), axis=-1))
            final = fuse(experts, beta)
        return ModelOutput(final=final, speech=os_.logits, text=ot.logits, multimodal=st.logits,
                           beta=beta, m_s=st.m_s, m_t=st.m_t)

    __call__ = forward

    def loss(self, out: ModelOutput, labels, cfg: LossConfig, mask=None) -> LossBreakdown:
        labels = np.asarray(labels, dtype=np.int64)
        b = labels.shape[0] if labels.ndim == 2 else 1
        inv = 1.0 / b
        v = self.variant
        if v in ("full", "feat_moe"):
            return total_loss(out.speech, out.text, out.multimodal, out.final, out.m_s, out.m_t,
                              labels, cfg, mask)
        if v == "no_loss_moe":
            moe = focal_loss(out.final, labels, cfg.gamma, mask) * inv
            return LossBreakdown(moe=moe, total=moe, conversations=b)
        if v == "monolithic":
            con = contrastive_loss(out.m_s, out.m_t, labels, cfg.tau, mask) * inv
            multi = focal_loss(out.final, labels, cfg.gamma, mask) * inv + con * cfg.lam
            return LossBreakdown(multi=multi, con=con, total=multi, conversations=b)
        can = focal_loss(out.final, labels, cfg.gamma, mask) * inv
        return LossBreakdown(can=can, total=can, conversations=b)


def build_variant(variant: str, cfg: ModelConfig, seed: int = 0) -> ErcModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return ErcModel(replace(cfg, variant=variant), seed)
