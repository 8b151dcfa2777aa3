"""Joint training of all experts and the gate, evaluation and gradient checks."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset import Batch, Dataset, batch as make_batches, collate
from .gate import GateRecord
from .losses import LossConfig
from .metrics import weighted_f1
from .model import VARIANTS, ErcModel, ModelConfig, ModelOutput, build_variant
from .tensor import ParameterSet

LOG_KEYS = ("can", "multi", "con", "kl", "moe", "total")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    variant: str = "full"
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def from_dict(cls, d: dict, loss: LossConfig | None = None) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        elif loss is not None:
            d["loss"] = loss
        return cls(**d)


# ------------------------------------------------------------------ optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array(float(self.step))}
        out.update({f"optim.m.{k}": a for k, a in self.m.items()})
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        st = cls(step=int(arrays.get("optim.step", 0.0)))
        for k, a in arrays.items():
            if k.startswith("optim.m."):
                st.m[k[len("optim.m."):]] = a.copy()
            elif k.startswith("optim.v."):
                st.v[k[len("optim.v."):]] = a.copy()
        return st


def optimizer_step(params: ParameterSet, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update of every parameter, in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm; gradients are untouched when already within bounds.
    """
    norm = T.global_norm(params.values())
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            p.grad *= scale
    return norm


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, params: ParameterSet, state: AdamState | None = None) -> None:
    arrays = params.state()
    if state is not None:
        arrays.update(state.arrays())
    T.save_arrays(path, arrays)


def load_checkpoint(path, params: ParameterSet | None = None) -> tuple[dict, AdamState]:
    arrays = T.load_arrays(path)
    model = {k: a for k, a in arrays.items() if not k.startswith("optim.")}
    st = AdamState.from_arrays({k: a for k, a in arrays.items() if k.startswith("optim.")})
    if params is not None:
        params.load_state(model)
    return model, st


# ------------------------------------------------------------------ evaluation

@dataclass
class Evaluation:
    labels: np.ndarray
    predictions: np.ndarray
    expert_predictions: dict[str, np.ndarray]
    betas: np.ndarray | None
    records: list[GateRecord]
    weighted_f1: float
    class_count: int

    def expert_f1(self) -> dict[str, float]:
        return {k: weighted_f1(self.labels, p, self.class_count) for k, p in self.expert_predictions.items()}


def evaluate(model: ErcModel, ds: Dataset, batch_size: int = 8) -> Evaluation:
    """Eval-mode predictions over valid utterances, in dataset order."""
    labels, preds, betas, records = [], [], [], []
    expert: dict[str, list] = {}
    with T.no_grad():
        for b in make_batches(ds.conversations, batch_size):
            out = model(b.speech, b.text, b.mask)
            pred = out.final.data.argmax(-1)
            for i, cid in enumerate(b.ids):
                n = b.lengths[i]
                labels.append(b.labels[i, :n])
                preds.append(pred[i, :n])
                for k, lg in out.expert_logits().items():
                    expert.setdefault(k, []).append(lg.data[i, :n].argmax(-1))
                if out.beta is not None:
                    bt = out.beta.data[i, :n]
                    betas.append(bt)
                    records.extend(GateRecord(cid, k, tuple(float(x) for x in bt[k]), int(b.labels[i, k]),
                                              int(pred[i, k])) for k in range(n))
    y = np.concatenate(labels)
    p = np.concatenate(preds)
    return Evaluation(y, p, {k: np.concatenate(v) for k, v in expert.items()},
                      np.concatenate(betas) if betas else None, records,
                      weighted_f1(y, p, ds.class_count), ds.class_count)


# -------------------------------------------------------------------- training

@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_f1: float | None = None
    checkpoint_path: str | None = None
    wall_seconds: float = 0.0
    parameter_count: int = 0
    variant: str = "full"


def _epoch_record(epoch: int, sums: dict[str, float], n: int, val_f1: float) -> dict:
    rec = {"epoch": epoch}
    rec.update({k: sums[k] / n for k in LOG_KEYS})
    rec["val_f1"] = val_f1
    return rec


def train(train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
          out_dir=None, model: ErcModel | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[ErcModel, TrainReport]:
    """Train ``cfg.epochs`` epochs; the returned model holds the best-validation weights.

    With ``out_dir`` the best checkpoint goes to ``best.ckpt`` and each epoch
    appends a line to ``train_log.jsonl`` (no wall-clock fields, so logs are
    byte-identical across identical runs).
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and val splits must be nonempty")
    t0 = time.perf_counter()
    if model is None:
        model = build_variant(cfg.variant, model_cfg, cfg.seed)
    params = model.params
    state = AdamState()
    shuffle_rng = T.make_rng(cfg.seed, 200)
    dropout_rng = T.make_rng(cfg.seed, 300)
    report = TrainReport(variant=model.variant, parameter_count=params.count())
    ckpt = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "best.ckpt"
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    best_state = None
    convs = list(train_ds.conversations)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(convs))
        sums = dict.fromkeys(LOG_KEYS, 0.0)
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            b = collate([convs[i] for i in order[start:start + cfg.batch_size]])
            try:
                out = model(b.speech, b.text, b.mask, dropout_rng, training=True)
                lb = model.loss(out, b.labels, cfg.loss, b.mask)
                if not math.isfinite(lb.total.item()):
                    raise T.NonFiniteError("total loss is not finite")
                params.zero_grad()
                lb.total.backward()
            except T.NonFiniteError as e:
                report.wall_seconds = time.perf_counter() - t0
                if best_state is not None:
                    params.load_state(best_state)
                raise DivergenceError(f"diverged at epoch {epoch}: {e}", report) from e
            clip_grad_norm(params, cfg.clip_norm)
            optimizer_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            for k, val in lb.floats().items():
                sums[k] += val * b.size
            seen += b.size
        val_f1 = evaluate(model, val_ds, cfg.batch_size).weighted_f1
        rec = _epoch_record(epoch, sums, seen, val_f1)
        report.history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if on_epoch is not None:
            on_epoch(rec)
        if report.best_val_f1 is None or val_f1 > report.best_val_f1:
            report.best_epoch, report.best_val_f1 = epoch, val_f1
            best_state = params.state()
            if ckpt is not None:
                save_checkpoint(ckpt, params, state)
                report.checkpoint_path = str(ckpt)
    if best_state is not None:
        params.load_state(best_state)
    report.wall_seconds = time.perf_counter() - t0
    return model, report


# ------------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: dict[str, float]        # per parameter group
    failures: list[str]                    # offending parameter names
    checked: int                           # scalar entries compared

    def summary(self) -> str:
        lines = [f"{g:40s} {e:.3e}" for g, e in sorted(self.max_rel_error.items())]
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failures)
        return "\n".join(lines + [verdict])


def _group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:3]) if parts[0] == "can" else ".".join(parts[:2])


def grad_check(model: ErcModel, b: Batch, loss_cfg: LossConfig, step: float = 1e-5,
               rel_tol: float = 1e-4, abs_tol: float = 1e-7, small: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of the total loss with central differences.

    Every scalar of every parameter is perturbed. An entry passes when the
    relative error is within ``rel_tol``, or, where the analytic gradient is
    below ``small`` in magnitude, when the absolute error is within ``abs_tol``.
    Dropout is disabled so the loss is a deterministic function of the weights.
    """
    params = model.params

    def loss_value() -> float:
        with T.no_grad():
            out = model(b.speech, b.text, b.mask)
            return model.loss(out, b.labels, loss_cfg, b.mask).total.item()

    params.zero_grad()
    out = model(b.speech, b.text, b.mask)
    model.loss(out, b.labels, loss_cfg, b.mask).total.backward()
    analytic = {n: p.grad.copy() for n, p in params.items()}
    errs: dict[str, float] = {}
    failures: list[str] = []
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            num[i] = (up - down) / (2 * step)
        ana = analytic[name].reshape(-1)
        diff = np.abs(ana - num)
        rel = diff / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-300)
        ok = np.where(np.abs(ana) < small, (diff <= abs_tol) | (rel <= rel_tol), rel <= rel_tol)
        checked += flat.size
        g = _group(name)
        scored = np.where(np.abs(ana) < small, np.minimum(rel, diff / abs_tol * rel_tol), rel)
        errs[g] = max(errs.get(g, 0.0), float(scored.max()) if scored.size else 0.0)
        if not ok.all():
            failures.append(name)
    params.zero_grad()
    return GradCheckReport(not failures, errs, failures, checked)


def tiny_model_config(class_count: int = 3, dim: int = 4) -> ModelConfig:
    """Smallest configuration exercising every path (used by grad checks)."""
    from .context_net import CanConfig
    from .fusion_net import FusionConfig
    return ModelConfig(d_s=dim, d_t=dim, class_count=class_count,
                       can=CanConfig(input_dim=dim, tin_channels_per_kernel=2, gru_hidden=3, gru_layers=1,
                                     fc_hidden=4, fc_dropout=0.2, class_count=class_count),
                       fusion=FusionConfig(model_dim=dim, heads=1, layers=1, dropout=0.5,
                                           class_count=class_count))


def grad_check_batch(model_cfg: ModelConfig, seed: int, lengths=(3, 2)) -> Batch:
    """Random conversations (one padded) matching ``model_cfg`` dims."""
    from .dataset import Conversation, UtteranceRecord
    rng = T.make_rng(seed, 400)
    convs = []
    for ci, n in enumerate(lengths):
        labels = rng.integers(0, model_cfg.class_count, size=n)
        utts = tuple(UtteranceRecord(f"g{ci}-{k}", rng.standard_normal(model_cfg.d_s),
                                     rng.standard_normal(model_cfg.d_t), int(labels[k])) for k in range(n))
        convs.append(Conversation(f"g{ci}", utts))
    return collate(convs)


def run_grad_check(model_cfg: ModelConfig, loss_cfg: LossConfig, seed: int = 0,
                   variant: str | None = None, lengths=(3, 2)) -> GradCheckReport:
    model = build_variant(variant or model_cfg.variant, model_cfg, seed)
    return grad_check(model, grad_check_batch(model_cfg, seed, lengths), loss_cfg)
