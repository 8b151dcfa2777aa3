"""Decision-level mixture of experts over speech, text and multimodal logits."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .layers import Linear
from .tensor import ParameterSet, Value

EXPERTS = ("speech", "text", "multimodal")


@dataclass
class ExpertLogits:
    speech: Value
    text: Value
    multimodal: Value

    def __post_init__(self):
        shapes = {self.speech.shape, self.text.shape, self.multimodal.shape}
        if len(shapes) != 1:
            raise ValueError(f"expert logits differ in shape: {shapes}")

    def as_list(self) -> list[Value]:
        return [self.speech, self.text, self.multimodal]


class Gate:
    """softmax(W [y_s ; y_t ; y_m] + b), one simplex row per utterance.

    The output layer starts at zero, so training begins from the uniform mixture.
    """

    def __init__(self, params: ParameterSet, prefix: str, in_dim: int, rng, hidden: int | None = None):
        if hidden:
            self.layers = [Linear(params, f"{prefix}.fc0", in_dim, hidden, rng),
                           Linear(params, f"{prefix}.fc1", hidden, len(EXPERTS), rng, zero_init=True)]
        else:
            self.layers = [Linear(params, f"{prefix}.fc", in_dim, len(EXPERTS), rng, zero_init=True)]

    def scores(self, x) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def __call__(self, x) -> Value:
        return T.softmax(self.scores(x), axis=-1)


def gate_forward(gate: Gate, logits: ExpertLogits) -> Value:
    return gate(T.concat(logits.as_list(), axis=-1))


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # exact at t=0 and t=1, bounded by [a, b], and lerp(a, a, t) == a
    straddle = ((a <= 0) & (b >= 0)) | ((a >= 0) & (b <= 0))
    direct = t * b + (1.0 - t) * a
    x = a + t * (b - a)
    clamped = np.where((t > 1) == (b > a), np.maximum(b, x), np.minimum(b, x))
    return np.where(straddle, direct, np.where(t == 1, b, clamped))


def mix(ys: np.ndarray, yt: np.ndarray, ym: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """beta_s*ys + beta_t*yt + beta_m*ym evaluated as two nested lerps.

    Equal to the plain weighted sum up to rounding, but one-hot weights return
    the chosen expert bit-for-bit, results never leave the experts' range and
    identical experts are a fixed point.
    """
    bs, bt, bm = beta[..., 0:1], beta[..., 1:2], beta[..., 2:3]
    st = bs + bt
    w = np.divide(bt, st, out=np.zeros_like(st), where=st > 0)
    return _lerp(_lerp(ys, yt, w), ym, bm)


def fuse(logits: ExpertLogits, beta) -> Value:
    """Gate-weighted sum of expert logits, differentiable in all four inputs."""
    beta = T.as_value(beta)
    ys, yt, ym = logits.as_list()
    out = mix(ys.data, yt.data, ym.data, beta.data)

    def vjp(g):
        bd = beta.data
        gb = np.stack([(g * y.data).sum(-1) for y in (ys, yt, ym)], axis=-1)
        return g * bd[..., 0:1], g * bd[..., 1:2], g * bd[..., 2:3], gb

    return T.make(out, (ys, yt, ym, beta), vjp, "moe_fuse")


def fused_features(features: list[Value], beta) -> Value:
    """Feature-space mixture used by the feat-MoE ablation (same dims required)."""
    beta = T.as_value(beta)
    out = None
    for j, f in enumerate(features):
        term = f * beta[..., j:j + 1]
        out = term if out is None else out + term
    return out


GATE_CSV_COLUMNS = ("conversation_id", "utterance_index", "beta_s", "beta_t", "beta_m", "label", "prediction")


@dataclass(frozen=True)
class GateRecord:
    conversation_id: str
    utterance_index: int
    beta: tuple[float, float, float]
    label: int
    prediction: int


def write_gate_csv(records: Iterable[GateRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GATE_CSV_COLUMNS)
        for r in records:
            w.writerow([r.conversation_id, int(r.utterance_index), *(repr(float(b)) for b in r.beta),
                        int(r.label), int(r.prediction)])


def read_gate_csv(path) -> list[GateRecord]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [GateRecord(r["conversation_id"], int(r["utterance_index"]),
                       (float(r["beta_s"]), float(r["beta_t"]), float(r["beta_m"])),
                       int(r["label"]), int(r["prediction"])) for r in rows]
