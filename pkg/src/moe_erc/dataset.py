"""Conversations of per-utterance speech/text embeddings.

Embeddings are always inputs: either exported by an external encoder into the
JSONL format read by :func:`load_jsonl`, or produced by :func:`generate`, a
prototype-plus-noise stand-in for frozen encoders whose per-modality
informativeness is set by a signal-to-noise ratio.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import make_rng


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speech: np.ndarray
    text: np.ndarray
    label: int


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[UtteranceRecord, ...]

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)

    def speech_matrix(self) -> np.ndarray:
        return np.stack([u.speech for u in self.utterances])

    def text_matrix(self) -> np.ndarray:
        return np.stack([u.text for u in self.utterances])


@dataclass(frozen=True)
class Dataset:
    conversations: tuple[Conversation, ...]
    class_count: int
    d_s: int
    d_t: int
    split: str = "train"
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class{i}" for i in range(self.class_count)))
        self.validate()

    def __len__(self) -> int:
        return len(self.conversations)

    @property
    def utterance_count(self) -> int:
        return sum(len(c) for c in self.conversations)

    def validate(self) -> None:
        if len(self.class_names) != self.class_count:
            raise DatasetError("class_names length differs from class_count")
        for conv in self.conversations:
            if not conv.utterances:
                raise DatasetError(f"conversation {conv.id!r} has no utterances")
            for u in conv.utterances:
                if u.speech.shape != (self.d_s,) or u.text.shape != (self.d_t,):
                    raise DatasetError(
                        f"utterance {u.id!r}: embedding dims {u.speech.shape}/{u.text.shape}, "
                        f"expected ({self.d_s},)/({self.d_t},)")
                if not 0 <= u.label < self.class_count:
                    raise DatasetError(f"utterance {u.id!r}: label {u.label} out of range [0, {self.class_count})")

    def label_array(self) -> np.ndarray:
        return np.concatenate([c.labels for c in self.conversations])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        head = (self.class_count, self.d_s, self.d_t, self.class_names, len(self.conversations))
        if head != (other.class_count, other.d_s, other.d_t, other.class_names, len(other.conversations)):
            return False
        for a, b in zip(self.conversations, other.conversations):
            if a.id != b.id or len(a) != len(b):
                return False
            for ua, ub in zip(a.utterances, b.utterances):
                if (ua.id, ua.label) != (ub.id, ub.label):
                    return False
                if not (np.array_equal(ua.speech, ub.speech) and np.array_equal(ua.text, ub.text)):
                    return False
        return True


# -------------------------------------------------------------------- JSONL I/O

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name[: -len(path.suffix)] + ".meta.json" if path.suffix else path.name + ".meta.json")


def load_jsonl(path, split: str | None = None, meta: dict | None = None) -> Dataset:
    """Read one conversation per line plus the ``<name>.meta.json`` sidecar.

    Dimensions and class count come from the sidecar (or ``meta``); every line
    is checked against them and errors carry the 1-based line number.
    """
    path = Path(path)
    if meta is None:
        mp = _meta_path(path)
        if not mp.exists():
            raise DatasetError(f"missing sidecar {mp}")
        meta = json.loads(mp.read_text())
    try:
        class_count, d_s, d_t = int(meta["class_count"]), int(meta["d_s"]), int(meta["d_t"])
    except KeyError as e:
        raise DatasetError(f"sidecar lacks {e}") from None
    names = tuple(meta.get("class_names") or ())
    convs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                utts = tuple(
                    UtteranceRecord(str(u["id"]), np.asarray(u["speech"], dtype=np.float64),
                                    np.asarray(u["text"], dtype=np.float64), int(u["label"]))
                    for u in obj["utterances"])
                conv = Conversation(str(obj["id"]), utts)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed conversation ({e})") from None
            try:
                Dataset((conv,), class_count, d_s, d_t, class_names=names)
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            convs.append(conv)
    if not convs:
        raise DatasetError(f"{path}: no conversations")
    return Dataset(tuple(convs), class_count, d_s, d_t, split=split or path.stem, class_names=names)


def save_jsonl(ds: Dataset, path) -> Path:
    """Write ``ds`` as JSONL and its sidecar; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for conv in ds.conversations:
            obj = {"id": conv.id, "utterances": [
                {"id": u.id, "label": int(u.label), "speech": u.speech.tolist(), "text": u.text.tolist()}
                for u in conv.utterances]}
            fh.write(json.dumps(obj) + "\n")
    mp = _meta_path(path)
    mp.write_text(json.dumps({"class_count": ds.class_count, "d_s": ds.d_s, "d_t": ds.d_t,
                              "class_names": list(ds.class_names)}, indent=2) + "\n")
    return mp


# -------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthConfig:
    class_count: int = 4
    d_s: int = 64
    d_t: int = 64
    conversations_per_split: tuple[int, int, int] = (32, 8, 8)
    utterance_count_range: tuple[int, int] = (6, 12)
    speech_snr: float = 4.0
    text_snr: float = 4.0
    class_priors: tuple[float, ...] | None = None
    emotion_shift_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.class_priors is None:
            object.__setattr__(self, "class_priors", tuple([1.0 / self.class_count] * self.class_count))
        object.__setattr__(self, "conversations_per_split", tuple(int(n) for n in self.conversations_per_split))
        object.__setattr__(self, "utterance_count_range", tuple(int(n) for n in self.utterance_count_range))
        pri = np.asarray(self.class_priors, dtype=float)
        if len(pri) != self.class_count or abs(pri.sum() - 1.0) > 1e-9 or (pri < 0).any():
            raise ValueError("class_priors must be a probability vector of length class_count")
        if self.speech_snr < 0 or self.text_snr < 0:
            raise ValueError("snr must be >= 0")
        lo, hi = self.utterance_count_range
        if not 1 <= lo <= hi:
            raise ValueError("utterance_count_range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.emotion_shift_prob <= 1.0:
            raise ValueError("emotion_shift_prob must lie in [0, 1]")
        if len(self.conversations_per_split) != 3:
            raise ValueError("conversations_per_split needs (train, val, test) counts")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("conversations_per_split", "utterance_count_range", "class_priors"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _label_chain(rng: np.random.Generator, n: int, priors: np.ndarray, shift: float) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    labels[0] = rng.choice(len(priors), p=priors)
    for k in range(1, n):
        cur = labels[k - 1]
        others = priors.copy()
        others[cur] = 0.0
        if rng.random() < shift and others.sum() > 0:
            labels[k] = rng.choice(len(priors), p=others / others.sum())
        else:
            labels[k] = cur
    return labels


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Draw (train, val, test) splits; a pure function of ``cfg``."""
    proto_rng = make_rng(cfg.seed, 0)
    mu_s = _unit_rows(proto_rng, cfg.class_count, cfg.d_s)
    mu_t = _unit_rows(proto_rng, cfg.class_count, cfg.d_t)
    priors = np.asarray(cfg.class_priors, dtype=float)
    lo, hi = cfg.utterance_count_range
    names = tuple(f"class{i}" for i in range(cfg.class_count))
    out = []
    for si, (split, n_conv) in enumerate(zip(("train", "val", "test"), cfg.conversations_per_split)):
        rng = make_rng(cfg.seed, 1 + si)
        convs = []
        for ci in range(n_conv):
            n = int(rng.integers(lo, hi + 1))
            labels = _label_chain(rng, n, priors, cfg.emotion_shift_prob)
            es = cfg.speech_snr * mu_s[labels] + rng.standard_normal((n, cfg.d_s))
            et = cfg.text_snr * mu_t[labels] + rng.standard_normal((n, cfg.d_t))
            cid = f"{split}-{ci:04d}"
            utts = tuple(UtteranceRecord(f"{cid}-{k:03d}", es[k], et[k], int(labels[k])) for k in range(n))
            convs.append(Conversation(cid, utts))
        out.append(Dataset(tuple(convs), cfg.class_count, cfg.d_s, cfg.d_t, split=split, class_names=names))
    return out[0], out[1], out[2]


def prototypes(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """The class prototype rows (speech, text) used by :func:`generate`."""
    rng = make_rng(cfg.seed, 0)
    return _unit_rows(rng, cfg.class_count, cfg.d_s), _unit_rows(rng, cfg.class_count, cfg.d_t)


# --------------------------------------------------------------------- batching

@dataclass
class Batch:
    """Whole conversations padded to the longest one; ``mask`` marks real utterances."""
    ids: list[str]
    speech: np.ndarray   # (B, T, d_s)
    text: np.ndarray     # (B, T, d_t)
    labels: np.ndarray   # (B, T), 0 at padding
    mask: np.ndarray     # (B, T) bool
    lengths: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.ids)


def collate(conversations: Sequence[Conversation]) -> Batch:
    t = max(len(c) for c in conversations)
    b = len(conversations)
    d_s = conversations[0].utterances[0].speech.shape[0]
    d_t = conversations[0].utterances[0].text.shape[0]
    speech = np.zeros((b, t, d_s))
    text = np.zeros((b, t, d_t))
    labels = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, c in enumerate(conversations):
        n = len(c)
        speech[i, :n] = c.speech_matrix()
        text[i, :n] = c.text_matrix()
        labels[i, :n] = c.labels
        mask[i, :n] = True
    return Batch([c.id for c in conversations], speech, text, labels, mask, [len(c) for c in conversations])


def batch(conversations: Sequence[Conversation], max_batch: int) -> list[Batch]:
    """Split into consecutive groups of at most ``max_batch`` whole conversations."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    convs = list(conversations)
    return [collate(convs[i:i + max_batch]) for i in range(0, len(convs), max_batch)]


def write_dataset_dir(splits: Sequence[Dataset], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ds in splits:
        p = out_dir / f"{ds.split}.jsonl"
        save_jsonl(ds, p)
        paths.append(p)
    return paths
