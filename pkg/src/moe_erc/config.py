"""Run configuration: one JSON document plus dotted-path overrides.

Layout::

    {
      "data":   {"synth": {...SynthConfig fields...}}
                or {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"},
      "model":  {"can": {...}, "fusion": {...}, "gate_hidden": null},
      "train":  {...TrainConfig fields except loss...},
      "loss":   {"gamma": 3, "lambda": 1, "alpha": 0.1, "tau": 1},
      "output_dir": "runs"
    }

Embedding dims and class count come from the data; the model section may
repeat them but must agree. Relative data paths resolve against the config
file's directory; ``output_dir`` resolves against the working directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .dataset import Dataset, SynthConfig, generate, load_jsonl
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = ("data", "model", "train", "loss", "output_dir")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 1)."""


def parse_override(token: str, value: str | None = None) -> tuple[list[str], object]:
    """``--train.seed=7`` -> (["train", "seed"], 7). Values parse as JSON, else stay strings."""
    if not token.startswith("--"):
        raise ConfigError(f"override must look like --section.key=value, got {token!r}")
    body = token[2:]
    if "=" in body:
        body, value = body.split("=", 1)
    if value is None:
        raise ConfigError(f"override {token!r} has no value")
    keys = body.split(".")
    if not keys[0] or keys[0] not in SECTIONS or any(not k for k in keys):
        raise ConfigError(f"override {token!r}: path must start with one of {SECTIONS}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return keys, parsed


def apply_overrides(doc: dict, overrides: list[tuple[list[str], object]]) -> dict:
    doc = copy.deepcopy(doc)
    for keys, value in overrides:
        node = doc
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {'.'.join(keys)} crosses non-object {k!r}")
            node = nxt
        node[keys[-1]] = value
    return doc


@dataclass(frozen=True)
class DataSpec:
    synth: SynthConfig | None = None
    paths: dict[str, Path] | None = None

    def load(self) -> tuple[Dataset, Dataset, Dataset]:
        if self.synth is not None:
            return generate(self.synth)
        return tuple(load_jsonl(self.paths[s], split=s) for s in SPLITS)  # type: ignore[return-value]

    def dims(self) -> tuple[int, int, int]:
        """(d_s, d_t, class_count) without materialising the data."""
        if self.synth is not None:
            return self.synth.d_s, self.synth.d_t, self.synth.class_count
        meta_path = self.paths["train"].with_name(self.paths["train"].stem + ".meta.json")
        if not meta_path.exists():
            raise ConfigError(f"missing sidecar {meta_path}")
        meta = json.loads(meta_path.read_text())
        return int(meta["d_s"]), int(meta["d_t"]), int(meta["class_count"])

    def to_dict(self) -> dict:
        if self.synth is not None:
            return {"synth": asdict(self.synth)}
        return {s: str(p) for s, p in self.paths.items()}


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec
    model: ModelConfig
    train: TrainConfig
    output_dir: Path

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def resolved(self) -> dict:
        """Every effective setting, defaults included (output_dir excluded)."""
        model = self.model.to_dict()
        model.pop("variant")
        train = asdict(self.train)
        train.pop("loss")
        return {"data": self.data.to_dict(), "model": model, "train": train, "loss": self.loss.to_dict()}

    def run_id(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return self.output_dir / self.run_id()

    def with_cell(self, **cell) -> "RunConfig":
        """Copy with sweep-cell fields replaced (variant, gamma, lambda, alpha, tau, seed)."""
        loss = {k: cell[k] for k in ("gamma", "alpha", "tau") if k in cell}
        if "lambda" in cell:
            loss["lam"] = cell["lambda"]
        tr = {}
        if "variant" in cell:
            tr["variant"] = cell["variant"]
        if "seed" in cell:
            tr["seed"] = int(cell["seed"])
        try:
            train = replace(self.train, loss=replace(self.loss, **loss), **tr)
            model = replace(self.model, variant=train.variant)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad sweep cell {cell}: {e}") from None
        return replace(self, train=train, model=model)


def _data_spec(d: dict, base: Path) -> DataSpec:
    if not isinstance(d, dict) or not d:
        raise ConfigError("data section must be an object with 'synth' or train/val/test paths")
    if "synth" in d:
        if set(d) != {"synth"}:
            raise ConfigError(f"unknown data keys alongside 'synth': {sorted(set(d) - {'synth'})}")
        try:
            return DataSpec(synth=SynthConfig.from_dict(d["synth"] or {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data.synth: {e}") from None
    unknown = set(d) - set(SPLITS)
    if unknown or set(d) != set(SPLITS):
        raise ConfigError(f"data needs exactly {SPLITS} paths (or 'synth'); got {sorted(d)}")
    paths = {}
    for split in SPLITS:
        p = Path(d[split])
        p = p if p.is_absolute() else (base / p)
        if not p.exists():
            raise ConfigError(f"data.{split}: {p} does not exist")
        paths[split] = p
    return DataSpec(paths=paths)


def build_run_config(doc: dict, base_dir: Path | str = ".", overrides=(), variant: str | None = None) -> RunConfig:
    base_dir = Path(base_dir)
    doc = apply_overrides(doc, list(overrides))
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "data" not in doc:
        raise ConfigError("config lacks a data section")
    data = _data_spec(doc["data"], base_dir)
    d_s, d_t, k = data.dims()
    try:
        loss = LossConfig.from_dict(doc.get("loss") or {})
        train_doc = dict(doc.get("train") or {})
        if "loss" in train_doc:
            raise ConfigError("loss settings belong in the top-level loss section")
        if variant is not None:
            train_doc["variant"] = variant
        train = TrainConfig.from_dict(train_doc, loss=loss)
        model_doc = dict(doc.get("model") or {})
        if "variant" in model_doc:
            raise ConfigError("variant belongs in the train section (or --variant)")
        for key, val in (("d_s", d_s), ("d_t", d_t), ("class_count", k)):
            if key in model_doc and model_doc[key] != val:
                raise ConfigError(f"model.{key}={model_doc[key]} disagrees with the data ({val})")
            model_doc[key] = val
        model_doc["variant"] = train.variant
        model = ModelConfig.from_dict(model_doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(data, model, train, Path(doc.get("output_dir") or "runs"))


def load_run_config(path, overrides=(), variant: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_run_config(doc, path.parent, overrides, variant)
