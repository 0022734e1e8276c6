"""Run configuration: a JSON document mirroring TrainConfig / ModelConfig field names.

Defaults are the full-scale hyper-parameters (V=32, p=4, T=1000, lambda=0.1,
6 experts, window 4, lr 1e-4, batch 128). ``ci_profile`` and ``micro_profile``
give the scaled-down settings used for desk runs and tests.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .geometry import SHAPE_KINDS
from .model import ModelConfig


@dataclass
class DataConfig:
    path: str | None = None
    kinds: list[str] = field(default_factory=lambda: ["chairlike", "cross", "box"])
    per_class: int = 8
    n_points: int = 2048

    def validate(self) -> "DataConfig":
        bad = [k for k in self.kinds if k not in SHAPE_KINDS]
        if bad:
            raise ValueError(f"unknown synthetic kinds {bad}")
        if self.path is None and (not self.kinds or self.per_class < 1):
            raise ValueError("empty dataset")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        return self


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 128
    steps: int = 1000
    lam: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.T != self.model.T:
            raise ValueError(f"T={self.T} disagrees with model.T={self.model.T}")
        self.model.validate()
        self.data.validate()
        if self.data.path is None and len(self.data.kinds) > self.model.num_classes:
            raise ValueError(
                f"{len(self.data.kinds)} synthetic classes but model.num_classes={self.model.num_classes}"
            )
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lam" in d:
            raise ValueError("unknown config keys: ['lam']")
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = d.pop("model", {})
        data = d.pop("data", {})
        data_known = {f.name for f in fields(DataConfig)}
        if set(data) - data_known:
            raise ValueError(f"unknown data config keys: {sorted(set(data) - data_known)}")
        cfg = cls(model=ModelConfig.from_dict(model), data=DataConfig(**data), **d)
        # T lives in both places; a file that only sets the top-level one means both
        if "T" in d and "T" not in model:
            cfg.model.T = cfg.T
        return cfg


def read_config_doc(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"config {path} is not valid JSON: {e.msg} at line {e.lineno}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return doc


def flatten(doc: dict, prefix: str = "") -> dict:
    """Nested config document -> dotted keys (lists stay leaves)."""
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config (or defaults), apply dotted-key overrides, then FD3D_SEED."""
    doc = read_config_doc(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        node = doc
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    env_seed = os.environ.get("FD3D_SEED")
    if env_seed is not None:
        doc["seed"] = int(env_seed)
    return TrainConfig.from_dict(doc).validate()


def ci_profile() -> dict:
    """Desk-scale profile: V=32, p=4, width 132 (nearest multiple of 6 above 128)."""
    return {
        "batch": 16,
        "lr": 1e-3,
        "model": {"D": 132, "encoder_depth": 4, "encoder_heads": 4, "decoder_depth": 2,
                  "decoder_width": 132, "decoder_heads": 4, "wa_layers": [1]},
    }


def micro_profile() -> dict:
    """Tiny profile for gradient checks and overfit probes: V=8, p=2, width 24."""
    return {
        "batch": 8,
        "lr": 1e-3,
        "T": 1000,
        "model": {"V": 8, "p": 2, "D": 24, "encoder_depth": 2, "encoder_heads": 2, "decoder_depth": 2,
                  "decoder_width": 24, "decoder_heads": 2, "wa_layers": [1], "R": 2, "num_classes": 2},
        "data": {"kinds": ["sphere", "box"], "per_class": 4, "n_points": 256},
    }
