"""Composite experiment configuration with a stable content hash.

Every command stamps its outputs with the hash of the canonicalized
config so runs are collision-free and reproducible byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .networks import NetworkSpec
from .phantom import PhantomConfig
from .preprocess import PreprocessConfig
from .training import TrainConfig


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: dict) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    network: NetworkSpec = field(default_factory=lambda: NetworkSpec(architecture="MRRN_DS"))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    phantom_cases: int = 8
    manifest: str | None = None
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        # One master seed for the run; training inherits it.
        self.train.seed = self.seed

    def to_json(self) -> dict:
        d = {
            "network": self.network.to_json(),
            "preprocess": asdict(self.preprocess),
            "train": self.train.to_json(),
            "phantom": asdict(self.phantom),
            "phantom_cases": self.phantom_cases,
            "manifest": self.manifest,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }
        return d

    @property
    def hash(self) -> str:
        # out_dir and manifest location do not change what is computed.
        d = self.to_json()
        d.pop("out_dir")
        d.pop("manifest")
        return config_hash(d)

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.hash

    @staticmethod
    def from_json(d: dict) -> "ExperimentConfig":
        kwargs = dict(d)
        if "network" in kwargs:
            kwargs["network"] = NetworkSpec.from_json(kwargs["network"])
        if "preprocess" in kwargs:
            kwargs["preprocess"] = _dataclass_from(PreprocessConfig, kwargs["preprocess"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig.from_json(kwargs["train"])
        if "phantom" in kwargs:
            kwargs["phantom"] = _dataclass_from(PhantomConfig, kwargs["phantom"])
        return ExperimentConfig(**kwargs)

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_json(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _dataclass_from(cls, d: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in fields:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)
