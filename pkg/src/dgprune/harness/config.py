"""Experiment configuration: YAML schema, validation, hashing and presets.

Schema (all keys optional except ``task`` and ``domains.source``)::

    name: vector-dg
    task: vector | nucleus
    model: {widths: [16, 16], image_size: 32}   # input width comes from the source domain
    domains:
      source:   [<DomainSpec fields>, ...]
      invasion: [...]
      unseen:   [...]
    methods: [erm, erm-f, ours-all, ours-encoder, ours-decoder]
    schedule: {p: 0.1, n: 4, k: 8, ratio: [1, 1], accumulation: sum-abs}
    pretrain: {lr, max_epochs, steps_per_epoch, patience, max_steps, ...}
    train:    {...}   # used by erm, erm-f and every post-prune fine-tune
    batch_size: 8
    data: {train: 400, val: 200, test: 1000}
    eval: {radius: 16, threshold: 0.5, nms_radius: 4, border: null}
    seeds: [0, 1, 2, 3, 4]
    out: runs/vector-dg
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..domains import N_CLASSES, DomainSpec
from ..nets import ModelConfig
from ..prune import PruneSchedule
from ..training import TrainConfig

METHODS = ("erm", "erm-f", "ours-all", "ours-encoder", "ours-decoder")
GROUPS = ("source", "invasion", "unseen")


class ExperimentError(ValueError):
    pass


@dataclass
class DataSizes:
    train: int = 400
    val: int = 200
    test: int = 1000


@dataclass
class EvalConfig:
    radius: float = 16.0
    threshold: float = 0.5
    nms_radius: float = 4.0
    border: float | None = None  # px excluded at image edges; None keeps everything


@dataclass
class ExperimentConfig:
    task: str
    domains: dict
    name: str = "experiment"
    model: dict = field(default_factory=dict)
    methods: tuple = ("erm", "erm-f", "ours-all")
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    batch_size: int = 8
    data: DataSizes = field(default_factory=DataSizes)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple = (0,)
    out: str = "runs"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.task not in ("vector", "nucleus"):
            raise ExperimentError(f"task must be 'vector' or 'nucleus', got {self.task!r}")
        unknown = set(self.domains) - set(GROUPS)
        if unknown:
            raise ExperimentError(f"unknown domain groups {sorted(unknown)}")
        if not self.domains.get("source"):
            raise ExperimentError("at least one source domain is required")
        ids = {g: {d.domain_id for d in self.domains.get(g, ())} for g in GROUPS}
        for g in ("source", "invasion"):
            if ids[g] & ids["unseen"]:
                raise ExperimentError(f"{g} and unseen domains overlap: {sorted(ids[g] & ids['unseen'])}")
        for g in GROUPS:
            for d in self.domains.get(g, ()):
                if d.task != self.task:
                    raise ExperimentError(f"domain {d.domain_id} is a {d.task} domain in a {self.task} experiment")
                if d.n_classes > N_CLASSES or d.n_classes != self.n_classes:
                    raise ExperimentError(f"domain {d.domain_id}: n_classes must equal {self.n_classes}"
                                          f" and stay within the {N_CLASSES}-class palette")
        for m in self.methods:
            if m not in METHODS:
                raise ExperimentError(f"unknown method {m!r}; choose from {METHODS}")
        if not self.seeds:
            raise ExperimentError("seeds must not be empty")
        if any(m != "erm" for m in self.methods) and not self.domains.get("invasion"):
            raise ExperimentError("erm-f and ours-* need at least one invasion domain")
        self.model_config(self.seeds[0])

    @property
    def n_classes(self) -> int:
        return self.domains["source"][0].n_classes

    @property
    def image_size(self) -> int:
        return int(self.model.get("image_size", 32))

    def model_config(self, seed: int) -> ModelConfig:
        if self.task == "vector":
            src = self.domains["source"][0]
            return ModelConfig("mlp", (src.n_features,), list(self.model.get("widths", [16, 16])),
                               self.n_classes, seed=seed)
        s = self.image_size
        return ModelConfig("encdec", (3, s, s), list(self.model.get("widths", [8, 16])), self.n_classes, seed=seed)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "model": dict(self.model),
            "domains": {g: [d.to_dict() for d in self.domains.get(g, ())] for g in GROUPS},
            "methods": list(self.methods),
            "schedule": {k: v for k, v in self.schedule.to_dict().items() if k != "r"},
            "pretrain": self.pretrain.to_dict(),
            "train": self.train.to_dict(),
            "batch_size": self.batch_size,
            "data": vars(self.data).copy(),
            "eval": vars(self.eval).copy(),
            "seeds": list(self.seeds),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            task = d.pop("task")
            raw_domains = d.pop("domains")
        except KeyError as e:
            raise ExperimentError(f"config is missing required key {e.args[0]!r}") from None
        domains = {}
        for g, specs in (raw_domains or {}).items():
            domains[g] = [DomainSpec.from_dict({"task": task, **s}) for s in (specs or [])]
        kw = {}
        for key, typ in (("schedule", PruneSchedule), ("pretrain", TrainConfig), ("train", TrainConfig),
                         ("data", DataSizes), ("eval", EvalConfig)):
            if key in d:
                try:
                    kw[key] = typ(**(d.pop(key) or {}))
                except TypeError as e:
                    raise ExperimentError(f"{key}: {e}") from None
        known = {"name", "model", "methods", "batch_size", "seeds", "out"}
        extra = set(d) - known
        if extra:
            raise ExperimentError(f"unknown config keys {sorted(extra)}")
        return cls(task=task, domains=domains, **kw, **d)

    def hash(self) -> str:
        """sha256 over every input that affects results (the output dir is excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()

    def with_overrides(self, seeds=None, out=None, methods=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seeds is not None:
            d["seeds"] = list(seeds)
        if out is not None:
            d["out"] = str(out)
        if methods is not None:
            d["methods"] = list(methods)
        return ExperimentConfig.from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def load_config(source) -> ExperimentConfig:
    """Read a YAML file, or return a copy of a named preset."""
    if str(source) in PRESETS:
        return ExperimentConfig.from_dict(PRESETS[str(source)])
    path = Path(source)
    if not path.is_file():
        raise ExperimentError(f"{source}: no such config file or preset ({', '.join(sorted(PRESETS))})")
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ExperimentError(f"{source}: top level must be a mapping")
    return ExperimentConfig.from_dict(data)


def _vector_domain(domain_id, **kw):
    base = dict(domain_id=domain_id, categories=[0, 1, 2], n_classes=3)
    return {**base, **kw}


# Planted spurious coordinate: label-coded 95% of the time in the source,
# pure (wider) noise elsewhere. Pruning more than ~10% of this small MLP starts
# removing the informative first-layer rows.
VECTOR_DG = {
    "name": "vector-dg",
    "task": "vector",
    "model": {"widths": [16, 16]},
    "domains": {
        "source": [_vector_domain("src", spurious_rho=0.95)],
        "invasion": [_vector_domain("inv", rotation_deg=10, spurious_noise=3.0)],
        "unseen": [_vector_domain("uns", rotation_deg=-10, spurious_noise=3.0)],
    },
    "methods": ["erm", "erm-f", "ours-all"],
    "schedule": {"p": 0.1, "n": 4, "k": 8},
    "pretrain": {"lr": 5e-3, "max_epochs": 40, "steps_per_epoch": 25, "patience": 8},
    "train": {"lr": 5e-3, "max_epochs": 40, "steps_per_epoch": 25, "patience": 8},
    "batch_size": 8,
    "data": {"train": 400, "val": 200, "test": 1000},
    "seeds": [0, 1, 2, 3, 4],
    "out": "runs/vector-dg",
}

_ALL7 = list(range(N_CLASSES))

# Seven classes; the invasion domain never shows classes 5 and 6.
VECTOR_MISMATCH = {
    **VECTOR_DG,
    "name": "vector-mismatch",
    "domains": {
        "source": [_vector_domain("src", categories=_ALL7, n_classes=N_CLASSES, spurious_rho=0.95)],
        "invasion": [_vector_domain("inv", categories=[0, 1, 2, 3, 4], n_classes=N_CLASSES, rotation_deg=10,
                                    spurious_noise=3.0)],
        "unseen": [_vector_domain("uns", categories=_ALL7, n_classes=N_CLASSES, rotation_deg=-10,
                                  spurious_noise=3.0)],
    },
    "methods": ["erm-f", "ours-all"],
    "out": "runs/vector-mismatch",
}

NUCLEUS_MISMATCH = {
    "name": "nucleus-mismatch",
    "task": "nucleus",
    "model": {"widths": [8, 16], "image_size": 32},
    "domains": {
        "source": [{"domain_id": "src", "categories": _ALL7, "hue": "neutral"}],
        "invasion": [{"domain_id": "inv", "categories": [0, 1, 2, 3, 4], "hue": "partial blue", "texture_seed": 1}],
        "unseen": [{"domain_id": "uns", "categories": _ALL7, "hue": "brown red", "texture_seed": 2}],
    },
    "methods": ["erm-f", "ours-all"],
    # this 3.2k-parameter net does not recover from losing 10%; 2% does
    "schedule": {"p": 0.02, "n": 4, "k": 8},
    "pretrain": {"lr": 5e-3, "max_epochs": 24, "steps_per_epoch": 25, "patience": 100},
    "train": {"lr": 5e-3, "max_epochs": 12, "steps_per_epoch": 25, "patience": 100},
    "batch_size": 8,
    "data": {"train": 200, "val": 50, "test": 50},
    "eval": {"radius": 4.0, "threshold": 0.5, "nms_radius": 3.0},
    "seeds": [0],
    "out": "runs/nucleus-mismatch",
}

# Settings reported for the Ki67 experiments. The 1e-4 ratio only prunes
# anything on models with >= ~10^4 parameters per step.
PAPER_KI67 = {
    **NUCLEUS_MISMATCH,
    "name": "paper-ki67",
    "model": {"widths": [16, 32, 64], "image_size": 64},
    "methods": list(METHODS),
    "schedule": {"p": 1e-4, "n": 4, "k": 8, "ratio": [1, 1]},
    "pretrain": {"lr": 5e-4, "max_epochs": 200, "steps_per_epoch": 20, "patience": 30},
    "train": {"lr": 5e-4, "max_epochs": 200, "steps_per_epoch": 20, "patience": 30, "max_steps": 500},
    "eval": {"radius": 16.0, "threshold": 0.5, "nms_radius": 4.0},
    "out": "runs/paper-ki67",
}

PRESETS = {
    "vector-dg": VECTOR_DG,
    "vector-mismatch": VECTOR_MISMATCH,
    "nucleus-mismatch": NUCLEUS_MISMATCH,
    "paper-ki67": PAPER_KI67,
}
