"""Run configuration: one YAML key tree covering every stage.

Parsing is strict: unknown keys anywhere raise :class:`ConfigError` listing
them. Any leaf can be overridden with a dotted path, e.g.
``train.lr=0.005`` or ``gen.session_len_range=[64,128]``; override values are
parsed as YAML scalars/flow collections.

A single ``seed`` drives everything random: data generation, the
train/test split, the train/validation split, initialization, shuffling and
dropout.
"""

from __future__ import annotations

import copy
import dataclasses
from typing import Any, Optional

import yaml

from .datagen import GenSpec
from .logs import ConfigError, TimeBucketRule
from .model import ModelConfig
from .training import TrainConfig
from .views import FreqConfig, StatusConfig

EXAMPLE_YAML = """\
# mvgate run configuration. Unknown keys are rejected.
seed: 0                      # drives generation, splits, init, shuffling, dropout

paths:
  events_in: data/events.jsonl       # gen writes, featurize reads
  labels: data/labels.jsonl          # {user, start, label, kind} per session; optional for featurize
  features_out: data/features.jsonl  # featurize writes, train/eval/ablate read
  vocab: data/vocab.json
  checkpoint: runs/model.ckpt
  reports_dir: runs/reports          # epoch log, eval report, ablation table
  scores: null                       # eval: JSONL {score, label}; null scores the checkpoint

pipeline:
  event_format: jsonl        # jsonl or csv
  max_malformed_fraction: 0.5
  gap_seconds: 14400         # idle gap that closes a session
  test_ratio: 0.2            # held-out share, stratified by label
  bucketing:
    work_start: 8
    work_end: 18
    utc_offset_hours: 0.0

status:
  windows: [3, 7, 15]

freq:
  h_s: 1
  h_l: 7
  epsilon: 1.0e-06
  clamp_max: 10.0

model:
  max_len: 128
  d_model: 32
  n_heads: 2
  n_layers: 2
  mlp_layers: 3
  dropout: 0.1

train:
  lr: 0.001
  epochs: 30
  batch_size: 32
  threshold: 0.5
  val_ratio: 0.2

gen:
  n_users: 40
  sessions_per_user: 10
  session_len_range: [64, 128]
  anomaly_rate: 0.2

gradcheck:
  d_model: 8
  n_heads: 2
  n_layers: 2
  mlp_layers: 3
  seq_len: 6
  batch: 2
  step: 1.0e-05
  tolerance: 1.0e-04
"""


def _fields(cls, exclude=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = None
    return out


def _plain(value):
    """Tuples to lists, recursively, so YAML emits plain sequences."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_BUCKET_KEYS = ("work_start", "work_end", "utc_offset_hours")


def default_tree() -> dict:
    bucket = _fields(TimeBucketRule)
    return _plain({
        "seed": 0,
        "paths": {
            "events_in": "data/events.jsonl",
            "labels": "data/labels.jsonl",
            "features_out": "data/features.jsonl",
            "vocab": "data/vocab.json",
            "checkpoint": "runs/model.ckpt",
            "reports_dir": "runs/reports",
            "scores": None,
        },
        "pipeline": {
            "event_format": "jsonl",
            "max_malformed_fraction": 0.5,
            "gap_seconds": 14400,
            "test_ratio": 0.2,
            "bucketing": {k: bucket[k] for k in _BUCKET_KEYS},
        },
        "status": _fields(StatusConfig),
        "freq": _fields(FreqConfig),
        "model": _fields(ModelConfig, exclude=("vocab_size",)),
        "train": _fields(TrainConfig, exclude=("seed", "max_len")),
        "gen": _fields(GenSpec, exclude=("seed",)),
        "gradcheck": {"d_model": 8, "n_heads": 2, "n_layers": 2, "mlp_layers": 3, "seq_len": 6,
                      "batch": 2, "step": 1e-5, "tolerance": 1e-4},
    })


def _coerce(default, value):
    """Float leaves accept ints and YAML-1.1 strings such as ``1e-9``."""
    if isinstance(default, float) and not isinstance(value, bool):
        if isinstance(value, int):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    return value


# Leaves whose value is itself a mapping and must not be walked key by key.
_OPAQUE = {("gen", "anomaly_mix")}


def _merge(base: dict, over: dict, path=()) -> dict:
    unknown = []
    out = copy.deepcopy(base)

    def walk(b, o, p):
        for k, v in o.items():
            here = p + (k,)
            if k not in b:
                unknown.append(".".join(map(str, here)))
            elif isinstance(b[k], dict) and here not in _OPAQUE:
                if not isinstance(v, dict):
                    raise ConfigError(f"{'.'.join(here)} must be a mapping")
                walk(b[k], v, here)
            else:
                b[k] = _coerce(b[k], _plain(v))

    walk(out, over or {}, path)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return out


class RunConfig:
    """Validated configuration tree with typed accessors per stage."""

    def __init__(self, tree: Optional[dict] = None):
        if tree is not None and not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
        self.tree = _merge(default_tree(), tree or {})
        self._validate()

    # construction -----------------------------------------------------
    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            tree = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls(tree or {})

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False, default_flow_style=False)

    def with_overrides(self, assignments) -> "RunConfig":
        tree = copy.deepcopy(self.tree)
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like dotted.key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = tree
            for i, part in enumerate(parts[:-1]):
                if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config keys: {'.'.join(parts[:i + 1])}")
                node = node[part]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config keys: {key.strip()}")
            node[parts[-1]] = _coerce(node[parts[-1]], _plain(yaml.safe_load(raw)))
        return RunConfig(tree)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.tree == other.tree

    def __getitem__(self, key: str) -> Any:
        node = self.tree
        for part in key.split("."):
            node = node[part]
        return node

    # typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def status_config(self) -> StatusConfig:
        return StatusConfig(windows=tuple(self.tree["status"]["windows"]))

    def freq_config(self) -> FreqConfig:
        return FreqConfig(**self.tree["freq"])

    def bucketing(self) -> TimeBucketRule:
        return TimeBucketRule(**self.tree["pipeline"]["bucketing"])

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.tree["model"])

    def train_config(self) -> TrainConfig:
        t = dict(self.tree["train"])
        t["betas"] = tuple(t["betas"])
        return TrainConfig(seed=self.seed, max_len=int(self.tree["model"]["max_len"]), **t)

    def gen_spec(self) -> GenSpec:
        g = {k: tuple(v) if isinstance(v, list) else v for k, v in self.tree["gen"].items()}
        return GenSpec(seed=self.seed, **g)

    def _validate(self) -> None:
        try:
            self.status_config()
            self.freq_config()
            self.bucketing()
            self.model_config(vocab_size=4)
            self.train_config()
            self.gen_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        p = self.tree["pipeline"]
        if not 0.0 < float(p["test_ratio"]) < 1.0:
            raise ConfigError("pipeline.test_ratio must be in (0, 1)")
        if int(p["gap_seconds"]) <= 0:
            raise ConfigError("pipeline.gap_seconds must be positive")
        if p["event_format"] not in ("jsonl", "csv"):
            raise ConfigError("pipeline.event_format must be jsonl or csv")
        if not isinstance(self.tree["seed"], int) or isinstance(self.tree["seed"], bool):
            raise ConfigError("seed must be an integer")
