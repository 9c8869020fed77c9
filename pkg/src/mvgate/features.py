"""Session featurization: tokens -> (z ids, status, frequency) records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np

from .logs import Session, TimeBucketRule, TokenVocab, tokenize_session
from .views import FreqConfig, StatusConfig, derive_views


@dataclass
class FeaturizedSession:
    user: str
    label: Optional[int]
    z: list
    s: list
    f: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.z) == len(self.s) == len(self.f)):
            raise ValueError("z, s and f must be aligned")

    def __len__(self) -> int:
        return len(self.z)

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "label": self.label,
            "z": [int(x) for x in self.z],
            "s": [int(x) for x in self.s],
            "f": [float(f"{x:.9g}") for x in self.f],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeaturizedSession":
        return cls(obj["user"], obj.get("label"), list(obj["z"]), list(obj["s"]), list(obj["f"]),
                   dict(obj.get("meta", {})))


def featurize_tokens(tokens: list, vocab: TokenVocab, status_cfg: StatusConfig = StatusConfig(),
                     freq_cfg: FreqConfig = FreqConfig(), user: str = "", label: Optional[int] = None,
                     meta: Optional[dict] = None) -> FeaturizedSession:
    """Views are computed on the raw token strings, before vocabulary lookup,
    so distinct unseen tokens stay distinct in the statistics."""
    views = derive_views(tokens, status_cfg, freq_cfg)
    m = {"clamped_count": views.clamped_count}
    m.update(meta or {})
    return FeaturizedSession(user, label, vocab.encode_seq(tokens), views.s.tolist(), views.f.tolist(), m)


def featurize_sessions(sessions: Iterable[Session], vocab: TokenVocab,
                       status_cfg: StatusConfig = StatusConfig(), freq_cfg: FreqConfig = FreqConfig(),
                       bucketing: TimeBucketRule = TimeBucketRule()) -> list:
    out = []
    for sess in sessions:
        if len(sess) == 0:
            continue
        out.append(featurize_tokens(tokenize_session(sess, bucketing), vocab, status_cfg, freq_cfg,
                                    user=sess.user_id, label=sess.label))
    return out


def write_features(records: Iterable[FeaturizedSession], fh: TextIO) -> None:
    for r in records:
        fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_features(fh: TextIO) -> list:
    return [FeaturizedSession.from_json(json.loads(line)) for line in fh if line.strip()]


def labels_of(records: list) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)
