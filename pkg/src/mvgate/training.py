"""Splitting, batching, the Adam training loop, scoring, metrics, ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .features import FeaturizedSession
from .logs import CLS, PAD
from .model import Batch, ModelConfig, ParamStore, bce_loss, forward, init_params
from .tensor import NumericOverflowError, backward

log = logging.getLogger(__name__)


class StratificationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    max_len: int = 128
    seed: int = 0
    threshold: float = 0.5
    val_ratio: float = 0.2

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.max_len < 2:
            raise ValueError("epochs, batch_size must be positive and max_len >= 2")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _labels(dataset) -> np.ndarray:
    labels = [r.label for r in dataset]
    if any(lab is None for lab in labels):
        raise StratificationError("every example needs a label to stratify")
    return np.asarray(labels, dtype=np.int64)


def split(dataset: Sequence, ratio: float = 0.8, seed: int = 0):
    """Stratified, seeded train/test split. Returns ``(train, test)`` lists."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    y = _labels(dataset)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            raise StratificationError(f"label {cls} has {len(idx)} example(s); need at least 2 to stratify")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(ratio * len(idx))), 1), len(idx) - 1)
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    train_idx, test_idx = sorted(train_idx), sorted(test_idx)
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def kfold(dataset: Sequence, k: int = 5, seed: int = 0) -> list:
    """Stratified k-fold: list of ``(train, validation)`` pairs."""
    if k < 2:
        raise ValueError("k must be >= 2")
    y = _labels(dataset)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise StratificationError(f"label {cls} has {len(idx)} example(s); need >= k={k}")
        idx = rng.permutation(idx)
        fold_of[idx] = np.arange(len(idx)) % k
    return [([dataset[i] for i in np.flatnonzero(fold_of != j)],
             [dataset[i] for i in np.flatnonzero(fold_of == j)]) for j in range(k)]


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def pad_session(rec: FeaturizedSession, max_len: int):
    """One padded row: (tokens, status, freq, mask) each of length ``max_len``."""
    keep = max_len - 1
    z, s, f = rec.z[-keep:], rec.s[-keep:], rec.f[-keep:]
    n = len(z)
    tokens = np.full(max_len, PAD, dtype=np.int64)
    status = np.zeros(max_len, dtype=np.int64)
    freq = np.zeros(max_len, dtype=np.float64)
    mask = np.zeros(max_len, dtype=bool)
    tokens[0] = CLS
    mask[: n + 1] = True
    tokens[1:n + 1] = z
    status[1:n + 1] = s
    freq[1:n + 1] = f
    return tokens, status, freq, mask


def make_batches(records: Sequence[FeaturizedSession], max_len: int = 128, batch_size: int = 32,
                 order: Optional[Sequence[int]] = None) -> list:
    """Pad, front-truncate and group featurized sessions into :class:`Batch` objects.

    Sessions longer than ``max_len - 1`` keep their most recent events.
    Empty sessions are skipped with a warning.
    """
    idx = list(range(len(records))) if order is None else list(order)
    kept = []
    for i in idx:
        if len(records[i]) == 0:
            log.warning("skipping empty session %d (user %s)", i, records[i].user)
            continue
        kept.append(i)
    batches = []
    for start in range(0, len(kept), batch_size):
        rows = [pad_session(records[i], max_len) for i in kept[start:start + batch_size]]
        labels = np.array([records[i].label if records[i].label is not None else -1
                           for i in kept[start:start + batch_size]], dtype=np.int64)
        batches.append(Batch(
            tokens=np.stack([r[0] for r in rows]),
            status=np.stack([r[1] for r in rows]),
            freq=np.stack([r[2] for r in rows]),
            mask=np.stack([r[3] for r in rows]),
            labels=labels,
        ))
    return batches


def unpad(batch: Batch) -> list:
    """Inverse of padding: per-row (z, s, f) lists without CLS and PAD."""
    out = []
    for b in range(len(batch)):
        m = batch.event_mask[b]
        out.append((batch.tokens[b][m].tolist(), batch.status[b][m].tolist(), batch.freq[b][m].tolist()))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    recall: float
    precision: float
    accuracy: float
    f1: float
    recall_undefined: bool = False
    precision_undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(y_hat, labels, threshold: float = 0.5) -> EvalReport:
    """Confusion counts and derived ratios; a score >= threshold is positive.

    Zero-denominator ratios are reported as 0 with the matching
    ``*_undefined`` flag set.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if y_hat.shape != labels.shape:
        raise ValueError(f"length mismatch: {y_hat.shape[0] if y_hat.ndim else 0} scores vs "
                         f"{labels.shape[0] if labels.ndim else 0} labels")
    pred = y_hat >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    rec_undef = tp + fn == 0
    prec_undef = tp + fp == 0
    recall = 0.0 if rec_undef else tp / (tp + fn)
    precision = 0.0 if prec_undef else tp / (tp + fp)
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(tp, fp, tn, fn, recall, precision, accuracy, f1, rec_undef, prec_undef)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Training / scoring
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    best_epoch: int = 0
    val_predictions: Optional[np.ndarray] = None


def predict(records: Sequence[FeaturizedSession], params: ParamStore, cfg: ModelConfig,
            max_len: int, batch_size: int = 64) -> np.ndarray:
    if len(records) == 0:
        return np.zeros(0)
    out = [forward(b, params, cfg).data for b in make_batches(records, max_len, batch_size)]
    return np.concatenate(out).astype(np.float64)


def _rngs(seed: int):
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss),
            np.random.default_rng(drop_ss))


def train(train_set: Sequence[FeaturizedSession], val_set: Sequence[FeaturizedSession],
          model_config: ModelConfig, train_config: TrainConfig = TrainConfig(),
          meta: Optional[dict] = None, dtype=np.float32,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit the model with Adam; keep the parameters of the best validation epoch.

    Best is highest validation F1, ties broken by lower validation loss and
    then by the earlier epoch. Everything random (init, shuffling, dropout)
    derives from ``train_config.seed``.
    """
    labels = [r.label for r in train_set]
    if not train_set or 0 not in labels or 1 not in labels:
        raise TrainingError("training set must be non-empty and contain both classes")
    tc_ = train_config
    init_rng, shuffle_rng, drop_rng = _rngs(tc_.seed)
    params = init_params(model_config, init_rng, dtype=dtype)
    opt = Adam(params, lr=tc_.lr, betas=tc_.betas, eps=tc_.adam_eps, weight_decay=tc_.weight_decay)
    val_y = np.array([r.label for r in val_set], dtype=np.int64)

    best_key, best_arrays, best_epoch, best_val_pred = None, None, 0, None
    epoch_log = []
    for epoch in range(1, tc_.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        batches = make_batches(train_set, tc_.max_len, tc_.batch_size, order=order)
        total, count = 0.0, 0
        for bi, batch in enumerate(batches):
            params.zero_grad()
            try:
                y_hat = forward(batch, params, model_config, rng=drop_rng)
                loss = bce_loss(y_hat, batch.labels)
                backward(loss, leaves=params.tensors())
            except NumericOverflowError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch}, batch {bi} "
                                    f"(sessions {order[bi * tc_.batch_size:(bi + 1) * tc_.batch_size].tolist()}): {exc}") from exc
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"NaN loss in epoch {epoch}, batch {bi}")
            opt.step()
            total += lv * len(batch)
            count += len(batch)
        entry = {"epoch": epoch, "train_loss": total / count}
        if len(val_set):
            val_pred = predict(val_set, params, model_config, tc_.max_len)
            rep = metrics(val_pred, val_y, tc_.threshold)
            p = np.clip(val_pred, 1e-7, 1 - 1e-7)
            val_loss = float(-np.mean(val_y * np.log(p) + (1 - val_y) * np.log(1 - p)))
            entry.update(val_recall=rep.recall, val_precision=rep.precision,
                         val_accuracy=rep.accuracy, val_f1=rep.f1)
            key = (rep.f1, -val_loss)
        else:
            val_pred = None
            key = (0.0, -entry["train_loss"])
        if best_key is None or key > best_key:
            best_key, best_epoch, best_val_pred = key, epoch, val_pred
            best_arrays = {k: v.copy() for k, v in params.arrays().items()}
        epoch_log.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry)

    meta = dict(meta or {})
    meta.setdefault("threshold", tc_.threshold)
    meta["best_epoch"] = best_epoch
    ck = Checkpoint({k: v.astype(np.float32) for k, v in best_arrays.items()}, model_config, meta)
    return TrainResult(ck, epoch_log, best_epoch, best_val_pred)


def score(records: Sequence[FeaturizedSession], checkpoint: Checkpoint, max_len: Optional[int] = None,
          expect: Optional[dict] = None) -> np.ndarray:
    """Probabilities for featurized sessions under ``checkpoint``.

    Refuses to score records whose ``meta["vocab"]`` digest differs from the
    checkpoint's, and ``expect`` featurization settings (windows etc.) that
    disagree with what the checkpoint was trained on.
    """
    want = checkpoint.meta.get("vocab_digest")
    for r in records:
        got = r.meta.get("vocab")
        if want is not None and got is not None and got != want:
            raise ScoringError(f"vocabulary digest mismatch: features {got} vs checkpoint {want}")
    for key, value in (expect or {}).items():
        have = checkpoint.meta.get(key)
        if have is not None and have != value:
            raise ScoringError(f"featurization mismatch on {key}: {value!r} vs checkpoint {have!r}")
    if not records:
        return np.zeros(0)
    params = checkpoint.param_store()
    return predict(records, params, checkpoint.model_config, max_len or checkpoint.model_config.max_len)


def save_checkpoint_bytes(result: TrainResult) -> bytes:
    return ckpt_io.dumps(result.checkpoint)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "w/o status": {"status_enabled": False},
    "w/o frequency": {"freq_enabled": False},
    "w/o fusion": {"fusion_enabled": False},
    "w/o gating": {"gate_enabled": False},
}


def ablation_run(train_set, val_set, test_set, base_config: ModelConfig,
                 train_config: TrainConfig = TrainConfig()) -> dict:
    """Train and evaluate each variant on identical splits and seed.

    Returns ``{variant: EvalReport}`` in the order of :data:`VARIANTS`.
    """
    y = np.array([r.label for r in test_set], dtype=np.int64)
    for part in (train_set, test_set):
        labs = {r.label for r in part}
        if not {0, 1} <= labs:
            raise StratificationError("ablation needs both classes in train and test")
    rows = {}
    for name, flags in VARIANTS.items():
        cfg = replace(base_config, **flags)
        res = train(train_set, val_set, cfg, train_config)
        pred = score(test_set, res.checkpoint, train_config.max_len)
        rows[name] = metrics(pred, y, train_config.threshold)
        log.info("ablation %s: %s", name, rows[name])
    return rows


def ablation_csv(rows: dict) -> str:
    lines = ["variant,recall,precision,accuracy,f1"]
    for name, r in rows.items():
        lines.append(f"{name},{r.recall:.6f},{r.precision:.6f},{r.accuracy:.6f},{r.f1:.6f}")
    return "\n".join(lines) + "\n"
