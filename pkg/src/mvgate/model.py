"""Gated multi-view Transformer classifier.

Tokens go through a standard post-LN Transformer encoder, except that the
key vector at each position is multiplied by a per-position risk gate
computed from the status and frequency embeddings. The sequence summary
(CLS state) is concatenated with mean-pooled status and frequency
embeddings and scored by an MLP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import tensor as tc
from .logs import CLS, PAD
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int = 128
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    mlp_layers: int = 3
    mlp_hidden: Optional[int] = None
    ffn_mult: int = 4
    gate_enabled: bool = True
    status_enabled: bool = True
    freq_enabled: bool = True
    fusion_enabled: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2:
            raise ValueError(f"d_model must be a positive even integer, got {self.d_model}")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.n_layers < 1 or self.mlp_layers < 1:
            raise ValueError("n_layers and mlp_layers must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for CLS plus one token")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the reserved ids plus one token")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {
        "token_emb": (V, d),
        "pos_emb": (cfg.max_len, d),
        "cls_emb": (d,),
        "status_w": (d,),
        "status_b": (d,),
        "freq_w": (d,),
        "freq_b": (d,),
        "gate_w": (2 * d, 1),
        "gate_b": (1,),
    }
    ff = cfg.ffn_mult * d
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "w_q": (d, d), p + "w_k": (d, d), p + "w_v": (d, d), p + "w_o": (d, d),
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "ffn_w1": (d, ff), p + "ffn_b1": (ff,),
            p + "ffn_w2": (ff, d), p + "ffn_b2": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
        })
    widths = [3 * d] + [cfg.hidden] * (cfg.mlp_layers - 1) + [1]
    for j in range(cfg.mlp_layers):
        shapes[f"head.{j}.w"] = (widths[j], widths[j + 1])
        shapes[f"head.{j}.b"] = (widths[j + 1],)
    return shapes


class ParamStore:
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def __init__(self, tensors: dict):
        self._t = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list:
        return list(self._t)

    def tensors(self) -> list:
        return list(self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def arrays(self) -> dict:
        return {k: t.data for k, t in self._t.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                           for k, t in self._t.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
                           for k, t in self._t.items()})

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._t.values())

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = True) -> "ParamStore":
        return cls({k: Tensor(np.array(v), requires_grad=requires_grad, name=k) for k, v in arrays.items()})


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Glorot-uniform matrices, zero biases, N(0, 0.02) embeddings, unit LN gains."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("token_emb", "pos_emb", "cls_emb"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif leaf.startswith("ln") and leaf.endswith("_g"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            arr = tc.xavier_uniform(rng, *shape)
        elif name in ("status_w", "freq_w"):
            # scalar -> d projections; Glorot with fan_in 1
            bound = math.sqrt(6.0 / (1 + shape[0]))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        out[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True, name=name)
    return ParamStore(out)


@dataclass
class Batch:
    tokens: np.ndarray   # [B, T] int, CLS at column 0
    status: np.ndarray   # [B, T] int
    freq: np.ndarray     # [B, T] float
    mask: np.ndarray     # [B, T] bool, True for CLS and real tokens
    labels: np.ndarray   # [B]

    def __post_init__(self):
        B, T = self.tokens.shape
        for name in ("status", "freq", "mask"):
            if getattr(self, name).shape != (B, T):
                raise ValueError(f"batch field {name} has shape {getattr(self, name).shape}, expected {(B, T)}")
        if not (self.tokens[:, 0] == CLS).all() or not self.mask[:, 0].all():
            raise ValueError("every row must start with an unmasked CLS token")
        if (self.tokens[~self.mask] != PAD).any():
            raise ValueError("masked positions must hold PAD")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def event_mask(self) -> np.ndarray:
        """Real events only: excludes CLS and PAD."""
        m = self.mask.copy()
        m[:, 0] = False
        return m


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def embed_views(batch: Batch, params: ParamStore):
    """Token (+position), status and frequency embeddings, each [B, T, d]."""
    token_emb = params["token_emb"]
    V = token_emb.shape[0]
    B, T = batch.tokens.shape
    if T > params["pos_emb"].shape[0]:
        raise ValueError(f"sequence length {T} exceeds max_len {params['pos_emb'].shape[0]}")
    if batch.tokens.min() < 0 or batch.tokens.max() >= V:
        raise IndexError(f"token id out of range [0, {V})")
    dtype = token_emb.dtype
    d = token_emb.shape[1]
    table = tc.concat([token_emb, tc.reshape(params["cls_emb"], (1, d))], axis=0)
    ids = batch.tokens.copy()
    ids[:, 0] = V
    pos = tc.embedding_lookup(params["pos_emb"], np.arange(T))
    e_z = tc.add(tc.embedding_lookup(table, ids), pos)

    s = np.where(batch.event_mask, batch.status, 0).astype(dtype)[..., None]
    f = np.where(batch.event_mask, batch.freq, 0).astype(dtype)[..., None]
    e_s = tc.add(tc.mul(Tensor(s), params["status_w"]), params["status_b"])
    e_f = tc.add(tc.mul(Tensor(f), params["freq_w"]), params["freq_b"])
    return e_z, e_s, e_f


def risk_gate(e_s: Tensor, e_f: Tensor, gate_w: Tensor, gate_b: Tensor, event_mask) -> Tensor:
    """Per-position gate in (0, 1); CLS and PAD positions are pinned to 1."""
    B, T, _ = e_s.shape
    pre = tc.add(tc.matmul(tc.concat_lastdim([e_s, e_f]), gate_w), gate_b)
    g = tc.sigmoid(tc.reshape(pre, (B, T)))
    m = np.asarray(event_mask, dtype=g.dtype)
    return tc.add(tc.mul(g, Tensor(m)), Tensor(1.0 - m))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return tc.permute(tc.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention_logits(h: Tensor, g: Optional[Tensor], lp: dict, n_heads: int):
    """Gated logits [B, heads, T, T] plus the per-head value tensor.

    Keys are row-scaled by ``g`` before the dot product; ``g=None`` leaves
    them untouched.
    """
    q = tc.matmul(h, lp["w_q"])
    k = tc.matmul(h, lp["w_k"])
    v = tc.matmul(h, lp["w_v"])
    if g is not None:
        k = tc.scale_rows(k, g)
    qh, kh, vh = (_split_heads(x, n_heads) for x in (q, k, v))
    dh = h.shape[-1] // n_heads
    logits = tc.scale(tc.matmul(qh, tc.permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return logits, vh


def gated_attention_layer(h: Tensor, g: Optional[Tensor], lp: dict, mask, n_heads: int,
                          dropout: float = 0.0, rng=None, trace: Optional[dict] = None) -> Tensor:
    B, T, d = h.shape
    mask = np.asarray(mask, dtype=bool)
    logits, vh = attention_logits(h, g, lp, n_heads)
    attn = tc.softmax_lastdim(logits, mask[:, None, None, :])
    if trace is not None:
        trace.setdefault("logits", []).append(logits.data)
        trace.setdefault("attn", []).append(attn.data)
    attn = tc.dropout(attn, dropout, rng)
    ctx = tc.reshape(tc.permute(tc.matmul(attn, vh), (0, 2, 1, 3)), (B, T, d))
    h1 = tc.layer_norm(tc.add(h, tc.matmul(ctx, lp["w_o"])), lp["ln1_g"], lp["ln1_b"])
    ff = tc.add(tc.matmul(tc.relu(tc.add(tc.matmul(h1, lp["ffn_w1"]), lp["ffn_b1"])), lp["ffn_w2"]),
                lp["ffn_b2"])
    ff = tc.dropout(ff, dropout, rng)
    return tc.layer_norm(tc.add(h1, ff), lp["ln2_g"], lp["ln2_b"])


def _layer_params(params: ParamStore, i: int) -> dict:
    p = f"layers.{i}."
    return {k[len(p):]: params[k] for k in params if k.startswith(p)}


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


def encoder_forward(batch: Batch, params: ParamStore, cfg: ModelConfig, rng=None,
                    trace: Optional[dict] = None, gate_override: Optional[np.ndarray] = None):
    """Run the gated encoder; returns ``(h_cls, e_s, e_f)``.

    ``e_s``/``e_f`` are the view embeddings as seen by the gate and the
    fusion pooling, after ablation zeroing. ``rng`` enables dropout;
    ``gate_override`` replaces the computed gate with fixed values.
    """
    e_z, e_s, e_f = embed_views(batch, params)
    if not cfg.status_enabled:
        e_s = _zeros_like(e_s)
    if not cfg.freq_enabled:
        e_f = _zeros_like(e_f)
    B, T = batch.tokens.shape
    if gate_override is not None:
        g = Tensor(np.asarray(gate_override, dtype=e_z.dtype).reshape(B, T))
    elif cfg.gate_enabled:
        g = risk_gate(e_s, e_f, params["gate_w"], params["gate_b"], batch.event_mask)
    else:
        g = Tensor(np.ones((B, T), dtype=e_z.dtype))
    if trace is not None:
        trace["gate"] = g.data
    drop = cfg.dropout if rng is not None else 0.0
    h = e_z
    for i in range(cfg.n_layers):
        h = gated_attention_layer(h, g, _layer_params(params, i), batch.mask, cfg.n_heads,
                                  dropout=drop, rng=rng, trace=trace)
    return tc.take(h, 0, axis=1), e_s, e_f


def fuse_and_classify(h_cls: Tensor, e_s: Tensor, e_f: Tensor, event_mask, params: ParamStore,
                      cfg: ModelConfig) -> Tensor:
    """Probability per sequence from ``[h_cls | mean(e_s) | mean(e_f)]``."""
    h_sta = tc.mean_over_time(e_s, event_mask)
    h_freq = tc.mean_over_time(e_f, event_mask)
    if not cfg.fusion_enabled:
        h_sta, h_freq = _zeros_like(h_sta), _zeros_like(h_freq)
    x = tc.concat_lastdim([h_cls, h_sta, h_freq])
    for j in range(cfg.mlp_layers):
        x = tc.add(tc.matmul(x, params[f"head.{j}.w"]), params[f"head.{j}.b"])
        if j < cfg.mlp_layers - 1:
            x = tc.relu(x)
    return tc.sigmoid(tc.reshape(x, (x.shape[0],)))


def forward(batch: Batch, params: ParamStore, cfg: ModelConfig, rng=None,
            trace: Optional[dict] = None, gate_override=None) -> Tensor:
    h_cls, e_s, e_f = encoder_forward(batch, params, cfg, rng=rng, trace=trace, gate_override=gate_override)
    return fuse_and_classify(h_cls, e_s, e_f, batch.event_mask, params, cfg)


def bce_loss(y_hat: Tensor, y) -> Tensor:
    return tc.bce(y_hat, y)
