"""Status and frequency-deviation views derived causally from a token sequence.

Both views look strictly backward: the window for position t covers the
``w`` positions before t and never t itself. Windows that would reach past
the start of the sequence are clipped to the history that exists.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

DEFAULT_STATUS_WINDOWS = (3, 7, 15)
DEFAULT_FREQ_WINDOWS = (1, 7)
DEFAULT_EPSILON = 1e-6
DEFAULT_CLAMP_MAX = 10.0
FREQ_MIN = -1.0


@dataclass(frozen=True)
class StatusConfig:
    windows: tuple = DEFAULT_STATUS_WINDOWS

    def __post_init__(self):
        w = tuple(int(x) for x in self.windows)
        if not w:
            raise ValueError("status windows must be non-empty")
        if w[0] < 1 or any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError(f"status windows must be strictly increasing positive ints, got {w}")
        object.__setattr__(self, "windows", w)

    @property
    def K(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class FreqConfig:
    h_s: int = DEFAULT_FREQ_WINDOWS[0]
    h_l: int = DEFAULT_FREQ_WINDOWS[1]
    epsilon: float = DEFAULT_EPSILON
    clamp_max: float = DEFAULT_CLAMP_MAX

    def __post_init__(self):
        if self.h_s < 1 or self.h_l < 1:
            raise ValueError("frequency windows must be positive")
        if self.h_s >= self.h_l:
            raise ValueError(f"need h_s < h_l, got ({self.h_s}, {self.h_l})")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.clamp_max <= 0:
            raise ValueError("clamp_max must be positive")


@dataclass
class ViewTriplet:
    z: list
    s: np.ndarray
    f: np.ndarray
    clamped_count: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.z) == len(self.s) == len(self.f)) or len(self.z) == 0:
            raise ValueError("views must be non-empty and equally long")

    def __len__(self) -> int:
        return len(self.z)


def status_view(z: Sequence[Hashable], cfg: StatusConfig = StatusConfig()) -> np.ndarray:
    """Number of backward windows in which each token is absent.

    Streaming: one pass keeping the last index at which each token was seen.
    Token ``z[t]`` is present in the previous ``w`` steps iff it was last seen
    at distance ``<= w``.
    """
    windows = cfg.windows
    last_seen: dict = {}
    out = np.empty(len(z), dtype=np.int64)
    K = len(windows)
    for t, tok in enumerate(z):
        prev = last_seen.get(tok)
        if prev is None:
            out[t] = K
        else:
            gap = t - prev
            out[t] = sum(1 for w in windows if gap > w)
        last_seen[tok] = t
    return out


def _contrast(c_short: int, c_long: int, cfg: FreqConfig) -> float:
    fs = c_short / cfg.h_s
    fl = c_long / cfg.h_l
    return (fs - fl) / (fl + cfg.epsilon)


def frequency_view(z: Sequence[Hashable], cfg: FreqConfig = FreqConfig()) -> tuple:
    """Short- vs long-window occurrence contrast of each token.

    Returns ``(f, clamped_count)``. Rates divide by the nominal window length
    even where history is shorter, so early positions read low. Values are
    clamped to ``[-1, clamp_max]``; ``clamped_count`` counts values pulled
    down from above ``clamp_max``.
    """
    short: dict = defaultdict(int)
    long_: dict = defaultdict(int)
    q_short: deque = deque()
    q_long: deque = deque()
    out = np.empty(len(z), dtype=np.float64)
    clamped = 0
    for t, tok in enumerate(z):
        v = _contrast(short[tok], long_[tok], cfg)
        if v > cfg.clamp_max:
            v = cfg.clamp_max
            clamped += 1
        elif v < FREQ_MIN:
            v = FREQ_MIN
        out[t] = v
        short[tok] += 1
        q_short.append(tok)
        if len(q_short) > cfg.h_s:
            short[q_short.popleft()] -= 1
        long_[tok] += 1
        q_long.append(tok)
        if len(q_long) > cfg.h_l:
            long_[q_long.popleft()] -= 1
    return out, clamped


def derive_views(z: Sequence[Hashable], status_cfg: StatusConfig = StatusConfig(),
                 freq_cfg: FreqConfig = FreqConfig()) -> ViewTriplet:
    if len(z) == 0:
        raise ValueError("cannot derive views from an empty token sequence")
    s = status_view(z, status_cfg)
    f, clamped = frequency_view(z, freq_cfg)
    return ViewTriplet(list(z), s, f, clamped)


# ---------------------------------------------------------------------------
# Brute-force references (tests and audits only)
# ---------------------------------------------------------------------------

def _as_codes(z: Sequence[Hashable]) -> np.ndarray:
    codes: dict = {}
    return np.array([codes.setdefault(t, len(codes)) for t in z], dtype=np.int64)


def _prev_window_hits(codes: np.ndarray, w: int) -> np.ndarray:
    """[T, w] matrix: entry (t, j) is True iff codes[t - 1 - j] == codes[t]."""
    T = len(codes)
    padded = np.concatenate([np.full(w, -1, dtype=np.int64), codes])
    # row t holds padded[t : t + w] == codes[t - w : t]
    windows = np.lib.stride_tricks.sliding_window_view(padded, w)[:T]
    return windows == codes[:, None]


def oracle_status(z: Sequence[Hashable], cfg: StatusConfig = StatusConfig()) -> np.ndarray:
    codes = _as_codes(z)
    s = np.zeros(len(codes), dtype=np.int64)
    for w in cfg.windows:
        s += ~_prev_window_hits(codes, w).any(axis=1)
    return s


def oracle_frequency(z: Sequence[Hashable], cfg: FreqConfig = FreqConfig()) -> np.ndarray:
    codes = _as_codes(z)
    c_s = _prev_window_hits(codes, cfg.h_s).sum(axis=1)
    c_l = _prev_window_hits(codes, cfg.h_l).sum(axis=1)
    fs = c_s / cfg.h_s
    fl = c_l / cfg.h_l
    f = (fs - fl) / (fl + cfg.epsilon)
    return np.clip(f, FREQ_MIN, cfg.clamp_max)


def oracle_status_loop(z: Sequence[Hashable], cfg: StatusConfig = StatusConfig()) -> list:
    """Literal transcription of the indicator sum, one slice per window."""
    z = list(z)
    return [sum(1 for w in cfg.windows if z[t] not in z[max(0, t - w):t]) for t in range(len(z))]
