"""Synthetic audit-log generator with injectable statistical anomalies.

Each user has a static categorical routine over a few behaviors. Normal
sessions draw behaviors i.i.d. from that routine; timestamps advance by
exponential gaps and sessions start mostly in working hours. Anomalous
sessions are normal sessions with exactly one injected pattern:

novel
    behaviors from a pool no routine ever uses overwrite a few positions.
resurfacing
    one of the user's most frequent behaviors repeatedly goes quiet for
    longer than the largest status window and then reappears briefly.
burst
    a low-weight routine behavior fires in several short back-to-back
    runs, so its short-window rate jumps far above its long-window rate.
suppression
    the dominant behavior is removed from a long contiguous span.

Randomness: ``SeedSequence(seed).spawn(n_users)`` gives one independent
generator per user, so users can be generated in any order or in parallel
with identical output. The anomaly draw (which sessions, which kind) uses a
separate child ``SeedSequence(seed).spawn(n_users + 1)[-1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .logs import RawEvent, Session

ANOMALY_KINDS = ("novel", "resurfacing", "burst", "suppression")

# Every user shares the same few routine behaviors, so a token says little
# about who emitted it and the anomaly has to be read from the statistics.
DEFAULT_BEHAVIORS = ("logon", "email_send", "web_visit")
DEFAULT_NOVEL = ("usb_insert", "archive_create", "cloud_sync", "priv_escalate", "db_export")

MIN_INJECT_LEN = 16


class InfeasibleAnomaly(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    n_users: int = 40
    sessions_per_user: int = 10
    session_len_range: tuple = (64, 128)
    behaviors: tuple = DEFAULT_BEHAVIORS
    novel_behaviors: tuple = DEFAULT_NOVEL
    routine_size: int = 3
    routine_concentration: float = 50.0
    anomaly_rate: float = 0.2
    anomaly_mix: dict = field(default_factory=lambda: {k: 1.0 for k in ANOMALY_KINDS})
    status_window_max: int = 15
    novel_runs: tuple = (3, 5)
    novel_run_len: tuple = (2, 4)
    burst_len: tuple = (3, 4)
    burst_spacing: int = 8
    resurface_pick: int = 3
    resurface_gap: tuple = (16, 20)
    resurface_cluster: tuple = (2, 4)
    suppression_fraction: tuple = (0.7, 0.9)
    mean_event_gap: float = 90.0
    seed: int = 0
    start_epoch: int = 1_700_006_400  # a midnight, UTC

    def __post_init__(self):
        lo, hi = self.session_len_range
        if lo > hi or lo < 1:
            raise ValueError("session_len_range must satisfy 1 <= min <= max")
        if not 0.0 < self.anomaly_rate < 1.0:
            raise ValueError("anomaly_rate must be in (0, 1)")
        w = np.array([self.anomaly_mix.get(k, 0.0) for k in ANOMALY_KINDS], dtype=float)
        if (w < 0).any() or w.sum() <= 0 or set(self.anomaly_mix) - set(ANOMALY_KINDS):
            raise ValueError(f"anomaly_mix must be non-negative weights over {ANOMALY_KINDS}")
        if self.routine_size < 2 or self.routine_size > len(self.behaviors):
            raise ValueError("routine_size must be between 2 and the number of behaviors")
        if set(self.novel_behaviors) & set(self.behaviors):
            raise ValueError("novel behaviors must not overlap routine behaviors")

    def mix_weights(self) -> np.ndarray:
        w = np.array([self.anomaly_mix.get(k, 0.0) for k in ANOMALY_KINDS], dtype=float)
        return w / w.sum()


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    behaviors: tuple
    weights: tuple
    day_offset: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.behaviors) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("profile weights must be non-negative, normalizable, one per behavior")

    @property
    def probs(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()

    @property
    def dominant(self) -> str:
        return self.behaviors[int(np.argmax(self.weights))]


def make_profile(user_id: str, spec: GenSpec, rng: np.random.Generator) -> UserProfile:
    chosen = rng.choice(len(spec.behaviors), size=spec.routine_size, replace=False)
    weights = rng.dirichlet(np.full(spec.routine_size, spec.routine_concentration))
    return UserProfile(user_id, tuple(spec.behaviors[i] for i in chosen), tuple(float(x) for x in weights))


def _timestamps(start: int, n: int, mean_gap: float, rng: np.random.Generator) -> list:
    gaps = 1 + np.floor(rng.exponential(mean_gap, size=n - 1)).astype(np.int64) if n > 1 else []
    return [start] + (start + np.cumsum(gaps)).tolist() if n > 1 else [start]


def gen_normal_session(profile: UserProfile, length: int, rng: np.random.Generator,
                       start: int = 0, mean_gap: float = 90.0) -> Session:
    """Routine session of ``length`` events; strictly increasing timestamps."""
    idx = rng.choice(len(profile.behaviors), size=length, p=profile.probs)
    ts = _timestamps(start, length, mean_gap, rng)
    events = [RawEvent(profile.user_id, profile.behaviors[i], int(t)) for i, t in zip(idx, ts)]
    return Session(profile.user_id, events, label=0)


def _with_behaviors(session: Session, behaviors: Sequence[str]) -> Session:
    events = [RawEvent(e.user_id, b, e.timestamp) for e, b in zip(session.events, behaviors)]
    return Session(session.user_id, events, label=1)


def _resample_without(beh: list, lo: int, hi: int, banned, profile: UserProfile,
                      rng: np.random.Generator) -> None:
    """Replace any ``banned`` entries in ``beh[lo:hi]`` with other routine behaviors."""
    banned = {banned} if isinstance(banned, str) else set(banned)
    others = [b for b in profile.behaviors if b not in banned]
    if not others:
        raise InfeasibleAnomaly("no routine behavior left to fill the withheld span")
    p = np.array([w for b, w in zip(profile.behaviors, profile.weights) if b not in banned])
    p = p / p.sum()
    for i in range(lo, hi):
        if beh[i] in banned:
            beh[i] = others[rng.choice(len(others), p=p)]


def inject_anomaly(session: Session, kind: str, profile: UserProfile, rng: np.random.Generator,
                   spec: Optional[GenSpec] = None) -> Session:
    """Overwrite behaviors in ``session`` with one anomaly pattern; label 1.

    Timestamps and length are preserved. ``spec`` supplies the novel pool,
    the largest status window and the burst length range.
    """
    spec = spec or GenSpec()
    n = len(session)
    if n < MIN_INJECT_LEN:
        raise InfeasibleAnomaly(f"session length {n} < {MIN_INJECT_LEN}; no room for a pattern")
    beh = [e.behavior for e in session.events]
    routine = set(profile.behaviors)

    if kind == "novel":
        pool = [b for b in spec.novel_behaviors if b not in routine]
        if not pool:
            raise InfeasibleAnomaly("no behavior outside the user's routine is available")
        # a few short runs of out-of-routine behaviors in the later part
        lo_runs, hi_runs = spec.novel_runs
        lo_len, hi_len = spec.novel_run_len
        n_runs = int(rng.integers(lo_runs, hi_runs + 1))
        starts = np.sort(rng.choice(np.arange(n // 4, n - hi_len), size=n_runs, replace=False))
        for st in starts:
            b = pool[int(rng.integers(len(pool)))]
            for i in range(int(st), min(n, int(st) + int(rng.integers(lo_len, hi_len + 1)))):
                beh[i] = b

    elif kind == "resurfacing":
        # one routine behavior repeatedly goes quiet for longer than the
        # largest status window, then comes back in a short cluster
        gap_min = spec.status_window_max + 1
        order = [profile.behaviors[i] for i in np.argsort(profile.probs)[::-1]]
        target = order[int(rng.integers(min(spec.resurface_pick, len(order))))]
        lo_gap, hi_gap = spec.resurface_gap
        lo_cl, hi_cl = spec.resurface_cluster
        pos, cycles = int(rng.integers(0, 4)), 0
        while True:
            gap = int(rng.integers(max(lo_gap, gap_min), max(hi_gap, gap_min) + 1))
            cluster = int(rng.integers(lo_cl, hi_cl + 1))
            if pos + gap + cluster > n:
                break
            _resample_without(beh, pos, pos + gap, target, profile, rng)
            for i in range(pos + gap, pos + gap + cluster):
                beh[i] = target
            pos += gap + cluster
            cycles += 1
        if not cycles:
            raise InfeasibleAnomaly(f"session length {n} cannot hold an absence gap > {spec.status_window_max}")
        _resample_without(beh, pos, n, target, profile, rng)

    elif kind == "suppression":
        target = profile.dominant
        lo_fr, hi_fr = spec.suppression_fraction
        gap = max(spec.status_window_max + 1, int(round(n * rng.uniform(lo_fr, hi_fr))))
        if gap + 1 >= n:
            raise InfeasibleAnomaly(f"session length {n} cannot hold a suppressed span of {gap}")
        reappear = int(rng.integers(gap, n))
        _resample_without(beh, reappear - gap, reappear, target, profile, rng)
        beh[reappear] = target

    elif kind == "burst":
        probs = profile.probs
        low = [b for b, p in zip(profile.behaviors, probs) if p <= np.median(probs) and b != profile.dominant]
        if not low:
            raise InfeasibleAnomaly("profile has no low-weight behavior to burst")
        target = low[int(rng.integers(len(low)))]
        lo_len, hi_len = spec.burst_len
        spacing = spec.burst_spacing
        # runs separated by more than the long frequency window, filling the session
        pos, runs = int(rng.integers(4, 4 + spacing)), 0
        while True:
            length = int(rng.integers(lo_len, hi_len + 1))
            if pos + length > n:
                break
            _resample_without(beh, max(0, pos - spacing), pos, target, profile, rng)
            for i in range(pos, pos + length):
                beh[i] = target
            pos += length + spacing
            runs += 1
        if not runs:
            raise InfeasibleAnomaly(f"session length {n} too short for one burst")

    else:
        raise ValueError(f"unknown anomaly kind {kind!r}; expected one of {ANOMALY_KINDS}")

    return _with_behaviors(session, beh)


def _session_start(spec: GenSpec, user_idx: int, sess_idx: int, rng: np.random.Generator) -> int:
    # one session per day, mostly starting in working hours
    day = spec.start_epoch + (sess_idx + 1) * 86400
    hour = rng.uniform(8.0, 13.0) if rng.random() < 0.85 else rng.uniform(19.0, 23.0)
    return int(day + hour * 3600)


def gen_user(spec: GenSpec, user_idx: int, seed_seq: np.random.SeedSequence) -> tuple:
    rng = np.random.default_rng(seed_seq)
    profile = make_profile(f"u{user_idx:03d}", spec, rng)
    lo, hi = spec.session_len_range
    sessions = []
    for j in range(spec.sessions_per_user):
        length = int(rng.integers(lo, hi + 1))
        sessions.append(gen_normal_session(profile, length, rng, _session_start(spec, user_idx, j, rng),
                                           spec.mean_event_gap))
    return profile, sessions


def gen_dataset(spec: GenSpec) -> tuple:
    """Return ``(sessions, profiles, kinds)``.

    ``ceil(anomaly_rate * N)`` sessions carry one anomaly (``kinds[i]`` names
    it, ``None`` for normal sessions). Pure function of ``spec``.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_users + 1)
    profiles, sessions, owner = [], [], []
    for u in range(spec.n_users):
        prof, sess = gen_user(spec, u, children[u])
        profiles.append(prof)
        sessions.extend(sess)
        owner.extend([u] * len(sess))
    rng = np.random.default_rng(children[-1])
    n_anom = math.ceil(spec.anomaly_rate * len(sessions))
    chosen = sorted(rng.choice(len(sessions), size=n_anom, replace=False).tolist())
    mix = spec.mix_weights()
    kinds: list = [None] * len(sessions)
    for i in chosen:
        kind = ANOMALY_KINDS[int(rng.choice(len(ANOMALY_KINDS), p=mix))]
        sessions[i] = inject_anomaly(sessions[i], kind, profiles[owner[i]], rng, spec)
        kinds[i] = kind
    return sessions, profiles, kinds


def events_of(sessions: Sequence[Session]) -> list:
    """Flatten sessions into one event list sorted by (user, timestamp)."""
    evs = [e for s in sessions for e in s.events]
    evs.sort(key=lambda e: (e.user_id, e.timestamp))
    return evs


def with_mix(spec: GenSpec, kinds: Sequence[str]) -> GenSpec:
    return replace(spec, anomaly_mix={k: (1.0 if k in kinds else 0.0) for k in ANOMALY_KINDS})
