import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvgate.views import (
    FREQ_MIN, FreqConfig, StatusConfig, derive_views, frequency_view, oracle_frequency,
    oracle_status, oracle_status_loop, status_view,
)

tokens = st.lists(st.sampled_from("abcde"), min_size=1, max_size=80)


class TestStatus:
    def test_first_occurrence_is_absent_everywhere(self):
        np.testing.assert_array_equal(status_view(list("abc")), [3, 3, 3])

    def test_repeat_at_each_distance(self):
        # distance 1 -> 0, distance 4 -> 1 (absent from window 3), distance 8 -> 2, distance 16 -> 3
        for dist, want in [(1, 0), (3, 0), (4, 1), (7, 1), (8, 2), (15, 2), (16, 3)]:
            z = ["a"] + [f"x{i}" for i in range(dist - 1)] + ["a"]
            assert status_view(z)[-1] == want, dist

    def test_resurfacing_after_gap_20(self):
        z = ["a"] + ["b"] * 19 + ["a"]
        assert status_view(z)[-1] == 3

    @settings(max_examples=200, deadline=None)
    @given(tokens)
    def test_matches_both_oracles(self, z):
        s = status_view(z)
        np.testing.assert_array_equal(s, oracle_status(z))
        np.testing.assert_array_equal(s, oracle_status_loop(z))

    @settings(max_examples=200, deadline=None)
    @given(tokens)
    def test_nesting_invariant(self, z):
        # present in a smaller window implies present in every larger one
        ws = StatusConfig().windows
        s = status_view(z)
        for t, tok in enumerate(z):
            present = [tok in z[max(0, t - w):t] for w in ws]
            assert present == sorted(present)
            assert len(ws) - sum(present) == s[t]

    def test_bad_windows(self):
        for w in [(), (0, 3), (3, 3), (7, 3)]:
            with pytest.raises(ValueError):
                StatusConfig(windows=w)


class TestFrequency:
    def test_empty_history_is_zero(self):
        f, _ = frequency_view(["a"])
        assert f[0] == pytest.approx(0.0)  # 0 / (0 + eps)

    def test_rate_contrast_hand_computed(self):
        cfg = FreqConfig(h_s=2, h_l=4, epsilon=1e-9)
        # at t=4: short window [a, a] -> 1.0, long window [b, b, a, a] -> 0.5
        f, _ = frequency_view(list("bbaaa"), cfg)
        assert f[4] == pytest.approx((1.0 - 0.5) / (0.5 + 1e-9), abs=1e-12)

    def test_suppression_reads_minus_one(self):
        cfg = FreqConfig(h_s=2, h_l=6)
        f, _ = frequency_view(list("aaaabba"), cfg)
        assert f[-1] == pytest.approx(-1.0, abs=1e-5)

    def test_clamp_and_count(self):
        cfg = FreqConfig(h_s=1, h_l=100, clamp_max=10.0)
        f, clamped = frequency_view(["a", "a"], cfg)
        assert f[1] == 10.0 and clamped == 1

    @settings(max_examples=200, deadline=None)
    @given(tokens, st.integers(1, 5), st.integers(1, 20))
    def test_matches_oracle_and_bounds(self, z, h_s, extra):
        cfg = FreqConfig(h_s=h_s, h_l=h_s + extra)
        f, _ = frequency_view(z, cfg)
        np.testing.assert_allclose(f, oracle_frequency(z, cfg), rtol=0, atol=1e-12)
        assert f.min() >= FREQ_MIN and f.max() <= cfg.clamp_max

    def test_random_oracle_agreement_long_sequences(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(1, 3000))
            z = rng.integers(0, int(rng.integers(1, 40)), size=n).tolist()
            cfg = FreqConfig(h_s=int(rng.integers(1, 8)), h_l=int(rng.integers(8, 60)))
            np.testing.assert_allclose(frequency_view(z, cfg)[0], oracle_frequency(z, cfg), atol=1e-12, rtol=0)
            scfg = StatusConfig(windows=tuple(sorted(rng.choice(np.arange(1, 40), 3, replace=False))))
            np.testing.assert_array_equal(status_view(z, scfg), oracle_status(z, scfg))

    def test_bad_config(self):
        for kw in [dict(h_s=0), dict(h_s=7, h_l=7), dict(epsilon=0.0), dict(clamp_max=-1.0)]:
            with pytest.raises(ValueError):
                FreqConfig(**kw)


class TestDeriveViews:
    def test_aligned_lengths(self):
        v = derive_views(list("abcabc"))
        assert len(v.z) == len(v.s) == len(v.f) == 6

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            derive_views([])
