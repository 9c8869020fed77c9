"""Walk through the two statistical views on small hand-built sequences.

Run: python demos/views_walkthrough.py
"""

from mvgate.views import FreqConfig, StatusConfig, derive_views


def show(title, z, status_cfg=StatusConfig(), freq_cfg=FreqConfig()):
    v = derive_views(z, status_cfg, freq_cfg)
    print(f"\n{title}")
    print(f"  windows {status_cfg.windows}, h_s={freq_cfg.h_s}, h_l={freq_cfg.h_l}")
    for t, (tok, s, f) in enumerate(zip(v.z, v.s, v.f)):
        print(f"  t={t:2d}  {tok:10s}  s={s}  f={f:+.3f}")


# A token that returns after 20 quiet steps is absent from every window.
show("resurfacing", ["logon"] + ["email"] * 19 + ["logon"])

# A rare token firing back to back: short-window rate jumps above the long one.
show("burst", ["web", "email"] * 4 + ["print"] * 4)

# Short rate 1.0 against a long rate of 1/3 gives f close to 2.
history = ["x", "a", "a"] * 7 + ["b"] * 6 + ["x", "x", "x"]
v = derive_views(history + ["x"], freq_cfg=FreqConfig(h_s=3, h_l=30))
print(f"\nshort rate 3/3 vs long rate 10/30: f = {float(v.f[-1])!r}")
print("the epsilon in the denominator pulls it 6*eps below 2")
