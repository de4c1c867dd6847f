"""
Communication cost of the four methods
======================================

Runs the federation protocol with no-op clients on zero vectors of the
reference UNet's size and prints the transferred parameter count per method,
next to the closed-form total.
"""

from feddiffuse.federation import expected_traffic, reference_layout, simulate_traffic

#%%
# Segment sizes of the reference network.

layout = reference_layout()
for seg in ("encoder", "bottleneck", "decoder"):
    print(f"{seg:>10}: {layout.size(seg):>9,}")
print(f"{'total':>10}: {layout.total:>9,}")

#%%
# Fifteen rounds, a few client counts.  Odd K under usplit depends on which
# segment the unpaired client reports, so the realised plans are passed along.

R = 15
print(f"\n{'method':>8} {'K':>3} {'N (1e6)':>9} {'vs full':>8}")
for K in (2, 5, 10):
    full = simulate_traffic("full", K, R, layout).ledger.total
    for method in ("full", "usplit", "ulatdec", "udec"):
        res = simulate_traffic(method, K, R, layout, seed=K)
        n = res.ledger.total
        assert n == expected_traffic(method, K, R, layout, res.plans or None)
        print(f"{method:>8} {K:>3} {n / 1e6:>9.2f} {n / full:>8.3f}")
