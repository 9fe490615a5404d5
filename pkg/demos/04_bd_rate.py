"""
Comparing two rate-distortion curves
====================================

BD-rate is the average bitrate change at equal quality. A curve that uses
10% fewer bits everywhere scores exactly -10%.
"""

from shiftlic.analysis import RdCurve, bd_rate, bd_rate_per_kmacs

anchor = RdCurve([(0.1, 27.0), (0.2, 29.5), (0.4, 32.0), (0.8, 34.8), (1.2, 36.3)])
cheaper = RdCurve([(0.9 * r, q) for r, q in anchor.points])
better = RdCurve([(r, q + 0.4) for r, q in anchor.points])

print(f"anchor vs itself:      {bd_rate(anchor, anchor):+.2f}%")
print(f"anchor vs 0.9x rate:   {bd_rate(anchor, cheaper):+.2f}%")
bd = bd_rate(anchor, better)
print(f"anchor vs +0.4 dB:     {bd:+.2f}%")
print(f"per MAC/pixel at 170 KMACs/pixel: {bd_rate_per_kmacs(bd, 170.0):+.3e}%")
