"""
Spatial shift and the shift block
=================================

A shift moves channel groups by one pixel in four directions. It has no
weights and no multiplies; the block around it carries all the cost.
"""

import numpy as np

from shiftlic.shift import (ShiftSpec, SpatialShiftBlock, channel_shuffle, spatial_shift,
                            ssb_flops, ssb_param_count)
from shiftlic.tensor import Tensor, count_macs

# one 4x4 plane per group, with a single bright pixel in the middle
x = np.zeros((1, 4, 4, 4), np.float32)
x[0, :, 1, 1] = 1.0
out = spatial_shift(Tensor(x), ShiftSpec())
for c in range(4):
    (r, col), = np.argwhere(out.data[0, c] == 1)
    print(f"group {c}: pixel moved from (1, 1) to ({r}, {col})")

# a channel shuffle is just a fixed permutation
ch = Tensor(np.arange(8, dtype=np.float32).reshape(1, 8, 1, 1))
print("shuffle(8 channels, 2 groups):", channel_shuffle(ch, 2).data.ravel().astype(int))

# the block: 1x1 conv, GELU, shift, 1x1 conv, plus a shortcut
rng = np.random.default_rng(0)
for M, N in [(64, 64), (64, 128)]:
    block = SpatialShiftBlock(M, N, ShiftSpec(), rng)
    with count_macs() as c:
        y = block(Tensor(rng.standard_normal((1, M, 32, 32)).astype(np.float32)))
    print(f"SSB {M}->{N}: out {y.shape}, weights {block.weight_count()} "
          f"(formula {ssb_param_count(M, N)}), MACs {c.total_macs} "
          f"(formula {ssb_flops(M, N, 32, 32)})")
