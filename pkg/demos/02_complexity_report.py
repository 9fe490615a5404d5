"""
Counting parameters and multiplies
==================================

Every layer reports its counted weights and MACs next to the closed-form
value. The totals are what you would quote in a table.
"""

import numpy as np

from shiftlic.analysis import count_model
from shiftlic.cra import ChannelRecursiveAttention, cra_param_count
from shiftlic.model import Model, ModelConfig

# the attention module: counted weights land a little under the closed form
for N in (32, 64, 128):
    counted = ChannelRecursiveAttention(N, np.random.default_rng(0)).weight_count()
    print(f"CRA N={N}: counted {counted}, closed form {float(cra_param_count(N)):.0f}")

# a full tiny model on a 128x128 input
report = count_model(Model(ModelConfig.tiny(), seed=0), 128, 128)
print(report.table())

# the two real configurations at 768x512
for name in ("small", "medium"):
    r = count_model(Model(getattr(ModelConfig, name)(), seed=0), 512, 768)
    print(f"{name}: {r.all_params / 1e6:.2f}M parameters, {r.kmacs_per_pixel:.2f} KMACs/pixel")
