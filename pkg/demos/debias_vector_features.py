"""
How debiasing spreads vector features
=====================================

Message passing on a small molecule tends to line up every l=1 channel of an
atom along a few bond directions. The debias step removes a gated share of the
dominant direction. The bias metric is the fraction of vector variance on the
principal axis: 1/3 means isotropic, 1 means all channels are parallel.
"""

import numpy as np

from floatorb import Molecule, NetworkConfig, forward, init_params
from floatorb.network import TensorFeatures, bias_metric, debias

ammonia = Molecule.from_symbols(
    "NHHH",
    [[0, 0, 0.1162], [0, 0.9377, -0.2711], [0.8121, -0.4689, -0.2711], [-0.8121, -0.4689, -0.2711]],
)

# %%
# Same seed, with and without the debias layers.

for seed in range(5):
    on = forward(ammonia, init_params(seed))
    off = forward(ammonia, init_params(seed, NetworkConfig(debias=False)))
    b_on = np.mean([bias_metric(on.features, a) for a in range(4)])
    b_off = np.mean([bias_metric(off.features, a) for a in range(4)])
    print(f"seed {seed}: bias {b_off:.3f} without -> {b_on:.3f} with")

# %%
# The fully parallel case can be worked by hand. With gate 1 every vector
# a u becomes (a - sign a) u, renormalized, so long vectors keep pointing
# along u and short ones flip.

u = np.array([0.0, 0.6, 0.8])
a = np.array([2.5, -0.3, 1.7, -4.0])
f = TensorFeatures(np.zeros((1, 4)), (a[:, None] * u)[None], np.zeros((1, 4, 3, 3)))
out = debias(f, weights=np.ones((1, 4))).v[0]
print(np.round(out @ u, 12))
