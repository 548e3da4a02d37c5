"""Published four-decimal values for :func:`mixedlq.model.builtin_example`.

Each mixed case pairs a feedback part (one ``1 x 2`` row per stage) with
the expected convexity and stationarity operators at stages 0..3.
"""
from __future__ import annotations

import numpy as np

OPEN_CONVEXITY = (8.7645, -0.4783, 1.6935, 0.7193)
FEEDBACK_CONVEXITY = (-11.0590, 20.5335, -0.5593, 0.4734)

MIXED_CASES = (
    ([[1.4090, 1.4172], [-0.1241, 1.4897], [0.7147, -0.2050], [0.7254, -0.0631]],
     (42.1215, 21.2758, 3.1578, 0.4734), (-2.1680, -10.6485, 0.4740, 0.4734)),
    ([[0.7269, -0.3034], [0.4889, 1.0347], [0.7172, 1.6302], [0.6715, -1.2075]],
     (106.9951, 28.5844, 2.3227, 0.4734), (-2.4665, -10.5353, 0.4860, 0.4734)),
    ([[0.3192, 0.3129], [-0.1022, -0.2414], [1.3703, -1.7115], [0.3252, -0.7549]],
     (35.1212, 1.8350, 1.7640, 0.4734), (-0.8786, -9.8337, 0.4876, 0.4734)),
    ([[-0.7648, -1.4023], [-0.1924, 0.8886], [-0.6156, 0.7481], [-1.0616, 2.3505]],
     (20.1218, 2.2184, 0.8268, 0.4734), (-1.3929, -9.2281, 0.4817, 0.4734)),
    ([[-0.4390, -1.7947], [-0.0825, -1.9330], [-0.6669, 0.1873], [0.7223, 2.5855]],
     (52.1877, 31.3899, 5.4614, 0.4734), (-1.9877, -10.6047, 0.4485, 0.4734)),
    ([[0.4900, 0.7394], [0.3035, -0.6003], [0.1001, -0.5445], [0.8404, -0.8880]],
     (31.4336, 2.6274, 2.9500, 0.4734), (-1.0423, -9.8977, 0.4799, 0.4734)),
    ([[0.9610, 0.1240], [1.3546, -1.0722], [-2.1384, -0.8396], [1.7119, -0.1941]],
     (429.0833, 38.2114, 6.7849, 0.4734), (1.1514, -8.0070, 0.4581, 0.4734)),
    ([[1.3790, -1.0582], [2.9080, 0.8252], [-0.1977, -1.2078], [1.4367, -1.9609]],
     (112.4586, 3.2533, 4.0958, 0.4734), (1.7922, -9.5504, 0.4799, 0.4734)),
    ([[-1.1564, -0.5336], [-0.8314, -0.9792], [-1.7502, -0.2857], [0.0229, -0.2620]],
     (7.6517, 5.3349, 1.3968, 0.4734), (-0.8077, -8.7128, 0.4881, 0.4734)),
    ([[0.0513, 0.8261], [-0.3031, 0.0230], [-0.1952, -0.2176], [0.6601, -0.0679]],
     (11.0638, 4.5685, 2.9632, 0.4734), (-1.2944, -9.9027, 0.4752, 0.4734)),
)

# closed-loop gains of the last mixed case, one row per stage
LAST_CASE_GAINS = ((1.4347, 4.2547), (-0.3247, -0.5193), (1.4568, 0.3845), (-1.1787, 0.4035))

MATCH_TOLERANCE = 1e-3


def case_gains(index: int) -> np.ndarray:
    """Feedback part of mixed case ``index`` as an ``(N, m, n)`` array."""
    return np.asarray(MIXED_CASES[index][0], dtype=float)[:, None, :]
