"""Two-step rollouts of an Amos-mode net lose convexity; Mpc-mode nets keep it.

The Amos net computes |Q_u + 0.3| from the input and feeds the predicted
change back with weight -2, so the second prediction is -2|u0 + 0.3| + ...,
which is concave in u0.
"""

import numpy as np
import pandas as pd

from icnn_mpc.features import FEATURES
from icnn_mpc.model import Family, IcnnModel, init_network
from icnn_mpc.networks import Activation, FicnnParams, Mode
from icnn_mpc.rollout import DisturbanceTrace, RolloutHistory, RolloutPlan, Segment, audit_convexity

nf = len(FEATURES)
Wy0 = np.zeros((2, nf))
Wy0[0, FEATURES.index("Q_u")], Wy0[1, FEATURES.index("Q_u")] = 1.0, -1.0
Wy1 = np.zeros((1, nf))
Wy1[0, FEATURES.index("dT_br_k")] = -2.0
net = FicnnParams([None, np.ones((1, 2))], [Wy0, Wy1], [np.array([0.3, -0.3]), np.zeros(1)],
                  [Activation.relu(), Activation.identity()], Mode.AMOS)
amos = IcnnModel(Family.FICNN_AMOS, net, np.zeros(nf), np.ones(nf), 20)

rng = np.random.default_rng(0)
mpc = IcnnModel(Family.FICNN_MPC, init_network(Family.FICNN_MPC, 9, 4, 0.8, rng),
                np.zeros(nf), np.full(nf, 10.0), 20)

hist = RolloutHistory(22.0, np.zeros(3), np.zeros(2))
ts = pd.date_range("2021-07-01 12:00", periods=2, freq="20min")
dist = DisturbanceTrace(ts, np.full(2, 30.0), np.full(2, 300.0), 1.0)
for name, model in (("amos", amos), ("mpc", mpc)):
    report = audit_convexity(RolloutPlan([Segment(model, 2)]), hist, dist, samples=5000)
    print(f"{name:5s}", report.summary_line())
