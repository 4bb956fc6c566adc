"""Compare DCL (zero-filled inputs) with RDCL (shared/unique completion) as audio goes missing.

Run with ``python demos/missing_audio.py [seed]``.  Each training run takes a few seconds.
"""

import sys

from rdcl import pipeline as P
from rdcl.config import TrainConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
small = dict(seed=seed, n_train=512, n_val=256, epochs=8, d=16, hidden=16, d_lat=8, probe=False)

print("alpha   dcl     rdcl")
for alpha in (0.0, 0.3, 0.5, 0.7):
    row = []
    for mode in ("dcl", "rdcl"):
        cfg = TrainConfig(**small, mode=mode, alpha_audio=alpha)
        row.append(P.train(cfg).final_accuracy)
    print(f"{alpha:.1f}     {row[0]:.3f}   {row[1]:.3f}")
