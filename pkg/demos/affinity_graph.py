"""Show the top-k neighbours each object receives in the three affinity graphs.

Objects sharing a static class should cluster in the static graph, objects
sharing a dynamic class in the dynamic graph.  Run with
``python demos/affinity_graph.py``.
"""

import numpy as np

from rdcl import autograd as ag
from rdcl import pipeline as P
from rdcl.clm import build_augmented_affinity
from rdcl.config import TrainConfig
from rdcl.dse import encode

cfg = TrainConfig(n_train=512, n_val=64, epochs=6, d=16, hidden=16, d_lat=8, batch_size=16, probe=False)
train_ds, val_ds = P.make_datasets(cfg)
model = P.train(cfg, train_ds, val_ds).model

batch = P.Batch.from_dataset(val_ds, np.arange(cfg.batch_size))
x = np.concatenate([batch.x1, batch.x2])
classes = np.concatenate([val_ds.cls1[:cfg.batch_size], val_ds.cls2[:cfg.batch_size]])
with ag.no_grad():
    lat = encode(model.dse, x, sample=False)
    aff = build_augmented_affinity(np.concatenate([batch.a1, batch.a2]), lat.s, lat.z_last, cfg.clm_hyper())

for name, blk, col in (("static", aff.static, 0), ("dynamic", aff.dynamic, 1)):
    agree = []
    for i, nb in enumerate(blk.neighbours()):
        others = [j for j, _ in nb if j != i]
        agree += [classes[j, col] == classes[i, col] for j in others]
    print(f"{name} graph: {np.mean(agree):.2f} of neighbours share the {name} class "
          f"(chance about {1 / 4:.2f})")
    row = blk.neighbours()[0]
    print("  object 0 neighbours:", ", ".join(f"{j} (w={w:.2f}, class {classes[j, col]})" for j, w in row))
