"""Train a small DCL model on the synthetic pair-comparison task and inspect it.

Run with ``python demos/quickstart.py``; it takes about a minute on one core.
"""

from rdcl import pipeline as P
from rdcl.config import TrainConfig

cfg = TrainConfig(n_train=512, n_val=256, epochs=6, d=16, hidden=16, d_lat=8, probe=True)
train_ds, val_ds = P.make_datasets(cfg)
print(f"{len(train_ds)} training episodes, {len(val_ds)} validation episodes, T={cfg.T}, d={cfg.d}")

result = P.train(cfg, train_ds, val_ds, log=print)

# Accuracy split by question type: static questions compare appearance,
# dynamic questions compare motion.
print(P.evaluate(result.model, val_ds, cfg))

# Linear probes from sampled latents to the ground-truth classes.  A
# disentangled encoder puts static classes in s and dynamic classes in z.
for key, acc in result.probe.items():
    if key != "degenerate":
        print(f"probe {key:<10s} {acc:.3f}")
