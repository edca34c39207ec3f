"""Train a small model and measure compatibility AUC and FITB accuracy.

Uses a reduced dataset and a narrow backbone so it finishes in about a
minute on a laptop CPU.  The full-scale protocol is the package default
(2000 outfits, 50 epochs); see the README.

Run:  python demos/03_train_and_evaluate.py
"""

import sys
import time

import numpy as np

from outfitnet.config import TrainConfig
from outfitnet.data import GeneratorConfig, generate
from outfitnet.evaluation import compatibility_auc, fitb_accuracy
from outfitnet.training import train

ds = generate(GeneratorConfig(n_outfits={"train": 300, "val": 60, "test": 80}, seed=1))
cfg = TrainConfig(epochs=6, batch=16, seed=1, stage_channels=(8, 12, 16, 24),
                  hidden_dim=16, joint_dim=16)

print("training 6 epochs on 300 outfits (progress on stderr)...")
t0 = time.time()
ckpt = train(ds, cfg, log_stream=sys.stderr)
print(f"done in {time.time() - t0:.0f}s; best val AUC {ckpt.best_val_auc:.4f} "
      f"at epoch {ckpt.best_epoch}")

model = ckpt.to_model()
aucs = [compatibility_auc(model, ds["test"], seed=100 + r) for r in range(3)]
fitbs = [fitb_accuracy(model, ds["test"], seed=100 + r) for r in range(3)]
print(f"test AUC  over 3 negative-sampling seeds: "
      f"{np.mean(aucs):.4f} +- {np.std(aucs):.4f}")
print(f"test FITB over 3 option-sampling seeds:   "
      f"{np.mean(fitbs):.4f} +- {np.std(fitbs):.4f}")
print("(chance level: AUC 0.5, FITB 0.25)")
