"""What do the different backbone stages encode?

Retrieval by early-stage features should group items by palette (a
low-level cue), later stages lean more on texture and shape.  We measure
how often a query's top neighbors share its palette or texture, stage by
stage, against the corpus base rates.

Run:  python demos/05_layer_retrieval.py
"""

import sys

import numpy as np

from outfitnet.config import TrainConfig
from outfitnet.data import GeneratorConfig, generate
from outfitnet.evaluation import retrieve
from outfitnet.training import train

ds = generate(GeneratorConfig(n_outfits={"train": 300, "val": 60, "test": 80}, seed=3))
cfg = TrainConfig(epochs=6, batch=16, seed=3, stage_channels=(8, 12, 16, 24),
                  hidden_dim=16, joint_dim=16)
print("training a small model first (6 epochs)...")
ckpt = train(ds, cfg, log_stream=sys.stderr if "-v" in sys.argv else None)
model = ckpt.to_model()

corpus = list(ds["test"].items.values())
by_id = {it.id: it for it in corpus}
queries = corpus[::9][:12]

base_palette = np.mean([a.palette_id == b.palette_id
                        for a in queries for b in corpus if a.id != b.id])
base_texture = np.mean([a.texture_id == b.texture_id
                        for a in queries for b in corpus if a.id != b.id])
print(f"\ncorpus base rates: palette {base_palette:.3f}, texture {base_texture:.3f}")
print(f"{'stage':>5} {'palette@8':>10} {'texture@8':>10}")
for layer in (1, 2, 3, 4):
    pal, tex = [], []
    for q in queries:
        top = retrieve(q, layer, corpus, k=9, model=model)
        neighbors = [by_id[i] for i, _ in top if i != q.id][:8]
        pal += [n.palette_id == q.palette_id for n in neighbors]
        tex += [n.texture_id == q.texture_id for n in neighbors]
    print(f"{layer:>5} {np.mean(pal):>10.3f} {np.mean(tex):>10.3f}")
print("\n(high palette agreement at stage 1 = early features are color-driven)")
