"""The synthetic outfit world: planted rules, negatives, padding, FITB.

Run:  python demos/02_synthetic_outfits.py
"""

import numpy as np

from outfitnet.data import (GeneratorConfig, generate, make_fitb, mean_images,
                            pad_outfit, rule_holds, sample_negative)

cfg = GeneratorConfig(n_outfits={"train": 50, "val": 10, "test": 10}, seed=42)
ds = generate(cfg)
train = ds["train"]

print(f"generated {len(train.outfits)} train outfits, {len(train.items)} items")
sizes = [len(o.items) for o in train.outfits]
print("outfit sizes:", {s: sizes.count(s) for s in sorted(set(sizes))})

# every positive satisfies the planted rule: one palette, one texture
o = train.outfits[0]
print("\nfirst outfit:")
for it in o.items:
    print(f"  {it.type.label:<10} tokens={it.tokens}")
print("rule holds:", rule_holds(o.items))

# a negative breaks the rule in exactly one slot, and remembers which
rng = np.random.default_rng(0)
neg = sample_negative(o, train, rng)
print("\nnegative via same-type substitution:")
for i, it in enumerate(neg.items):
    marker = "  <-- planted fault" if i == neg.fault else ""
    print(f"  {it.type.label:<10} tokens={it.tokens}{marker}")
print("rule holds:", rule_holds(neg.items))

# padding fills the missing type slots with per-type mean images
means = mean_images(train)
small = next(x for x in train.outfits if len(x.items) == 3)
padded = pad_outfit(small, means)
print("\npadded 3-item outfit:")
for present, it in zip(padded.present, padded.items):
    print(f"  {it.type.label:<10} {'real' if present else 'mean-image pad'}")

# fill-in-the-blank: 1 correct option among 4 same-type candidates
q = make_fitb(o, train, rng)
print(f"\nFITB question blanks the {q.blank_type.label}; options:")
for i, opt in enumerate(q.options):
    marker = "  <-- answer" if i == q.answer_index else ""
    print(f"  [{i}] {opt.tokens}{marker}")
