"""Synthetic outfit dataset with a planted compatibility rule.

Every positive outfit is rendered from a single (palette, texture) draw:
each of its items is a type-specific silhouette filled with a color sampled
from that palette, modulated by that texture pattern, plus a little pixel
noise.  The planted rule -- all items share palette id AND texture id --
gives a ground truth for compatibility labels, fault indices and diagnosis
metrics.  Palette is a low-level (color) cue, texture a mid-level one, so
the different backbone stages have genuinely different work to do.

On disk a split is ``<dir>/items/*.ppm`` (binary P6, 32x32) plus a
``manifest.json`` describing items, outfits and the generator settings.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .comparison import ItemType, ITEM_TYPES
from .errors import (ConfigError, DataError, FormatError, InputError, IoError,
                     ItemTypeError, PoolError, SamplingError)

IMAGE_SIDE = 32
SLOT_ORDER: tuple[ItemType, ...] = ITEM_TYPES  # fixed padded slot order

PALETTE_NAMES = ("crimson", "azure", "meadow", "amber",
                 "violet", "teal", "sierra", "slate")
PALETTE_BASES = np.array([
    (0.85, 0.20, 0.20),
    (0.20, 0.35, 0.85),
    (0.20, 0.75, 0.30),
    (0.90, 0.75, 0.20),
    (0.60, 0.25, 0.75),
    (0.15, 0.70, 0.70),
    (0.70, 0.45, 0.20),
    (0.45, 0.50, 0.55),
])
TEXTURE_NAMES = ("solid", "stripes", "dots", "checker", "diagonal", "rings")

NOISE_SIGMA = 0.02
BACKGROUND = 0.92
MAX_REDRAWS = 100


@dataclass
class Item:
    id: str
    type: ItemType
    image: np.ndarray            # [3, 32, 32] floats in [0, 1]
    tokens: list[str]
    palette_id: int | None = None
    texture_id: int | None = None

    def attrs(self) -> dict:
        return {"palette": self.palette_id, "texture": self.texture_id}


@dataclass
class Outfit:
    items: list[Item]
    label: int = 1
    fault: int | None = None     # index of the planted deviant item, if any

    def types(self) -> list[ItemType]:
        return [it.type for it in self.items]

    def validate(self):
        if not (3 <= len(self.items) <= 5):
            raise InputError(f"outfit must have 3-5 items, has {len(self.items)}")
        if len(set(self.types())) != len(self.items):
            raise ItemTypeError("outfit has duplicate item types")


@dataclass
class PaddedOutfit:
    """Outfit expanded to the 5 fixed type slots; padded slots carry mean images."""

    items: list[Item]                 # one per SLOT_ORDER entry
    present: np.ndarray               # bool [5]
    label: int = 1
    fault_slot: int | None = None

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])


@dataclass
class GeneratorConfig:
    n_outfits: dict[str, int] = field(default_factory=lambda: {"train": 2000, "val": 300, "test": 500})
    palettes: int = 4
    textures: int = 3
    seed: int = 7

    def validate(self):
        for split, n in self.n_outfits.items():
            if n < 1:
                raise ConfigError(f"{split} outfit count must be >= 1, got {n}")
        if not 2 <= self.palettes <= len(PALETTE_BASES):
            raise ConfigError(f"palettes must be in [2, {len(PALETTE_BASES)}]")
        if not 2 <= self.textures <= len(TEXTURE_NAMES):
            raise ConfigError(f"textures must be in [2, {len(TEXTURE_NAMES)}]")


@dataclass
class DatasetManifest:
    split: str
    items: dict[str, Item]
    outfits: list[Outfit]
    config: GeneratorConfig

    def items_of_type(self, t: ItemType) -> list[Item]:
        return [it for it in self.items.values() if it.type == t]

    def all_tokens(self) -> list[str]:
        toks = set()
        for it in self.items.values():
            toks.update(it.tokens)
        return sorted(toks)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _silhouette(t: ItemType) -> np.ndarray:
    """Boolean 32x32 stencil; one fixed shape per item type."""
    m = np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=bool)
    if t == ItemType.TOP:
        m[6:26, 8:24] = True     # torso
        m[6:14, 3:8] = True      # left sleeve
        m[6:14, 24:29] = True    # right sleeve
    elif t == ItemType.BOTTOM:
        m[4:10, 9:23] = True     # waist
        m[10:28, 9:15] = True    # left leg
        m[10:28, 17:23] = True   # right leg
    elif t == ItemType.SHOE:
        m[18:26, 4:28] = True
        m[14:18, 4:14] = True    # ankle
    elif t == ItemType.BAG:
        m[12:28, 8:24] = True
        m[6:12, 12:14] = True    # handle sides
        m[6:12, 18:20] = True
        m[6:8, 12:20] = True     # handle top
    else:  # ACCESSORY
        yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
        m[(yy - 16) ** 2 + (xx - 16) ** 2 <= 64] = True
    return m


_SILHOUETTES = {t: _silhouette(t) for t in ITEM_TYPES}


def _texture_pattern(texture_id: int) -> np.ndarray:
    """Multiplicative brightness pattern in [dark, 1] over the 32x32 grid."""
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    name = TEXTURE_NAMES[texture_id]
    dark = 0.45
    if name == "solid":
        pat = np.ones((IMAGE_SIDE, IMAGE_SIDE))
    elif name == "stripes":
        pat = np.where((yy // 2) % 2 == 0, 1.0, dark)
    elif name == "dots":
        pat = np.where((yy % 6 < 2) & (xx % 6 < 2), dark, 1.0)
    elif name == "checker":
        pat = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 1.0, dark)
    elif name == "diagonal":
        pat = np.where(((yy + xx) // 3) % 2 == 0, 1.0, dark)
    else:  # rings
        r = np.sqrt((yy - 16.0) ** 2 + (xx - 16.0) ** 2)
        pat = np.where((r // 3) % 2 == 0, 1.0, dark)
    return pat


def render_item(t: ItemType, palette_id: int, texture_id: int,
                rng: np.random.Generator) -> np.ndarray:
    """Draw one item image: silhouette filled with a palette color, textured."""
    base = PALETTE_BASES[palette_id]
    color = np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    pattern = _texture_pattern(texture_id)
    mask = _SILHOUETTES[t]
    img = np.full((3, IMAGE_SIDE, IMAGE_SIDE), BACKGROUND)
    for c in range(3):
        img[c][mask] = color[c] * pattern[mask]
    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def item_tokens(t: ItemType, palette_id: int, texture_id: int) -> list[str]:
    return [PALETTE_NAMES[palette_id], TEXTURE_NAMES[texture_id], t.label]


def rule_holds(items: list[Item]) -> bool:
    """Planted compatibility rule: all items share palette id and texture id."""
    ps = {it.palette_id for it in items}
    ts = {it.texture_id for it in items}
    return len(ps) == 1 and len(ts) == 1 and None not in ps and None not in ts


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_split(split: str, n_outfits: int, cfg: GeneratorConfig,
                   rng: np.random.Generator) -> DatasetManifest:
    items: dict[str, Item] = {}
    outfits: list[Outfit] = []
    counter = 0
    for _ in range(n_outfits):
        size = int(rng.integers(3, 6))
        type_idx = rng.choice(len(ITEM_TYPES), size=size, replace=False)
        palette = int(rng.integers(cfg.palettes))
        texture = int(rng.integers(cfg.textures))
        outfit_items = []
        for ti in sorted(type_idx):
            t = ITEM_TYPES[ti]
            item = Item(
                id=f"{split}-{counter:05d}",
                type=t,
                image=render_item(t, palette, texture, rng),
                tokens=item_tokens(t, palette, texture),
                palette_id=palette,
                texture_id=texture,
            )
            counter += 1
            items[item.id] = item
            outfit_items.append(item)
        outfits.append(Outfit(items=outfit_items, label=1))
    return DatasetManifest(split=split, items=items, outfits=outfits, config=cfg)


def generate(cfg: GeneratorConfig) -> dict[str, DatasetManifest]:
    """All splits from one seeded pass; deterministic given the config."""
    cfg.validate()
    manifests = {}
    for split in ("train", "val", "test"):
        if split not in cfg.n_outfits:
            continue
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, {"train": 1, "val": 2, "test": 3}[split]])))
        manifests[split] = generate_split(split, cfg.n_outfits[split], cfg, rng)
    return manifests


def sample_negative(positive: Outfit, pool: DatasetManifest,
                    rng: np.random.Generator) -> Outfit:
    """Replace one uniformly chosen slot with a random same-type item.

    Redraws when the replacement accidentally satisfies the planted rule
    (same palette and texture), so the result is a clean negative with the
    replaced slot recorded as the fault.
    """
    positive.validate()
    by_type = {t: pool.items_of_type(t) for t in positive.types()}
    for t, cands in by_type.items():
        if len(cands) < 2:
            raise PoolError(f"pool has fewer than 2 items of type {t.label}")
    slot = int(rng.integers(len(positive.items)))
    original = positive.items[slot]
    for _ in range(MAX_REDRAWS):
        candidate = by_type[original.type][int(rng.integers(len(by_type[original.type])))]
        if candidate.id == original.id:
            continue
        new_items = list(positive.items)
        new_items[slot] = candidate
        if not rule_holds(new_items):
            return Outfit(items=new_items, label=0, fault=slot)
    raise SamplingError(
        f"could not find a rule-breaking substitute for slot {slot} "
        f"in {MAX_REDRAWS} draws")


def mean_images(manifest: DatasetManifest) -> dict[ItemType, np.ndarray]:
    """Pixelwise mean image per type over the manifest's items."""
    means = {}
    for t in ITEM_TYPES:
        imgs = [it.image for it in manifest.items.values() if it.type == t]
        if not imgs:
            raise DataError(f"no items of type {t.label} to average")
        means[t] = np.mean(imgs, axis=0)
    return means


def pad_outfit(outfit: Outfit, means: dict[ItemType, np.ndarray]) -> PaddedOutfit:
    """Expand to the fixed 5-slot order, filling absent types with mean images."""
    outfit.validate()
    by_type = {it.type: it for it in outfit.items}
    fault_type = outfit.items[outfit.fault].type if outfit.fault is not None else None
    slots, present = [], np.zeros(len(SLOT_ORDER), dtype=bool)
    fault_slot = None
    for s, t in enumerate(SLOT_ORDER):
        if t in by_type:
            slots.append(by_type[t])
            present[s] = True
            if fault_type == t:
                fault_slot = s
        else:
            slots.append(Item(id=f"pad-{t.label}", type=t, image=means[t],
                              tokens=[t.label]))
    return PaddedOutfit(items=slots, present=present, label=outfit.label,
                        fault_slot=fault_slot)


@dataclass
class FitbQuestion:
    question: Outfit              # the outfit with the blanked item removed
    blank_type: ItemType
    options: list[Item]           # 4 same-type options, shuffled
    answer_index: int


def make_fitb(positive: Outfit, pool: DatasetManifest,
              rng: np.random.Generator) -> FitbQuestion:
    """Blank one slot; options are the true item plus 3 rule-breaking distractors."""
    positive.validate()
    slot = int(rng.integers(len(positive.items)))
    truth = positive.items[slot]
    remainder = [it for i, it in enumerate(positive.items) if i != slot]
    cands = [it for it in pool.items_of_type(truth.type) if it.id != truth.id]
    if len(cands) < 3:
        raise PoolError(f"need >= 3 distractors of type {truth.type.label}")
    distractors: list[Item] = []
    attempts = 0
    while len(distractors) < 3:
        attempts += 1
        if attempts > MAX_REDRAWS * 3:
            raise PoolError("could not draw 3 rule-breaking distractors")
        c = cands[int(rng.integers(len(cands)))]
        if any(c.id == d.id for d in distractors):
            continue
        if rule_holds(remainder + [c]):
            continue  # an accidental correct answer would make the key ambiguous
        distractors.append(c)
    options = distractors + [truth]
    order = rng.permutation(4)
    options = [options[i] for i in order]
    answer = int(np.nonzero(order == 3)[0][0])
    return FitbQuestion(question=Outfit(items=remainder, label=1),
                        blank_type=truth.type, options=options, answer_index=answer)


# ---------------------------------------------------------------------------
# PPM image I/O
# ---------------------------------------------------------------------------

def write_ppm(path: Path, image: np.ndarray):
    """Binary P6, maxval 255; channel-major float [0,1] -> interleaved bytes."""
    if image.shape != (3, IMAGE_SIDE, IMAGE_SIDE):
        raise FormatError(f"expected (3, {IMAGE_SIDE}, {IMAGE_SIDE}) image, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(pixels.transpose(1, 2, 0).tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_ppm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM", offset=0)
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header", offset=pos)
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field", offset=2) from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}", offset=2)
    need = width * height * 3
    if len(raw) - pos < need:
        raise FormatError(f"{path}: expected {need} pixel bytes, got {len(raw) - pos}",
                          offset=pos)
    pixels = np.frombuffer(raw[pos:pos + need], dtype=np.uint8)
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return img


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "outfit-dataset-v1"
OUTFIT_FORMAT = "outfit-v1"


def save_split(manifest: DatasetManifest, out_dir: Path):
    out_dir = Path(out_dir)
    items_dir = out_dir / "items"
    try:
        items_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {items_dir}: {e}") from e
    item_records = {}
    for item_id in sorted(manifest.items):
        it = manifest.items[item_id]
        rel = f"items/{item_id}.ppm"
        write_ppm(out_dir / rel, it.image)
        item_records[item_id] = {
            "path": rel,
            "type": it.type.label,
            "tokens": it.tokens,
            "attrs": it.attrs(),
        }
    doc = {
        "format": MANIFEST_FORMAT,
        "split": manifest.split,
        "generator": {
            "n_outfits": manifest.config.n_outfits,
            "palettes": manifest.config.palettes,
            "textures": manifest.config.textures,
            "seed": manifest.config.seed,
        },
        "items": item_records,
        "outfits": [{"items": [it.id for it in o.items],
                     "label": o.label, "fault": o.fault}
                    for o in manifest.outfits],
    }
    try:
        (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    except OSError as e:
        raise IoError(f"cannot write manifest: {e}") from e


def load_split(directory: Path) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e.msg}", offset=e.pos) from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: unknown manifest format {doc.get('format')!r}")
    gen = doc["generator"]
    cfg = GeneratorConfig(n_outfits=dict(gen["n_outfits"]), palettes=gen["palettes"],
                          textures=gen["textures"], seed=gen["seed"])
    items: dict[str, Item] = {}
    for item_id, rec in doc["items"].items():
        items[item_id] = Item(
            id=item_id,
            type=ItemType.from_label(rec["type"]),
            image=read_ppm(directory / rec["path"]),
            tokens=list(rec["tokens"]),
            palette_id=rec["attrs"].get("palette"),
            texture_id=rec["attrs"].get("texture"),
        )
    outfits = []
    for rec in doc["outfits"]:
        try:
            members = [items[i] for i in rec["items"]]
        except KeyError as e:
            raise FormatError(f"{path}: outfit references unknown item {e.args[0]!r}") from None
        outfits.append(Outfit(items=members, label=rec["label"], fault=rec.get("fault")))
    return DatasetManifest(split=doc["split"], items=items, outfits=outfits, config=cfg)


def save_dataset(manifests: dict[str, DatasetManifest], out_dir: Path):
    for split, manifest in manifests.items():
        save_split(manifest, Path(out_dir) / split)


def load_dataset(root: Path) -> dict[str, DatasetManifest]:
    root = Path(root)
    out = {}
    for split in ("train", "val", "test"):
        if (root / split / "manifest.json").exists():
            out[split] = load_split(root / split)
    if not out:
        raise IoError(f"no dataset splits found under {root}")
    return out


def save_outfit(outfit: Outfit, out_dir: Path):
    """Standalone single-outfit manifest (the diagnose/revise input format)."""
    out_dir = Path(out_dir)
    items_dir = out_dir / "items"
    try:
        items_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {items_dir}: {e}") from e
    records = []
    for it in outfit.items:
        rel = f"items/{it.id}.ppm"
        write_ppm(out_dir / rel, it.image)
        records.append({"id": it.id, "path": rel, "type": it.type.label,
                        "tokens": it.tokens, "attrs": it.attrs()})
    doc = {"format": OUTFIT_FORMAT, "items": records,
           "label": outfit.label, "fault": outfit.fault}
    (out_dir / "outfit.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_outfit(manifest_path: Path) -> Outfit:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "outfit.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as e:
        raise IoError(f"cannot read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON: {e.msg}", offset=e.pos) from e
    if doc.get("format") != OUTFIT_FORMAT:
        raise FormatError(f"{manifest_path}: unknown outfit format {doc.get('format')!r}")
    base = manifest_path.parent
    items = []
    for rec in doc["items"]:
        items.append(Item(id=rec["id"], type=ItemType.from_label(rec["type"]),
                          image=read_ppm(base / rec["path"]),
                          tokens=list(rec["tokens"]),
                          palette_id=rec.get("attrs", {}).get("palette"),
                          texture_id=rec.get("attrs", {}).get("texture")))
    outfit = Outfit(items=items, label=doc.get("label", 1), fault=doc.get("fault"))
    outfit.validate()
    return outfit
