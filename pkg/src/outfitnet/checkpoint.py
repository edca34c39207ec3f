"""Single-file checkpoint format.

Layout: magic ``MCN1`` | uint64 little-endian header length | UTF-8 JSON
header | concatenated little-endian float32 blobs.  The header carries the
format version, the canonical condition order, the vocabulary, the training
configuration, the best validation AUC/epoch, and an array table of
(name, shape, offset, nbytes) entries describing the blobs.  Parameters are
trained in float64 but stored as float32; a save/load round trip therefore
perturbs values by at most ~1e-7 relative, and a second save is
byte-identical to the first.

Besides the parameter banks and normalization statistics, the per-type mean
images used for padding travel in the blob section, so diagnosis and
revision work from the checkpoint alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .comparison import MaskBank, NormStats, condition_names
from .config import TrainConfig
from .data import SLOT_ORDER
from .errors import FormatError, IoError
from .model import Model
from .vse import Vocabulary

MAGIC = b"MCN1"
VERSION = 1

_FLAT_ORDER_DOC = ("stage-major: for each enabled stage in ascending order, "
                   "the 10 conditions in the condition_order listed here")


def quantize(arr: np.ndarray) -> np.ndarray:
    """float64 -> float32 -> float64, the storage round trip."""
    return arr.astype("<f4").astype(np.float64)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_var: np.ndarray
    vocab_tokens: list[str]
    mean_images: dict[str, np.ndarray]
    best_val_auc: float = 0.0
    best_epoch: int = 0
    version: int = VERSION
    condition_order: list[str] = field(default_factory=condition_names)

    @classmethod
    def from_model(cls, model: Model, best_val_auc: float, best_epoch: int) -> "Checkpoint":
        params = {name: quantize(t.data) for name, t in model.named_parameters()}
        means = model.require_mean_images()
        return cls(
            config=model.cfg,
            params=params,
            norm_mean=quantize(model.norm.mean),
            norm_var=quantize(model.norm.var),
            vocab_tokens=list(model.vocab.tokens),
            mean_images={t.label: quantize(means[t]) for t in SLOT_ORDER},
            best_val_auc=best_val_auc,
            best_epoch=best_epoch,
        )

    def to_model(self) -> Model:
        """Rebuild a ready-to-use model from the stored arrays."""
        vocab = Vocabulary(self.vocab_tokens)
        model = Model.build(self.config, vocab)
        for name, tensor in model.named_parameters():
            if name not in self.params:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            arr = self.params[name]
            if arr.shape != tensor.data.shape:
                raise FormatError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {tensor.data.shape}")
            tensor.data = arr.copy()
        model.norm = NormStats(mean=self.norm_mean.copy(), var=self.norm_var.copy())
        model.mean_images = {t: self.mean_images[t.label].copy() for t in SLOT_ORDER}
        return model

    def _array_table(self) -> list[tuple[str, np.ndarray]]:
        entries = [(name, self.params[name]) for name in self.params]
        entries.append(("norm.mean", self.norm_mean))
        entries.append(("norm.var", self.norm_var))
        for t in SLOT_ORDER:
            entries.append((f"pad.mean.{t.label}", self.mean_images[t.label]))
        return entries


def save_checkpoint(ckpt: Checkpoint, path: Path):
    entries = ckpt._array_table()
    table, blobs, offset = [], [], 0
    for name, arr in entries:
        blob = arr.astype("<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": ckpt.version,
        "dtype": "f32",
        "endian": "little",
        "condition_order": ckpt.condition_order,
        "flat_order": _FLAT_ORDER_DOC,
        "config": ckpt.config.to_dict(),
        "vocabulary": ckpt.vocab_tokens,
        "best_val_auc": ckpt.best_val_auc,
        "best_epoch": ckpt.best_epoch,
        "arrays": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}", offset=0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated before header length", offset=len(raw))
    (head_len,) = struct.unpack("<Q", raw[4:12])
    if 12 + head_len > len(raw):
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    try:
        header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}", offset=12) from e
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    payload_start = 12 + head_len

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if entry["offset"] < 0 or end > len(raw):
            raise FormatError(f"{path}: blob {entry['name']!r} out of bounds",
                              offset=min(end, len(raw)))
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["nbytes"] != count * 4:
            raise FormatError(f"{path}: blob {entry['name']!r} size mismatch",
                              offset=start)
        arr = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])

    try:
        config = TrainConfig.from_dict(header["config"])
        norm_mean = arrays.pop("norm.mean")
        norm_var = arrays.pop("norm.var")
        mean_images = {t.label: arrays.pop(f"pad.mean.{t.label}") for t in SLOT_ORDER}
    except KeyError as e:
        raise FormatError(f"{path}: missing required entry {e.args[0]!r}") from None
    return Checkpoint(
        config=config,
        params=arrays,
        norm_mean=norm_mean,
        norm_var=norm_var,
        vocab_tokens=list(header["vocabulary"]),
        mean_images=mean_images,
        best_val_auc=float(header["best_val_auc"]),
        best_epoch=int(header["best_epoch"]),
        version=int(header["version"]),
        condition_order=list(header["condition_order"]),
    )
