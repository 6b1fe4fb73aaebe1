"""On-disk formats: binary PGM images, JSON-lines manifests, parameter checkpoints."""
from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import torch

from glam.synthdata import Example


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ManifestError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        self.line = line
        self.field = field
        super().__init__(f"manifest line {line}, field {field!r}: {message}")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- PGM

def encode_pgm(pixels: np.ndarray, maxval: int) -> bytes:
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    h, w = pixels.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels, dtype=dtype).tobytes()


def decode_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Parse a binary PGM; returns (pixels as uint8/uint16, maxval)."""
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (magic must be P5)", 0)
    pos = 2
    fields, starts = [], []
    separated = False
    while len(fields) < 3:
        start = pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        separated = separated or pos > start
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            separated = True
            continue
        if not separated:
            raise FormatError("expected whitespace before header field", pos)
        separated = False
        tok_start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise FormatError("expected a decimal header field", pos)
        if pos - tok_start > 9:
            raise FormatError("header field too long", tok_start)
        fields.append(int(data[tok_start:pos]))
        starts.append(tok_start)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("expected a single whitespace byte after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"invalid dimensions {w}x{h}", starts[0] if w < 1 else starts[1])
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside 1..65535", starts[2])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data) - pos}", len(data))
    if len(data) - pos > need:
        raise FormatError("trailing bytes after payload", pos + need)
    pixels = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"pixel value exceeds maxval {maxval}", pos)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    _atomic_write(path, encode_pgm(pixels, maxval))


def read_pgm(path) -> tuple[np.ndarray, int]:
    return decode_pgm(Path(path).read_bytes())


def quantize(values: np.ndarray, maxval: int) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * maxval + 0.5).astype(np.uint16 if maxval > 255 else np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """8-bit grayscale from values in [0, 1]."""
    write_pgm(path, quantize(np.squeeze(image), 255), 255)


def read_image(path) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    return pixels.astype(np.float64) / maxval


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def read_mask(path) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    return pixels > maxval // 2


def write_saliency(path, values: np.ndarray) -> None:
    """16-bit export; [0, 1] maps linearly onto [0, 65535]."""
    write_pgm(path, quantize(values, 65535), 65535)


def read_saliency(path) -> np.ndarray:
    pixels, maxval = read_pgm(path)
    return pixels.astype(np.float64) / maxval


# ---------------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("id", "image_path", "label_malignant", "label_benign",
                   "mask_malignant_path", "mask_benign_path", "split")


@dataclass
class ManifestRecord:
    id: str
    image_path: str
    label_malignant: int
    label_benign: int
    split: str
    mask_malignant_path: Optional[str] = None
    mask_benign_path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"id": self.id, "image_path": self.image_path,
               "label_malignant": self.label_malignant, "label_benign": self.label_benign}
        if self.mask_malignant_path is not None:
            out["mask_malignant_path"] = self.mask_malignant_path
        if self.mask_benign_path is not None:
            out["mask_benign_path"] = self.mask_benign_path
        out["split"] = self.split
        out.update(self.extra)
        return out

    @property
    def labels(self) -> tuple[int, int]:
        return (self.label_malignant, self.label_benign)


def _validate_record(obj, line: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(line, "<record>", "each line must be a JSON object")
    for name in ("id", "image_path", "split"):
        if not isinstance(obj.get(name), str) or not obj[name]:
            raise ManifestError(line, name, "required non-empty string")
    if obj["split"] not in ("train", "val", "test"):
        raise ManifestError(line, "split", f"unknown split {obj['split']!r}")
    labels = {}
    for cls in ("malignant", "benign"):
        key = f"label_{cls}"
        value = obj.get(key)
        if type(value) is not int or value not in (0, 1):
            raise ManifestError(line, key, "must be 0 or 1")
        labels[cls] = value
        mkey = f"mask_{cls}_path"
        mask = obj.get(mkey)
        if value == 1 and (not isinstance(mask, str) or not mask):
            raise ManifestError(line, mkey, f"required when {key} is 1")
        if value == 0 and mask is not None:
            raise ManifestError(line, mkey, f"must be absent when {key} is 0")
    extra = {k: v for k, v in obj.items() if k not in MANIFEST_FIELDS}
    return ManifestRecord(obj["id"], obj["image_path"], labels["malignant"], labels["benign"],
                          obj["split"], obj.get("mask_malignant_path"),
                          obj.get("mask_benign_path"), extra)


def parse_manifest(text: str) -> list[ManifestRecord]:
    records = []
    # only \n ends a record: str.splitlines would also split on characters
    # such as U+2028 that JSON allows unescaped inside strings
    for i, line in enumerate(text.split("\n"), start=1):
        line = line.removesuffix("\r")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except (json.JSONDecodeError, RecursionError) as exc:
            raise ManifestError(i, "<json>", str(exc)) from None
        records.append(_validate_record(obj, i))
    return records


def read_manifest(path, check_paths: bool = False) -> list[ManifestRecord]:
    """Read a JSON-lines manifest; with ``check_paths`` every referenced file must exist."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"manifest is not UTF-8: {exc.reason}", exc.start) from None
    records = parse_manifest(text)
    if check_paths:
        for i, rec in enumerate(records, start=1):
            for key in ("image_path", "mask_malignant_path", "mask_benign_path"):
                rel = getattr(rec, key)
                if rel is not None and not (path.parent / rel).exists():
                    raise ManifestError(i, key, f"file {rel} not found")
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    lines = [json.dumps(r.to_json(), ensure_ascii=False) for r in records]
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_dataset(splits: Mapping[str, list[Example]], out_dir) -> Path:
    """Write images/masks as PGM plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    records = []
    for split, examples in splits.items():
        for ex in examples:
            image_rel = f"images/{ex.id}.pgm"
            write_pgm(out_dir / image_rel, ex.pixels, 255)
            masks = {}
            for cls, label, mask in zip(("malignant", "benign"), ex.labels, ex.masks):
                if label:
                    rel = f"masks/{ex.id}_{cls}.pgm"
                    write_mask(out_dir / rel, mask)
                    masks[cls] = rel
            records.append(ManifestRecord(ex.id, image_rel, ex.labels[0], ex.labels[1], split,
                                          masks.get("malignant"), masks.get("benign")))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def load_dataset(manifest_path) -> dict[str, list[Example]]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    splits: dict[str, list[Example]] = {"train": [], "val": [], "test": []}
    for rec in read_manifest(manifest_path, check_paths=True):
        pixels, maxval = read_pgm(root / rec.image_path)
        if maxval != 255:
            pixels = np.floor(pixels.astype(np.float64) / maxval * 255 + 0.5).astype(np.uint8)
        masks = tuple(read_mask(root / p) if p is not None else None
                      for p in (rec.mask_malignant_path, rec.mask_benign_path))
        splits[rec.split].append(Example(rec.id, pixels, rec.labels, masks, rec.split))
    return splits


# -------------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"GLAMCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    config_digest: str
    entries: "OrderedDict[str, np.ndarray]"
    digest_mismatch: bool = False


def encode_checkpoint(entries: Mapping[str, np.ndarray], stage: str, config_digest: str) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for text in (stage, config_digest):
        raw = text.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if len(data) - pos < n:
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    texts = []
    for what in ("stage tag", "config digest"):
        (n,) = struct.unpack("<H", take(2, what))
        start = pos
        try:
            texts.append(take(n, what).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not UTF-8", start) from None
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "entry name length"))
        start = pos
        try:
            name = take(n, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", start) from None
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", start)
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = 1
        for d in shape:
            size *= d
        payload = take(4 * size, f"payload of {name!r}")
        try:
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        except ValueError:  # empty, but with dims numpy cannot represent
            raise FormatError(f"unsupported shape {shape} for {name!r}", start) from None
    if pos != len(data):
        raise FormatError("trailing bytes after last entry", pos)
    return Checkpoint(texts[0], texts[1], entries)


def save_checkpoint(path, registry: Mapping[str, object], stage: str, config_digest: str) -> None:
    entries = OrderedDict()
    for name, value in registry.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().float().numpy()
        entries[name] = np.asarray(value, dtype=np.float32)
    _atomic_write(path, encode_checkpoint(entries, stage, config_digest))


def load_checkpoint(path, registry: Optional[Mapping[str, torch.Tensor]] = None,
                    expected_digest: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint and, if ``registry`` is given, copy values into it in place.

    Every registry name must be present with a matching shape; extra
    checkpoint entries are ignored. A config digest differing from
    ``expected_digest`` only warns and sets ``digest_mismatch``.
    """
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        ckpt.digest_mismatch = True
        warnings.warn(f"checkpoint {path} was written for config {ckpt.config_digest[:12]}, "
                      f"loading into {expected_digest[:12]}", stacklevel=2)
    if registry is not None:
        missing = [n for n in registry if n not in ckpt.entries]
        if missing:
            raise KeyError(f"checkpoint {path} lacks parameters: {', '.join(missing)}")
        for name, target in registry.items():
            value = ckpt.entries[name]
            if tuple(value.shape) != tuple(target.shape):
                raise ValueError(f"{name}: checkpoint shape {value.shape} != {tuple(target.shape)}")
            with torch.no_grad():
                target.copy_(torch.from_numpy(value))
    return ckpt


def module_registry(modules: Mapping[str, torch.nn.Module]) -> "OrderedDict[str, torch.Tensor]":
    """Ordered ``prefix/a/b/name`` -> tensor view of every parameter and buffer."""
    registry: OrderedDict[str, torch.Tensor] = OrderedDict()
    for prefix, module in modules.items():
        for name, tensor in module.state_dict(keep_vars=True).items():
            registry[f"{prefix}/{name.replace('.', '/')}"] = tensor
    return registry
