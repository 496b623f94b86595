"""Binary volume files and the plain-text dataset manifest.

Volume file layout::

    b"GNVOL001"
    uint32 little-endian header length
    UTF-8 header: key=value lines (dims, spacing, dtype, kind)
    payload, little-endian, D-major then H then W

Images are stored as f32 and labels as u8.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .types import DatasetSplit, HiddenLabels, LabelMap, Volume

MAGIC = b"GNVOL001"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_KIND_DTYPE = {"image": "f32", "label": "u8"}
MANIFEST_HEADER = "# guidednet manifest v1"


class VolumeFormatError(ValueError):
    pass


def write_volume(path, obj):
    """Write a :class:`Volume` (as f32) or :class:`LabelMap` (as u8)."""
    kind = "label" if isinstance(obj, LabelMap) else "image"
    dtype = _KIND_DTYPE[kind]
    data = np.ascontiguousarray(obj.data, dtype=_DTYPES[dtype])
    header = "\n".join([
        "dims=" + ",".join(str(n) for n in data.shape),
        "spacing=" + ",".join(repr(float(s)) for s in obj.spacing),
        f"dtype={dtype}",
        f"kind={kind}",
    ]).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.tobytes())


def _parse_header(text, path):
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = {"dims", "spacing", "dtype", "kind"} - fields.keys()
    if missing:
        raise VolumeFormatError(f"{path}: header is missing {sorted(missing)}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split(","))
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unparseable dims/spacing ({exc})") from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise VolumeFormatError(f"{path}: dims {dims} / spacing {spacing} must have 3 positive entries")
    dtype, kind = fields["dtype"], fields["kind"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype!r}")
    if kind not in _KIND_DTYPE:
        raise VolumeFormatError(f"{path}: unknown kind {kind!r}")
    if _KIND_DTYPE[kind] != dtype:
        raise VolumeFormatError(f"{path}: dtype {dtype} does not match kind {kind} (expected {_KIND_DTYPE[kind]})")
    return dims, spacing, dtype, kind


def read_volume(path, expect_kind=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a GNVOL001 file")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise VolumeFormatError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise VolumeFormatError(f"{path}: truncated header ({len(blob) - pos} of {hlen} bytes)")
    try:
        text = blob[pos:pos + hlen].decode("utf-8")
    except UnicodeDecodeError:
        raise VolumeFormatError(f"{path}: header is not valid UTF-8") from None
    dims, spacing, dtype, kind = _parse_header(text, path)
    if expect_kind is not None and kind != expect_kind:
        raise VolumeFormatError(f"{path}: expected a {expect_kind} file, found {kind}")
    pos += hlen
    dt = _DTYPES[dtype]
    expected = int(np.prod(dims)) * dt.itemsize
    actual = len(blob) - pos
    if actual < expected:
        raise VolumeFormatError(f"{path}: truncated payload ({actual} of {expected} bytes for dims {dims})")
    if actual > expected:
        raise VolumeFormatError(f"{path}: payload has {actual} bytes but dims {dims} imply {expected}")
    data = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims)
    if kind == "label":
        return LabelMap(data.copy(), spacing)
    return Volume(data.astype(np.float64), spacing)


# -- manifest -------------------------------------------------------------
# one line per case:  <split> <image path> <label path or ->
# split is "labeled", "unlabeled" or "val"; unlabelled label paths point at
# the evaluation-only directory.  Validation cases never enter training.

SPLITS = ("labeled", "unlabeled", "val")

def write_manifest(path, entries):
    lines = [MANIFEST_HEADER]
    for split, image, label in entries:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        lines.append(f"{split}\t{image}\t{label or '-'}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: expected '<labeled|unlabeled|val>\\t<image>\\t<label>'")
            entries.append((parts[0], parts[1], None if parts[2] == "-" else parts[2]))
    return entries


def load_split(manifest_path):
    """Load a dataset directory; unlabelled ground truth goes behind :class:`HiddenLabels`."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    li, ll, ui, hidden, lid, uid = [], [], [], [], [], []
    for idx, (split, image, label) in enumerate(read_manifest(manifest_path)):
        if split == "val":
            continue
        img = read_volume(os.path.join(root, image), expect_kind="image")
        if split == "labeled":
            if label is None:
                raise ValueError(f"labelled case {image} has no label file")
            li.append(img)
            ll.append(read_volume(os.path.join(root, label), expect_kind="label"))
            lid.append(idx)
        else:
            ui.append(img)
            uid.append(idx)
            hidden.append(None if label is None else read_volume(os.path.join(root, label), expect_kind="label"))
    return DatasetSplit(li, ll, ui, HiddenLabels(hidden), lid, uid)


def load_validation(manifest_path):
    """``(images, labels)`` of the manifest's validation cases."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    images, labels = [], []
    for split, image, label in read_manifest(manifest_path):
        if split != "val":
            continue
        if label is None:
            raise ValueError(f"validation case {image} has no label file")
        images.append(read_volume(os.path.join(root, image), expect_kind="image"))
        labels.append(read_volume(os.path.join(root, label), expect_kind="label"))
    return images, labels


def save_split(split, out_dir, val_pairs=()):
    """Write every case plus ``manifest.txt``; unlabelled labels go to ``eval_only/``.

    ``val_pairs`` are ``(Volume, LabelMap)`` validation cases written under ``val/``.
    """
    entries = []
    for i, (img, lab) in zip(split.labeled_ids, zip(split.labeled_images, split.labeled_labels)):
        write_volume(os.path.join(out_dir, "images", f"case_{i:04d}.gnv"), img)
        write_volume(os.path.join(out_dir, "labels", f"case_{i:04d}.gnv"), lab)
        entries.append(("labeled", f"images/case_{i:04d}.gnv", f"labels/case_{i:04d}.gnv"))
    hidden = split.hidden.reveal(purpose="evaluation") if len(split.hidden) else []
    for j, (i, img) in enumerate(zip(split.unlabeled_ids, split.unlabeled_images)):
        write_volume(os.path.join(out_dir, "images", f"case_{i:04d}.gnv"), img)
        label_rel = None
        if j < len(hidden) and hidden[j] is not None:
            label_rel = f"eval_only/case_{i:04d}.gnv"
            write_volume(os.path.join(out_dir, label_rel), hidden[j])
        entries.append(("unlabeled", f"images/case_{i:04d}.gnv", label_rel))
    for j, (img, lab) in enumerate(val_pairs):
        write_volume(os.path.join(out_dir, "val", f"image_{j:04d}.gnv"), img)
        write_volume(os.path.join(out_dir, "val", f"label_{j:04d}.gnv"), lab)
        entries.append(("val", f"val/image_{j:04d}.gnv", f"val/label_{j:04d}.gnv"))
    path = os.path.join(out_dir, "manifest.txt")
    write_manifest(path, entries)
    return path
