"""File formats: MRV1 volumes, dataset manifests, JSON documents and JSONL records.

MRV1 layout (little endian): ``b"MRV1"``, u32 ``x, y, z, n_chan,
labels_flag``, then ``n_chan`` float32 grids in x-fastest order, then a
u16 label grid in the same order when ``labels_flag == 1``.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .errors import BadConfig, FormatError
from .pyramid import LabeledVolume

MAGIC = b"MRV1"
_HEADER = struct.Struct("<4s5I")
SPLITS = ("train", "val", "test")


def _umask_mode():
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, _umask_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_canonical(obj) -> str:
    """Deterministic JSON: sorted keys, no extra whitespace, exact float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path, obj):
    atomic_write_text(path, dumps_canonical(obj) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, records):
    """Write an iterable of dicts, one canonical JSON document per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(dumps_canonical(rec))
                fh.write("\n")
        os.chmod(tmp, _umask_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def encode_mrv1(volume: LabeledVolume) -> bytes:
    ch = np.asarray(volume.channels, dtype="<f4")
    n_chan, x, y, z = ch.shape
    has_labels = volume.labels is not None
    parts = [_HEADER.pack(MAGIC, x, y, z, n_chan, int(has_labels))]
    for c in range(n_chan):
        parts.append(ch[c].transpose(2, 1, 0).tobytes())
    if has_labels:
        labels = np.asarray(volume.labels)
        if labels.min() < 0 or labels.max() > 0xFFFF:
            raise FormatError("labels do not fit in u16")
        parts.append(labels.astype("<u2").transpose(2, 1, 0).tobytes())
    return b"".join(parts)


def decode_mrv1(data: bytes) -> LabeledVolume:
    if len(data) < _HEADER.size:
        raise FormatError("truncated MRV1 header")
    magic, x, y, z, n_chan, flag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if flag not in (0, 1) or n_chan < 1:
        raise FormatError("bad MRV1 header fields")
    n = x * y * z
    expected = _HEADER.size + 4 * n * n_chan + (2 * n if flag else 0)
    if len(data) != expected:
        raise FormatError(f"MRV1 payload has {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    chans = np.frombuffer(data, dtype="<f4", count=n * n_chan, offset=off)
    chans = chans.reshape(n_chan, z, y, x).transpose(0, 3, 2, 1).astype(np.float32)
    labels = None
    if flag:
        off += 4 * n * n_chan
        labels = np.frombuffer(data, dtype="<u2", count=n, offset=off)
        labels = labels.reshape(z, y, x).transpose(2, 1, 0).astype(np.int64)
    return LabeledVolume(np.ascontiguousarray(chans),
                         None if labels is None else np.ascontiguousarray(labels))


def write_mrv1(path, volume: LabeledVolume):
    atomic_write_bytes(path, encode_mrv1(volume))


def read_mrv1(path) -> LabeledVolume:
    with open(path, "rb") as fh:
        return decode_mrv1(fh.read())


@dataclass
class VolumeEntry:
    path: str
    split: str


@dataclass
class Manifest:
    n_clas: int
    class_names: List[str]
    background: List[int]
    volumes: List[VolumeEntry]
    root: Path = field(default=Path("."))

    @property
    def foreground(self):
        return [c for c in range(1, self.n_clas + 1) if c not in self.background]

    def entries(self, split):
        return [v for v in self.volumes if v.split == split]

    def resolve(self, entry: VolumeEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def to_dict(self):
        return {"n_clas": self.n_clas, "class_names": list(self.class_names),
                "background": list(self.background),
                "volumes": [{"path": v.path, "split": v.split} for v in self.volumes]}


def load_manifest(path, check_paths=True) -> Manifest:
    path = Path(path)
    try:
        doc = read_json(path)
        n_clas = int(doc["n_clas"])
        names = doc.get("class_names") or [f"class{c}" for c in range(1, n_clas + 1)]
        vols = [VolumeEntry(str(v["path"]), str(v["split"])) for v in doc["volumes"]]
        background = [int(b) for b in doc.get("background", [])]
        man = Manifest(n_clas, list(names), background, vols, path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"malformed manifest {path}: {exc}") from exc
    for v in man.volumes:
        if v.split not in SPLITS:
            raise BadConfig(f"unknown split {v.split!r}")
        if check_paths and not man.resolve(v).exists():
            raise BadConfig(f"volume {man.resolve(v)} does not exist")
    if len(man.class_names) != man.n_clas:
        raise BadConfig("class_names length must equal n_clas")
    return man


def save_manifest(path, manifest: Manifest):
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
