"""On-disk formats: slice containers, dataset manifests, atomic writes.

Slice container layout (all little-endian)::

    b"CMRS" | version u32 | dtype u32 | height u32 | width u32 | payload

dtype 0 is real float32, dtype 1 is complex64 stored as interleaved re/im
float32 pairs. The payload is row-major.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

SLICE_MAGIC = b"CMRS"
SLICE_VERSION = 1
DTYPE_REAL32 = 0
DTYPE_COMPLEX64 = 1
_HEADER = struct.Struct("<4sIIII")
_DTYPES = {DTYPE_REAL32: np.dtype("<f4"), DTYPE_COMPLEX64: np.dtype("<c8")}

MANIFEST_NAME = "manifest.tsv"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_slice(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"slice must be 2D, got shape {arr.shape}")
    code = DTYPE_COMPLEX64 if np.iscomplexobj(arr) else DTYPE_REAL32
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return _HEADER.pack(SLICE_MAGIC, SLICE_VERSION, code, *arr.shape) + payload


def decode_slice(buf: bytes, source="<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated slice header")
    magic, version, code, h, w = _HEADER.unpack_from(buf)
    if magic != SLICE_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != SLICE_VERSION:
        raise FormatError(f"{source}: unsupported slice version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = h * w * dt.itemsize
    payload = buf[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"{source}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dt).reshape(h, w).copy()


def write_slice(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_slice(arr))


def read_slice(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read slice {path}: {exc}") from exc
    return decode_slice(buf, source=str(path))


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    accel: int
    coil_mode: str
    seed: int


@dataclass
class DatasetManifest:
    """Ordered list of slice pairs; ``root`` is the directory paths are relative to."""

    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def pair_dir(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def to_text(self) -> str:
        lines = [
            f"{e.id}\t{e.path}\t{e.accel}\t{e.coil_mode}\t{e.seed}\n" for e in self.entries
        ]
        return "".join(lines)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        atomic_write_text(path, self.to_text())
        return path


def load_manifest(path, split: str | None = None, check_files: bool = True) -> DatasetManifest:
    """Read a manifest file, or ``<dir>/manifest.tsv`` when given a directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields")
        pid, rel, accel, mode, seed = parts
        if pid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {pid!r}")
        seen.add(pid)
        try:
            entries.append(ManifestEntry(pid, rel, int(accel), mode, int(seed)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    manifest = DatasetManifest(path.parent, entries, split or path.parent.name)
    if check_files:
        missing = [e.id for e in entries if not manifest.pair_dir(e).is_dir()]
        if missing:
            raise DataError(f"{path}: files missing for ids {missing[:10]}")
    return manifest


def pair_files(pair_dir) -> tuple[Path, Path]:
    pair_dir = Path(pair_dir)
    return pair_dir / "under.cmrs", pair_dir / "full.cmrs"


def read_pair(manifest: DatasetManifest, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    under_path, full_path = pair_files(manifest.pair_dir(entry))
    return read_slice(under_path), read_slice(full_path)


def load_pairs(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack every pair of a manifest into ``(under, full)`` arrays of shape (N, H, W)."""
    if len(manifest) == 0:
        return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.float32)
    pairs = [read_pair(manifest, e) for e in manifest]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
