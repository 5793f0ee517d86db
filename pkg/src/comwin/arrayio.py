"""CWT1 array container and dataset manifests.

Layout of a CWT1 file (all integers little-endian)::

    b"CWT1" | version u8 | dtype code u8 | ndim u8 | dims u32 * ndim | payload

The payload is stored row-major with no padding and no compression.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CWT1"
VERSION = 1

DTYPE_CODES = {"f32": 1, "f64": 2, "i32": 3, "u8": 4}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
_NUMPY = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "u8": "u1"}
_FROM_NUMPY = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int32): "i32",
    np.dtype(np.uint8): "u8",
}

SPLITS = ("labeled", "unlabeled", "test")


class ArrayFormatError(ValueError):
    """Base class for malformed CWT1 files."""


class BadMagicError(ArrayFormatError):
    pass


class UnsupportedVersionError(ArrayFormatError):
    pass


class UnsupportedDtypeError(ArrayFormatError):
    pass


class TruncatedError(ArrayFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ArraySpec:
    dtype: str
    dims: tuple[int, ...]

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise UnsupportedDtypeError(f"unsupported dtype {self.dtype!r}")
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) > 255:
            raise ValueError("at most 255 dimensions are supported")
        if any(d <= 0 or d >= 2**32 for d in dims):
            raise ValueError(f"dims must be positive 32-bit extents, got {dims}")
        if math.prod(dims) >= 2**63:
            raise ValueError("element count does not fit in 63 bits")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def header_size(self) -> int:
        return 7 + 4 * self.ndim

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype(_NUMPY[self.dtype])


def spec_for(array: np.ndarray) -> ArraySpec:
    try:
        code = _FROM_NUMPY[np.dtype(array.dtype).newbyteorder("=")]
    except KeyError:
        raise UnsupportedDtypeError(f"no CWT1 dtype for {array.dtype}") from None
    return ArraySpec(code, array.shape)


def encode(spec: ArraySpec, data) -> bytes:
    flat = np.asarray(data).reshape(-1)
    if flat.size != spec.size:
        raise ValueError(
            f"data has {flat.size} elements but dims {spec.dims} need {spec.size}"
        )
    header = bytearray(MAGIC)
    header += bytes([VERSION, DTYPE_CODES[spec.dtype], spec.ndim])
    for d in spec.dims:
        header += int(d).to_bytes(4, "little")
    payload = np.ascontiguousarray(flat.astype(spec.numpy_dtype, copy=False))
    return bytes(header) + payload.tobytes()


def decode(buf: bytes) -> tuple[ArraySpec, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 7:
        raise TruncatedError("header truncated")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    end = 7 + 4 * ndim
    if len(buf) < end:
        raise TruncatedError("header truncated")
    dims = tuple(int.from_bytes(buf[7 + 4 * i : 11 + 4 * i], "little") for i in range(ndim))
    spec = ArraySpec(_CODE_TO_DTYPE[code], dims)
    nbytes = spec.size * spec.numpy_dtype.itemsize
    if len(buf) - end < nbytes:
        raise TruncatedError(f"payload truncated: {len(buf) - end} of {nbytes} bytes")
    if len(buf) - end > nbytes:
        raise ArrayFormatError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype=spec.numpy_dtype, count=spec.size, offset=end)
    return spec, data.copy()


def write_array(path, spec: ArraySpec, data) -> None:
    """Write ``data`` (any flat or shaped numeric sequence) under ``spec``."""
    blob = encode(spec, data)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_array(path) -> tuple[ArraySpec, np.ndarray]:
    """Return ``(spec, flat data)``; ``data.reshape(spec.dims)`` gives the array."""
    with open(path, "rb") as fh:
        return decode(fh.read())


def save(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    write_array(path, spec_for(array), array)


def load(path) -> np.ndarray:
    spec, data = read_array(path)
    return data.reshape(spec.dims)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Sample:
    image: str
    split: str
    label: str | None = None
    # truth for unlabeled items, used only for pseudo-label diagnostics
    hidden_label: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split tag {self.split!r}")
        if self.split == "unlabeled" and self.label is not None:
            raise ManifestError(f"unlabeled entry {self.image!r} carries a label path")
        if self.split != "unlabeled" and self.label is None:
            raise ManifestError(f"{self.split} entry {self.image!r} has no label path")
        if self.split != "unlabeled" and self.hidden_label is not None:
            raise ManifestError("hidden_label is only meaningful for unlabeled entries")

    def to_json(self) -> dict:
        out = {"image": self.image}
        if self.label is not None:
            out["label"] = self.label
        if self.hidden_label is not None:
            out["hidden_label"] = self.hidden_label
        out["split"] = self.split
        return out


@dataclass
class DatasetManifest:
    name: str
    classes: int
    samples: list[Sample] = field(default_factory=list)
    seed: int | None = None
    synth_config: dict | None = None
    # directory that relative sample paths are resolved against
    root: Path = field(default=Path("."), compare=False, repr=False)

    def split(self, tag: str) -> list[Sample]:
        if tag not in SPLITS:
            raise ManifestError(f"unknown split tag {tag!r}")
        return [s for s in self.samples if s.split == tag]

    @property
    def counts(self) -> dict[str, int]:
        return {tag: len(self.split(tag)) for tag in SPLITS}

    @property
    def n_labeled(self) -> int:
        return self.counts["labeled"]

    @property
    def n_unlabeled(self) -> int:
        return self.counts["unlabeled"]

    @property
    def n_test(self) -> int:
        return self.counts["test"]

    def resolve(self, rel: str) -> Path:
        """Resolve a sample path; existence is checked here, not at load time."""
        p = Path(rel)
        if not p.is_absolute():
            p = self.root / p
        if not p.exists():
            raise FileNotFoundError(f"manifest {self.name!r} references missing file {p}")
        return p

    def load_image(self, sample: Sample) -> np.ndarray:
        return load(self.resolve(sample.image))

    def load_label(self, sample: Sample) -> np.ndarray:
        rel = sample.label if sample.label is not None else sample.hidden_label
        if rel is None:
            raise ManifestError(f"sample {sample.image!r} has no label")
        return load(self.resolve(rel))

    def to_json(self) -> dict:
        out = {"name": self.name, "classes": self.classes, "seed": self.seed}
        if self.synth_config is not None:
            out["synth_config"] = self.synth_config
        out["samples"] = [s.to_json() for s in self.samples]
        return out


_MANIFEST_KEYS = {"name", "classes", "seed", "samples", "synth_config"}
_SAMPLE_KEYS = {"image", "label", "hidden_label", "split"}


def manifest_from_json(obj, root: Path | str = ".") -> DatasetManifest:
    if not isinstance(obj, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(obj) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    try:
        name, classes = obj["name"], obj["classes"]
    except KeyError as exc:
        raise ManifestError(f"manifest missing key {exc.args[0]!r}") from None
    samples = []
    for entry in obj.get("samples", []):
        if not isinstance(entry, dict) or set(entry) - _SAMPLE_KEYS:
            raise ManifestError(f"malformed sample entry {entry!r}")
        try:
            samples.append(
                Sample(
                    image=entry["image"],
                    split=entry["split"],
                    label=entry.get("label"),
                    hidden_label=entry.get("hidden_label"),
                )
            )
        except KeyError as exc:
            raise ManifestError(f"sample entry missing key {exc.args[0]!r}") from None
    if not isinstance(classes, int) or classes < 1:
        raise ManifestError(f"invalid class count {classes!r}")
    return DatasetManifest(
        name=str(name),
        classes=classes,
        samples=samples,
        seed=obj.get("seed"),
        synth_config=obj.get("synth_config"),
        root=Path(root),
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest JSON in {path}: {exc}") from None
    return manifest_from_json(obj, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(manifest.to_json(), indent=2, sort_keys=False) + "\n"
    Path(path).write_text(text)


def directory_digest(root, pattern: str = "**/*") -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.glob(pattern) if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


__all__: Sequence[str] = [
    "ArraySpec",
    "ArrayFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "UnsupportedDtypeError",
    "TruncatedError",
    "ManifestError",
    "Sample",
    "DatasetManifest",
    "write_array",
    "read_array",
    "save",
    "load",
    "load_manifest",
    "save_manifest",
    "directory_digest",
]
